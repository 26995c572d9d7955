"""Area tiling along the drive route, dataset assembly, normalization and storage."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from exposnet.geodata import (BANDS_MHZ, N_CHANNELS, TILE_GRID, BsaRecord, BuildingFootprint,
                              GeoOrigin, GeoRaster, GeoSources, nonzero_bsa_heights,
                              project_to_local)
from exposnet.measurements import (MIN_POINTS, GpsFix, MeasurementError, MeasurementPoint,
                                   RawRecord, aggregate_area, sync_gps)

CENTER_SPACING_M = 50.0
N_TARGETS = 2 * len(BANDS_MHZ) + 2
MAGIC = b"EXPN"
VERSION = 1
FLAG_NORMALIZED = 0x01
_HEADER = struct.Struct("<4sHBBHHBH")


class DatasetError(ValueError):
    pass


class SampleFormatError(DatasetError):
    pass


class SampleVersionError(DatasetError):
    pass


@dataclass
class AreaSample:
    center_lat: float
    center_lon: float
    inputs: np.ndarray  # (15, 128, 128) float32
    targets: np.ndarray  # (16,) float32: 7 x (rms, std), total rms, total std
    bsa_heights: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))
    normalized: bool = False

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float32)
        self.bsa_heights = np.asarray(self.bsa_heights, dtype=np.float32).reshape(-1)
        if self.inputs.ndim != 3 or self.inputs.shape[0] != N_CHANNELS:
            raise DatasetError(f"inputs must be {N_CHANNELS} x H x W, got {self.inputs.shape}")
        if self.targets.shape != (N_TARGETS,):
            raise DatasetError(f"expected {N_TARGETS} targets, got {self.targets.shape}")
        if np.any(self.targets < 0):
            raise DatasetError("targets must be non-negative")

    @property
    def band_targets(self) -> np.ndarray:
        """(7, 2) per-band (rms, std)."""
        return self.targets[:-2].reshape(len(BANDS_MHZ), 2)

    @property
    def total_targets(self) -> np.ndarray:
        return self.targets[-2:]


# --------------------------------------------------------------------- tiling

def select_area_centers(xy: np.ndarray, spacing_m: float = CENTER_SPACING_M) -> list[int]:
    """Indices of area centres from route-ordered local coordinates ``(n, 2)``.

    Greedy walk: the first point is a centre, and each following centre is the
    first point at least ``spacing_m`` further along the route.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        return []
    along = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
    centers = [0]
    # tolerance absorbs the rounding of summed segment lengths
    tol = 1e-6
    for i in range(1, len(xy)):
        if along[i] - along[centers[-1]] >= spacing_m - tol:
            centers.append(i)
    return centers


def build_samples(sources: GeoSources, points: Sequence[MeasurementPoint],
                  spacing_m: float = CENTER_SPACING_M,
                  min_points: int = MIN_POINTS) -> list[AreaSample]:
    """One sample per route centre holding at least ``min_points`` measurements."""
    if not points:
        return []
    lat = np.array([p.lat for p in points])
    lon = np.array([p.lon for p in points])
    x, y = project_to_local(lat, lon, sources.origin)
    x, y = np.atleast_1d(x), np.atleast_1d(y)
    e = np.array([p.e_band for p in points], dtype=np.float64)
    samples = []
    for i in select_area_centers(np.column_stack([x, y]), spacing_m):
        tile = sources.tile(float(lat[i]), float(lon[i]))
        inside = tile.contains(x, y)
        targets = aggregate_area(e[inside], min_points)
        if targets is None:
            continue
        tensor = sources.render(tile)
        samples.append(AreaSample(float(lat[i]), float(lon[i]), tensor, targets,
                                  nonzero_bsa_heights(tensor)))
    return samples


def build_dataset(buildings: Sequence[BuildingFootprint], bsa: Sequence[BsaRecord],
                  ir: GeoRaster | None, landcover: GeoRaster | None,
                  records: Sequence[RawRecord], track: Sequence[GpsFix],
                  spacing_m: float = CENTER_SPACING_M, min_points: int = MIN_POINTS):
    """Full ingestion path from parsed inputs to samples.

    The first GPS fix is the projection origin. Returns ``(samples, origin)``.
    """
    if not track:
        raise MeasurementError("empty GPS track")
    origin = GeoOrigin(track[0].lat, track[0].lon)
    sources = GeoSources.from_records(origin, buildings, bsa, ir, landcover)
    points = sync_gps(records, track)
    return build_samples(sources, points, spacing_m, min_points), origin


def split_train_test(samples: Sequence, n_test: int):
    """Hold out the last ``n_test`` samples in route order, no shuffling."""
    if n_test < 0 or n_test > len(samples):
        raise DatasetError(f"n_test={n_test} invalid for {len(samples)} samples")
    cut = len(samples) - n_test
    return list(samples[:cut]), list(samples[cut:])


# -------------------------------------------------------------- normalization

@dataclass
class NormStats:
    ch_min: np.ndarray  # (15,)
    ch_max: np.ndarray
    bsa_min: float = 0.0
    bsa_max: float = 0.0

    def to_json(self) -> dict:
        return {"ch_min": [float(v) for v in self.ch_min],
                "ch_max": [float(v) for v in self.ch_max],
                "bsa_min": float(self.bsa_min), "bsa_max": float(self.bsa_max)}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.array(d["ch_min"], np.float32), np.array(d["ch_max"], np.float32),
                   float(d["bsa_min"]), float(d["bsa_max"]))


def fit_norm(samples: Sequence[AreaSample]) -> NormStats:
    """Per-channel min/max over the (training) samples."""
    if not samples:
        raise DatasetError("cannot fit normalization on an empty set")
    lo = np.min([s.inputs.min(axis=(1, 2)) for s in samples], axis=0)
    hi = np.max([s.inputs.max(axis=(1, 2)) for s in samples], axis=0)
    heights = np.concatenate([s.bsa_heights for s in samples])
    if heights.size:
        return NormStats(lo, hi, float(heights.min()), float(heights.max()))
    return NormStats(lo, hi)


def min_max_scale(x, lo, hi):
    """(x - lo) / (hi - lo) clipped to [0, 1]; zero where hi == lo."""
    x = np.asarray(x, dtype=np.float32)
    lo = np.asarray(lo, dtype=np.float32)
    span = np.asarray(hi, dtype=np.float32) - lo
    safe = np.where(span > 0, span, np.float32(1))
    out = np.where(span > 0, (x - lo) / safe, np.float32(0))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_norm(sample: AreaSample, stats: NormStats) -> AreaSample:
    if sample.normalized:
        raise DatasetError("sample is already normalized")
    inputs = min_max_scale(sample.inputs, stats.ch_min[:, None, None], stats.ch_max[:, None, None])
    heights = min_max_scale(sample.bsa_heights, stats.bsa_min, stats.bsa_max)
    return replace(sample, inputs=inputs, bsa_heights=heights, normalized=True)


# ------------------------------------------------------------- binary format

def write_sample(path, sample: AreaSample):
    c, h, w = sample.inputs.shape
    n_bsa = sample.bsa_heights.size
    flags = FLAG_NORMALIZED if sample.normalized else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, c, h, w, len(BANDS_MHZ), n_bsa))
        fh.write(sample.inputs.astype("<f4").tobytes())
        fh.write(sample.bsa_heights.astype("<f4").tobytes())
        fh.write(sample.targets.astype("<f4").tobytes())
        fh.write(np.array([sample.center_lat, sample.center_lon], "<f8").tobytes())


def read_sample(path) -> AreaSample:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise SampleFormatError(f"{path}: not an EXPN sample file")
    magic, version, flags, c, h, w, n_bands, n_bsa = _HEADER.unpack_from(data)
    if version != VERSION:
        raise SampleVersionError(f"{path}: sample version {version}, expected {VERSION}")
    if n_bands != len(BANDS_MHZ):
        raise SampleFormatError(f"{path}: {n_bands} bands, expected {len(BANDS_MHZ)}")
    n_t = 2 * n_bands + 2
    expected = _HEADER.size + 4 * (c * h * w + n_bsa + n_t) + 16
    if len(data) != expected:
        raise SampleFormatError(f"{path}: size {len(data)} != expected {expected}")
    off = _HEADER.size
    inputs = np.frombuffer(data, "<f4", c * h * w, off).reshape(c, h, w)
    off += 4 * c * h * w
    heights = np.frombuffer(data, "<f4", n_bsa, off)
    off += 4 * n_bsa
    targets = np.frombuffer(data, "<f4", n_t, off)
    off += 4 * n_t
    lat, lon = np.frombuffer(data, "<f8", 2, off)
    return AreaSample(float(lat), float(lon), inputs.astype(np.float32), targets.astype(np.float32),
                      heights.astype(np.float32), bool(flags & FLAG_NORMALIZED))


# ------------------------------------------------------------ dataset folders

@dataclass
class DatasetManifest:
    origin: GeoOrigin
    files: list[str]
    n_test: int
    grid: int = TILE_GRID

    def to_json(self) -> dict:
        return {"origin": [self.origin.lat, self.origin.lon], "files": self.files,
                "n_test": self.n_test, "grid": self.grid}


def save_dataset(out_dir, samples: Sequence[AreaSample], n_test: int, origin: GeoOrigin,
                 stats: NormStats | None = None) -> DatasetManifest:
    """Write raw samples, the split and (train-fitted) norm stats to ``out_dir``."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    train, _ = split_train_test(samples, n_test)
    if stats is None:
        stats = fit_norm(train)
    files = []
    for i, s in enumerate(samples):
        name = f"samples/{i:06d}.expn"
        write_sample(out / name, s)
        files.append(name)
    manifest = DatasetManifest(origin, files, n_test)
    (out / "dataset.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    (out / "norm_stats.json").write_text(json.dumps(stats.to_json(), indent=2) + "\n")
    return manifest


def load_dataset(data_dir):
    """Returns ``(manifest, samples, stats)`` with samples in route order, unnormalized."""
    d = Path(data_dir)
    try:
        meta = json.loads((d / "dataset.json").read_text())
        stats = NormStats.from_json(json.loads((d / "norm_stats.json").read_text()))
    except (OSError, ValueError, KeyError) as e:
        raise DatasetError(f"{d}: not a dataset directory: {e}") from e
    manifest = DatasetManifest(GeoOrigin(*meta["origin"]), meta["files"], meta["n_test"],
                               meta.get("grid", TILE_GRID))
    samples = [read_sample(d / f) for f in manifest.files]
    return manifest, samples, stats
