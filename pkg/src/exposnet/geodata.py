"""Geospatial ingestion and rasterization of the 15 input channels of one area tile.

Coordinates inside a tile are local metres (x east, y north) from a shared
:class:`GeoOrigin`. Raster row 0 is the northern edge of the tile, column 0
the western edge.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6371000.0
BANDS_MHZ = (700, 800, 900, 1800, 2100, 2600, 3500)
TILE_SIDE_M = 400.0
TILE_GRID = 128
N_CHANNELS = 15
FLOOR_HEIGHT_M = 3.0
NEIGHBOR_RADIUS_M = 100.0
DEFAULT_COVERAGE_M = 500.0
# Half-power beamwidth of the cos^8 pattern, 2*acos(0.5**(1/8)) ~= 47 deg.
COS8_HPBW_DEG = math.degrees(2.0 * math.acos(0.5 ** 0.125))

CHANNELS = (
    "ir_r", "ir_g", "ir_b", "lc_r", "lc_g", "lc_b", "building_height", "bsa_height",
    *(f"radiation_{b}" for b in BANDS_MHZ),
)


class GeoDataError(ValueError):
    """Malformed geospatial input file."""


@dataclass(frozen=True)
class GeoOrigin:
    lat: float
    lon: float

    def __post_init__(self):
        if abs(self.lat) > 90 or abs(self.lon) > 180:
            raise ValueError(f"origin out of range: ({self.lat}, {self.lon})")


def project_to_local(lat, lon, origin: GeoOrigin):
    """Equirectangular projection to (x east, y north) metres around ``origin``."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    k = EARTH_RADIUS_M * math.pi / 180.0
    x = k * math.cos(math.radians(origin.lat)) * (lon - origin.lon)
    y = k * (lat - origin.lat)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def unproject(x, y, origin: GeoOrigin):
    """Inverse of :func:`project_to_local`, returns (lat, lon)."""
    k = EARTH_RADIUS_M * math.pi / 180.0
    lat = origin.lat + np.asarray(y, dtype=np.float64) / k
    lon = origin.lon + np.asarray(x, dtype=np.float64) / (k * math.cos(math.radians(origin.lat)))
    if lat.ndim == 0:
        return float(lat), float(lon)
    return lat, lon


@dataclass(frozen=True)
class Tile:
    """A square area of ``side_m`` metres rendered as ``grid x grid`` pixels."""

    center_lat: float
    center_lon: float
    origin: GeoOrigin
    side_m: float = TILE_SIDE_M
    grid: int = TILE_GRID

    @property
    def resolution(self) -> float:
        return self.side_m / self.grid

    @property
    def center_xy(self) -> tuple[float, float]:
        return project_to_local(self.center_lat, self.center_lon, self.origin)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(west, south, east, north) in local metres."""
        cx, cy = self.center_xy
        h = self.side_m / 2
        return cx - h, cy - h, cx + h, cy + h

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Local (x, y) of every pixel centre, each shaped (grid, grid)."""
        west, _, _, north = self.bounds
        offs = (np.arange(self.grid) + 0.5) * self.resolution
        xs = west + offs
        ys = north - offs
        return np.broadcast_to(xs[None, :], (self.grid, self.grid)), \
            np.broadcast_to(ys[:, None], (self.grid, self.grid))

    def pixel_of(self, x: float, y: float) -> tuple[int, int] | None:
        """(row, col) of the pixel containing a local point, or None outside."""
        west, _, _, north = self.bounds
        col = math.floor((x - west) / self.resolution)
        row = math.floor((north - y) / self.resolution)
        if 0 <= row < self.grid and 0 <= col < self.grid:
            return row, col
        return None

    def contains(self, x, y):
        west, south, east, north = self.bounds
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= west) & (x <= east) & (y >= south) & (y <= north)


# ------------------------------------------------------------------ buildings

@dataclass
class BuildingFootprint:
    id: str
    vertices: list[tuple[float, float]]  # (lat, lon)
    height_m: float | None = None
    floors: int | None = None

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValueError(f"footprint {self.id} needs at least 3 vertices")
        if self.height_m is not None and self.height_m < 0:
            raise ValueError(f"footprint {self.id} has negative height")


@dataclass
class ProjectedFootprint:
    """A footprint polygon in local metres with a resolved height."""

    xy: np.ndarray  # (n, 2)
    height_m: float

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return (float(self.xy[:, 0].min()), float(self.xy[:, 1].min()),
                float(self.xy[:, 0].max()), float(self.xy[:, 1].max()))


def estimate_building_height(fp: BuildingFootprint,
                             neighbors: Iterable[tuple[float, float]] = (),
                             fallback: float | None = None) -> float:
    """Height of ``fp`` in metres.

    Order of preference: the recorded height, 3 m per floor, the mean height
    of ``neighbors`` (``(distance_m, height_m)`` pairs) closer than 100 m, and
    finally ``fallback`` (typically the area-wide mean). Returns 0 when none
    of these exist.
    """
    if fp.height_m is not None:
        return float(fp.height_m)
    if fp.floors is not None:
        return FLOOR_HEIGHT_M * fp.floors
    near = [h for d, h in neighbors if d <= NEIGHBOR_RADIUS_M]
    if near:
        return float(np.mean(near))
    return float(fallback) if fallback is not None else 0.0


def _centroid(xy: np.ndarray) -> np.ndarray:
    return xy.mean(axis=0)


def project_footprints(footprints: Sequence[BuildingFootprint],
                       origin: GeoOrigin) -> list[ProjectedFootprint]:
    """Project footprints and fill in missing heights from floors or neighbours."""
    polys = []
    for fp in footprints:
        lat = np.array([v[0] for v in fp.vertices])
        lon = np.array([v[1] for v in fp.vertices])
        x, y = project_to_local(lat, lon, origin)
        polys.append(np.column_stack([x, y]))
    known = {}
    for i, fp in enumerate(footprints):
        if fp.height_m is not None or fp.floors is not None:
            known[i] = estimate_building_height(fp)
    fallback = float(np.mean(list(known.values()))) if known else None
    if known:
        known_idx = np.array(list(known))
        known_c = np.array([_centroid(polys[i]) for i in known_idx])
        known_h = np.array([known[i] for i in known_idx])
    out = []
    for i, fp in enumerate(footprints):
        if i in known:
            h = known[i]
        else:
            neighbors = ()
            if known:
                d = np.hypot(*(known_c - _centroid(polys[i])).T)
                neighbors = zip(d.tolist(), known_h.tolist())
            h = estimate_building_height(fp, neighbors, fallback)
        out.append(ProjectedFootprint(polys[i], h))
    return out


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting test for arrays of points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)
    return inside


def rasterize_buildings(footprints: Sequence[ProjectedFootprint], tile: Tile) -> np.ndarray:
    """1 x grid x grid height map; overlapping footprints keep the max height."""
    out = np.zeros((tile.grid, tile.grid), dtype=np.float32)
    west, south, east, north = tile.bounds
    res = tile.resolution
    xs, ys = tile.pixel_centers()
    for fp in footprints:
        bx0, by0, bx1, by1 = fp.bbox
        if bx1 < west or bx0 > east or by1 < south or by0 > north:
            continue
        c0 = max(0, math.floor((bx0 - west) / res) - 1)
        c1 = min(tile.grid, math.ceil((bx1 - west) / res) + 1)
        r0 = max(0, math.floor((north - by1) / res) - 1)
        r1 = min(tile.grid, math.ceil((north - by0) / res) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        inside = points_in_polygon(xs[r0:r1, c0:c1], ys[r0:r1, c0:c1], fp.xy)
        block = out[r0:r1, c0:c1]
        np.maximum(block, np.where(inside, np.float32(fp.height_m), np.float32(0)), out=block)
    return out[None]


# ------------------------------------------------------------ base stations

@dataclass
class BsaRecord:
    site_id: str
    lat: float
    lon: float
    height_m: float
    azimuth_deg: float
    band_mhz: int
    beamwidth_deg: float | None = None
    coverage_m: float | None = None

    def __post_init__(self):
        if self.height_m <= 0:
            raise ValueError(f"antenna at site {self.site_id} has non-positive height")
        if self.band_mhz not in BANDS_MHZ:
            raise ValueError(f"unknown band {self.band_mhz} MHz")
        self.azimuth_deg = float(self.azimuth_deg) % 360.0


def rasterize_bsa_heights(records: Sequence[BsaRecord], tile: Tile) -> np.ndarray:
    """Mark each site's pixel with the mean height of the antennas installed there."""
    out = np.zeros((tile.grid, tile.grid), dtype=np.float32)
    sites: dict[str, list[BsaRecord]] = defaultdict(list)
    for r in records:
        sites[r.site_id].append(r)
    for ants in sites.values():
        lat = float(np.mean([a.lat for a in ants]))
        lon = float(np.mean([a.lon for a in ants]))
        pix = tile.pixel_of(*project_to_local(lat, lon, tile.origin))
        if pix is None:
            continue
        h = np.float32(np.mean([a.height_m for a in ants]))
        out[pix] = max(out[pix], h)
    return out[None]


def antenna_gain(delta_azimuth_deg, beamwidth_deg: float | None = None):
    """Normalized horizontal cos^8 gain; zero behind the antenna.

    With ``beamwidth_deg`` the angle is rescaled so the half-power beamwidth
    matches it instead of the native ~47 deg of cos^8.
    """
    d = (np.asarray(delta_azimuth_deg, dtype=np.float64) + 180.0) % 360.0 - 180.0
    if beamwidth_deg is not None:
        d = d * (COS8_HPBW_DEG / beamwidth_deg)
    # cos^8 written as ((1 + cos 2t) / 2)^4 so that 45 deg gives 2**-4 exactly
    half = (1.0 + np.cos(np.radians(2.0 * d))) / 2.0
    g = np.where(np.abs(d) < 90.0, half ** 4, 0.0)
    return float(g) if g.ndim == 0 else g


def bearing_deg(dx, dy):
    """Compass bearing (clockwise from north) of the displacement (dx, dy)."""
    return np.degrees(np.arctan2(dx, dy))


def rasterize_radiation(records: Sequence[BsaRecord], band_mhz: int, tile: Tile) -> np.ndarray:
    """Superposed normalized gains of every in-band antenna covering each pixel."""
    acc = np.zeros((tile.grid, tile.grid), dtype=np.float64)
    xs, ys = tile.pixel_centers()
    west, south, east, north = tile.bounds
    for r in records:
        if r.band_mhz != band_mhz:
            continue
        ax, ay = project_to_local(r.lat, r.lon, tile.origin)
        cov = r.coverage_m if r.coverage_m is not None else DEFAULT_COVERAGE_M
        if ax < west - cov or ax > east + cov or ay < south - cov or ay > north + cov:
            continue
        dx = xs - ax
        dy = ys - ay
        gain = antenna_gain(bearing_deg(dx, dy) - r.azimuth_deg, r.beamwidth_deg)
        acc += np.where(np.hypot(dx, dy) <= cov, gain, 0.0)
    return acc.astype(np.float32)[None]


# -------------------------------------------------------------------- rasters

@dataclass
class GeoRaster:
    """RGB raster; ``origin_lat/lon`` is the top-left corner of the top-left pixel."""

    pixels: np.ndarray  # (H, W, 3) uint8
    origin_lat: float
    origin_lon: float
    meters_per_pixel: float

    def __post_init__(self):
        if self.meters_per_pixel <= 0:
            raise ValueError("meters_per_pixel must be positive")
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("raster pixels must be H x W x 3")


def resample_raster(src: GeoRaster | None, tile: Tile, fill: int) -> np.ndarray:
    """Nearest-neighbour sample at each pixel centre; ``fill`` outside the source."""
    if src is None:
        return np.full((3, tile.grid, tile.grid), float(fill), dtype=np.float32)
    x0, y0 = project_to_local(src.origin_lat, src.origin_lon, tile.origin)
    xs, ys = tile.pixel_centers()
    col = np.floor((xs - x0) / src.meters_per_pixel).astype(np.int64)
    row = np.floor((y0 - ys) / src.meters_per_pixel).astype(np.int64)
    h, w, _ = src.pixels.shape
    ok = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    out = np.full((tile.grid, tile.grid, 3), fill, dtype=np.uint8)
    out[ok] = src.pixels[row[ok], col[ok]]
    return out.transpose(2, 0, 1).astype(np.float32)


def compose_input_tensor(ir, landcover, building, bsa, radiation: Sequence[np.ndarray]) -> np.ndarray:
    """Stack the channel groups in the fixed order IR, land cover, building, BSA, 700..3500."""
    if len(radiation) != len(BANDS_MHZ):
        raise ValueError(f"expected {len(BANDS_MHZ)} radiation maps, got {len(radiation)}")
    parts = [np.asarray(ir, np.float32).reshape(3, *np.shape(ir)[-2:]),
             np.asarray(landcover, np.float32).reshape(3, *np.shape(landcover)[-2:]),
             np.asarray(building, np.float32).reshape(1, *np.shape(building)[-2:]),
             np.asarray(bsa, np.float32).reshape(1, *np.shape(bsa)[-2:])]
    parts += [np.asarray(r, np.float32).reshape(1, *np.shape(r)[-2:]) for r in radiation]
    return np.concatenate(parts, axis=0)


@dataclass
class GeoSources:
    """Everything needed to render input tensors for arbitrary tiles."""

    origin: GeoOrigin
    footprints: list[ProjectedFootprint] = field(default_factory=list)
    bsa: list[BsaRecord] = field(default_factory=list)
    ir: GeoRaster | None = None
    landcover: GeoRaster | None = None

    @classmethod
    def from_records(cls, origin, footprints=(), bsa=(), ir=None, landcover=None):
        return cls(origin, project_footprints(list(footprints), origin), list(bsa), ir, landcover)

    def tile(self, lat: float, lon: float) -> Tile:
        return Tile(lat, lon, self.origin)

    def render(self, tile: Tile) -> np.ndarray:
        return compose_input_tensor(
            resample_raster(self.ir, tile, fill=0),
            resample_raster(self.landcover, tile, fill=255),
            rasterize_buildings(self.footprints, tile),
            rasterize_bsa_heights(self.bsa, tile),
            [rasterize_radiation(self.bsa, b, tile) for b in BANDS_MHZ],
        )


def nonzero_bsa_heights(tensor: np.ndarray) -> np.ndarray:
    """Non-zero values of the BSA height channel, sorted descending."""
    ch = tensor[CHANNELS.index("bsa_height")]
    return np.sort(ch[ch != 0])[::-1].astype(np.float32)


# ---------------------------------------------------------------------- file IO

def _opt_float(s: str):
    s = s.strip()
    return float(s) if s else None


def read_buildings_csv(path) -> list[BuildingFootprint]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                verts = []
                for pair in row["polygon"].split(";"):
                    lon, lat = pair.split()
                    verts.append((float(lat), float(lon)))
                floors = row.get("floors", "").strip()
                out.append(BuildingFootprint(row["id"], verts, _opt_float(row.get("height_m", "")),
                                             int(floors) if floors else None))
            except (KeyError, ValueError) as e:
                raise GeoDataError(f"{path}: bad building row {row}: {e}") from e
    return out


def write_buildings_csv(path, footprints: Iterable[BuildingFootprint]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "polygon", "height_m", "floors"])
        for fp in footprints:
            poly = ";".join(f"{lon!r} {lat!r}" for lat, lon in fp.vertices)
            w.writerow([fp.id, poly, "" if fp.height_m is None else repr(fp.height_m),
                        "" if fp.floors is None else fp.floors])


BSA_FIELDS = ["site_id", "lat", "lon", "height_m", "azimuth_deg", "band_mhz",
              "beamwidth_deg", "coverage_m"]


def read_bsa_csv(path) -> list[BsaRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out.append(BsaRecord(
                    row["site_id"], float(row["lat"]), float(row["lon"]), float(row["height_m"]),
                    float(row["azimuth_deg"]), int(float(row["band_mhz"])),
                    _opt_float(row.get("beamwidth_deg") or ""),
                    _opt_float(row.get("coverage_m") or "")))
            except (KeyError, ValueError) as e:
                raise GeoDataError(f"{path}: bad BSA row {row}: {e}") from e
    return out


def write_bsa_csv(path, records: Iterable[BsaRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BSA_FIELDS)
        for r in records:
            w.writerow([r.site_id, repr(r.lat), repr(r.lon), repr(r.height_m), repr(r.azimuth_deg),
                        r.band_mhz, "" if r.beamwidth_deg is None else repr(r.beamwidth_deg),
                        "" if r.coverage_m is None else repr(r.coverage_m)])


def _world_path(path) -> Path:
    return Path(path).with_suffix(".wld")


def write_raster(path, raster: GeoRaster):
    """Binary PPM (P6) plus a ``.wld`` sidecar: origin_lat, origin_lon, meters_per_pixel."""
    h, w, _ = raster.pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster.pixels).tobytes())
    _world_path(path).write_text(
        f"{raster.origin_lat!r}\n{raster.origin_lon!r}\n{raster.meters_per_pixel!r}\n")


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise GeoDataError("truncated PPM header")
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_raster(path) -> GeoRaster:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _ppm_tokens(data, 4)
    if magic != "P6":
        raise GeoDataError(f"{path}: not a binary PPM (magic {magic!r})")
    if int(maxval) != 255:
        raise GeoDataError(f"{path}: only 8-bit PPM supported")
    w, h = int(w), int(h)
    if len(data) - off < w * h * 3:
        raise GeoDataError(f"{path}: truncated PPM body")
    px = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off)
    try:
        lat, lon, mpp = (float(v) for v in _world_path(path).read_text().split())
    except (OSError, ValueError) as e:
        raise GeoDataError(f"{path}: missing or malformed world file: {e}") from e
    return GeoRaster(px.reshape(h, w, 3).copy(), lat, lon, mpp)
