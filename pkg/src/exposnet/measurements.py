"""Drive-test processing: tri-axis combination, GPS sync, per-area statistics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from exposnet.geodata import BANDS_MHZ

log = logging.getLogger(__name__)

N_BANDS = len(BANDS_MHZ)
GPS_SLACK_S = 5.0
MIN_POINTS = 5


class MeasurementError(ValueError):
    """Malformed or inconsistent measurement data."""


@dataclass
class RawRecord:
    timestamp_s: float
    fields: np.ndarray  # (7, 3) V/m, columns x, y, z


@dataclass
class GpsFix:
    timestamp_s: float
    lat: float
    lon: float


@dataclass
class MeasurementPoint:
    timestamp_s: float
    lat: float
    lon: float
    e_band: np.ndarray  # (7,) V/m

    @property
    def e_total(self) -> float:
        return total_field(self.e_band)


def combine_triaxis(ex, ey, ez):
    """Isotropic field strength from the three orthogonal probe axes."""
    ex, ey, ez = (np.asarray(v, dtype=np.float64) for v in (ex, ey, ez))
    if np.any(ex < 0) or np.any(ey < 0) or np.any(ez < 0):
        raise MeasurementError("tri-axis components must be non-negative")
    e = np.sqrt(ex * ex + ey * ey + ez * ez)
    return float(e) if e.ndim == 0 else e


def total_field(e_band):
    """Root-sum-square over the band axis (last axis, length 7)."""
    e = np.asarray(e_band, dtype=np.float64)
    if e.shape[-1] != N_BANDS:
        raise MeasurementError(f"expected {N_BANDS} bands, got {e.shape[-1]}")
    t = np.sqrt(np.sum(e * e, axis=-1))
    return float(t) if t.ndim == 0 else t


def sync_gps(records: Sequence[RawRecord], track: Sequence[GpsFix],
             slack_s: float = GPS_SLACK_S) -> list[MeasurementPoint]:
    """Geolocate records by linear interpolation between bracketing GPS fixes.

    Records more than ``slack_s`` outside the track span are dropped; records
    inside the slack but beyond the first/last fix take that fix's position.
    """
    if not track:
        raise MeasurementError("empty GPS track")
    t = np.array([f.timestamp_s for f in track])
    if np.any(np.diff(t) <= 0):
        raise MeasurementError("GPS timestamps must be strictly increasing")
    lat = np.array([f.lat for f in track])
    lon = np.array([f.lon for f in track])
    out, dropped = [], 0
    for r in records:
        ts = r.timestamp_s
        if ts < t[0] - slack_s or ts > t[-1] + slack_s:
            dropped += 1
            continue
        e = combine_triaxis(r.fields[:, 0], r.fields[:, 1], r.fields[:, 2])
        out.append(MeasurementPoint(ts, float(np.interp(ts, t, lat)),
                                    float(np.interp(ts, t, lon)), np.asarray(e)))
    if dropped:
        log.warning("dropped %d of %d records outside the GPS span", dropped, len(records))
    return out


def rms_std(values) -> tuple[float, float]:
    """Root mean square and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean(v * v))), float(np.std(v))


def aggregate_area(e_band: np.ndarray, min_points: int = MIN_POINTS) -> np.ndarray | None:
    """16 targets from the per-point band fields of one area.

    ``e_band`` is ``(n_points, 7)``. Returns ``[rms_700, std_700, ..., rms_3500,
    std_3500, rms_total, std_total]`` or None when fewer than ``min_points``.
    """
    e = np.asarray(e_band, dtype=np.float64).reshape(-1, N_BANDS)
    if len(e) < min_points:
        return None
    out = np.empty(2 * N_BANDS + 2)
    for j in range(N_BANDS):
        out[2 * j], out[2 * j + 1] = rms_std(e[:, j])
    out[-2], out[-1] = rms_std(total_field(e))
    return out


@dataclass
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float]

    def as_dict(self):
        return {"median": self.median, "q1": self.q1, "q3": self.q3,
                "whisker_low": self.whisker_low, "whisker_high": self.whisker_high,
                "n_outliers": len(self.outliers)}


def summary_stats(series) -> BoxStats:
    """Box-plot statistics with linear-interpolation quartiles and 1.5 IQR whiskers.

    Whiskers reach the most extreme data point inside the fences.
    """
    v = np.sort(np.asarray(series, dtype=np.float64))
    if v.size == 0:
        raise MeasurementError("summary_stats of an empty series")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_f, hi_f = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_f) & (v <= hi_f)]
    outliers = v[(v < lo_f) | (v > hi_f)]
    return BoxStats(float(med), float(q1), float(q3), float(inside.min()), float(inside.max()),
                    outliers.tolist())


# ---------------------------------------------------------------------- file IO

MEASUREMENT_FIELDS = ["timestamp_s"] + [f"e{b}_{a}" for b in BANDS_MHZ for a in "xyz"]


def read_measurements_csv(path) -> list[RawRecord]:
    out = []
    last = -np.inf
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if [h.strip() for h in header] != MEASUREMENT_FIELDS:
            raise MeasurementError(f"{path}: unexpected header {header}")
        for line, row in enumerate(reader, start=2):
            try:
                vals = [float(v) for v in row]
            except ValueError as e:
                raise MeasurementError(f"{path}:{line}: {e}") from e
            if len(vals) != len(MEASUREMENT_FIELDS):
                raise MeasurementError(f"{path}:{line}: expected {len(MEASUREMENT_FIELDS)} columns")
            if vals[0] <= last:
                raise MeasurementError(f"{path}:{line}: timestamps must be strictly increasing")
            last = vals[0]
            fields = np.array(vals[1:]).reshape(N_BANDS, 3)
            if np.any(fields < 0):
                raise MeasurementError(f"{path}:{line}: negative field value")
            out.append(RawRecord(vals[0], fields))
    return out


def write_measurements_csv(path, records: Sequence[RawRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_FIELDS)
        for r in records:
            w.writerow([repr(float(r.timestamp_s))] + [repr(float(v)) for v in r.fields.reshape(-1)])


def read_gps_csv(path) -> list[GpsFix]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out.append(GpsFix(float(row["timestamp_s"]), float(row["lat"]), float(row["lon"])))
            except (KeyError, ValueError) as e:
                raise MeasurementError(f"{path}: bad GPS row {row}: {e}") from e
    return out


def write_gps_csv(path, track: Sequence[GpsFix]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_s", "lat", "lon"])
        for f in track:
            w.writerow([repr(float(f.timestamp_s)), repr(float(f.lat)), repr(float(f.lon))])
