"""Seeded synthetic city with a log-distance field oracle.

Stands in for a real drive-test campaign: it produces buildings, antennas,
rasters and a serpentine route, then samples per-band fields along the route
and feeds them through the ordinary ingestion pipeline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from exposnet.dataset import AreaSample, build_dataset
from exposnet.geodata import (BANDS_MHZ, BsaRecord, BuildingFootprint, GeoOrigin, GeoRaster,
                              antenna_gain, bearing_deg, points_in_polygon, project_to_local,
                              unproject, write_bsa_csv, write_buildings_csv, write_raster)
from exposnet.measurements import (GpsFix, RawRecord, write_gps_csv, write_measurements_csv)

LANDCOVER_COLORS = {
    "built": (230, 0, 77),
    "vegetation": (77, 200, 0),
    "road": (200, 200, 200),
    "water": (0, 128, 255),
}


@dataclass
class ScenarioConfig:
    seed: int = 0
    extent_m: float = 1200.0
    origin_lat: float = 48.85
    origin_lon: float = 2.35
    n_buildings: int = 250
    building_size_m: tuple[float, float] = (10.0, 40.0)
    building_height_m: tuple[float, float] = (6.0, 45.0)
    frac_floors_only: float = 0.2
    frac_unknown_height: float = 0.1
    n_sites: int = 10
    bsa_count: int = 42
    bsa_height_m: tuple[float, float] = (20.0, 45.0)
    power_scale: tuple[float, ...] = (4e3, 4e3, 6e3, 8e3, 8e3, 1e4, 1.2e4)
    path_loss_exp: float = 2.2
    noise_floor: float = 0.02
    rx_height_m: float = 1.5
    route_spacing_m: float = 120.0
    speed_mps: float = 10.0
    record_interval_s: float = 0.25
    gps_interval_s: float = 1.0
    raster_margin_m: float = 300.0
    raster_mpp: float = 3.125

    def __post_init__(self):
        if self.extent_m < 1000:
            raise ValueError("extent_m must be >= 1000")
        if not 2.0 <= self.path_loss_exp <= 4.0:
            raise ValueError("path_loss_exp must lie in [2, 4]")
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be >= 0")
        if len(self.power_scale) != len(BANDS_MHZ):
            raise ValueError("power_scale needs one entry per band")
        if self.bsa_count > 0 and self.n_sites < 1:
            raise ValueError("antennas need at least one site")

    @property
    def origin(self) -> GeoOrigin:
        return GeoOrigin(self.origin_lat, self.origin_lon)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class Scenario:
    config: ScenarioConfig
    buildings: list[BuildingFootprint]
    bsa: list[BsaRecord]
    ir: GeoRaster
    landcover: GeoRaster
    route_xy: np.ndarray  # polyline vertices, local metres from config.origin
    building_xy: list[np.ndarray] = field(default_factory=list)


def serpentine_route(extent: float, spacing: float) -> np.ndarray:
    """Boustrophedon polyline covering the square [0, extent]^2."""
    rows = np.arange(spacing / 2, extent, spacing)
    pts = []
    for i, y in enumerate(rows):
        xs = (0.0, extent) if i % 2 == 0 else (extent, 0.0)
        pts += [(xs[0], y), (xs[1], y)]
    return np.array(pts, dtype=np.float64)


def _paint_rasters(cfg: ScenarioConfig, rng, building_xy, heights, route):
    margin, mpp = cfg.raster_margin_m, cfg.raster_mpp
    n = int(math.ceil((cfg.extent_m + 2 * margin) / mpp))
    west, north = -margin, cfg.extent_m + margin
    offs = (np.arange(n) + 0.5) * mpp
    px = np.broadcast_to((west + offs)[None, :], (n, n))
    py = np.broadcast_to((north - offs)[:, None], (n, n))
    lc = np.empty((n, n, 3), dtype=np.uint8)
    lc[:] = LANDCOVER_COLORS["vegetation"]
    # one pond away from the route rows
    cx, cy = rng.uniform(0.2, 0.8, 2) * cfg.extent_m
    lc[np.hypot(px - cx, py - cy) < 40] = LANDCOVER_COLORS["water"]
    ir = np.empty((n, n, 3), dtype=np.float64)
    ir[:] = (190, 70, 80)
    ir += rng.normal(0, 12, ir.shape)
    for a, b in zip(route[:-1], route[1:]):
        lo, hi = np.minimum(a, b) - 4, np.maximum(a, b) + 4
        road = (px >= lo[0]) & (px <= hi[0]) & (py >= lo[1]) & (py <= hi[1])
        lc[road] = LANDCOVER_COLORS["road"]
        ir[road] = (90, 90, 95)
    for xy, h in zip(building_xy, heights):
        c0 = max(0, int((xy[:, 0].min() - west) / mpp))
        c1 = min(n, int((xy[:, 0].max() - west) / mpp) + 2)
        r0 = max(0, int((north - xy[:, 1].max()) / mpp))
        r1 = min(n, int((north - xy[:, 1].min()) / mpp) + 2)
        inside = points_in_polygon(px[r0:r1, c0:c1], py[r0:r1, c0:c1], xy)
        lc[r0:r1, c0:c1][inside] = LANDCOVER_COLORS["built"]
        shade = 110 + min(h, 60) * 2
        ir[r0:r1, c0:c1][inside] = (shade, shade, shade + 10)
    top_lat, left_lon = unproject(west, north, cfg.origin)
    return (GeoRaster(np.clip(ir, 0, 255).astype(np.uint8), top_lat, left_lon, mpp),
            GeoRaster(lc, top_lat, left_lon, mpp))


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    rng = np.random.default_rng(cfg.seed)
    origin = cfg.origin
    route = serpentine_route(cfg.extent_m, cfg.route_spacing_m)

    buildings, building_xy, heights = [], [], []
    for i in range(cfg.n_buildings):
        w, d = rng.uniform(*cfg.building_size_m, 2)
        cx, cy = rng.uniform(0, cfg.extent_m, 2)
        h = float(rng.uniform(*cfg.building_height_m))
        xy = np.array([[cx - w / 2, cy - d / 2], [cx + w / 2, cy - d / 2],
                       [cx + w / 2, cy + d / 2], [cx - w / 2, cy + d / 2]])
        lat, lon = unproject(xy[:, 0], xy[:, 1], origin)
        kind = rng.random()
        if kind < cfg.frac_unknown_height:
            height, floors = None, None
        elif kind < cfg.frac_unknown_height + cfg.frac_floors_only:
            floors = max(1, int(round(h / 3.0)))
            height, h = None, 3.0 * floors
        else:
            height, floors = round(h, 1), None
            h = height
        buildings.append(BuildingFootprint(f"b{i}", list(zip(lat.tolist(), lon.tolist())),
                                           height, floors))
        building_xy.append(xy)
        heights.append(h)

    site_xy = rng.uniform(0, cfg.extent_m, (cfg.n_sites, 2))
    site_h = rng.uniform(*cfg.bsa_height_m, cfg.n_sites)
    bsa = []
    for i in range(cfg.bsa_count):
        s = i % cfg.n_sites
        band = BANDS_MHZ[(i // cfg.n_sites + s) % len(BANDS_MHZ)]
        lat, lon = unproject(site_xy[s, 0], site_xy[s, 1], origin)
        bsa.append(BsaRecord(f"site{s}", lat, lon, round(float(site_h[s] + rng.uniform(-2, 2)), 2),
                             round(float(rng.uniform(0, 360)), 1), band))

    ir, lc = _paint_rasters(cfg, rng, building_xy, heights, route)
    return Scenario(cfg, buildings, bsa, ir, lc, route, building_xy)


def oracle_field(lat, lon, scenario: Scenario, band_mhz: int):
    """Per-band field strength (V/m) at ground points.

    ``sqrt(sum P_f cos^8(dtheta) / max(d, 1)^alpha + noise^2)`` summed over
    the band's antennas, with ``d`` the slant range from antenna to receiver.
    """
    cfg = scenario.config
    x, y = project_to_local(np.asarray(lat, np.float64), np.asarray(lon, np.float64), cfg.origin)
    x, y = np.asarray(x), np.asarray(y)
    p_f = cfg.power_scale[BANDS_MHZ.index(band_mhz)]
    acc = np.zeros(x.shape, dtype=np.float64)
    for r in scenario.bsa:
        if r.band_mhz != band_mhz:
            continue
        ax, ay = project_to_local(r.lat, r.lon, cfg.origin)
        dx, dy = x - ax, y - ay
        d = np.sqrt(dx * dx + dy * dy + (r.height_m - cfg.rx_height_m) ** 2)
        g = antenna_gain(bearing_deg(dx, dy) - r.azimuth_deg, r.beamwidth_deg)
        acc += p_f * g / np.maximum(d, 1.0) ** cfg.path_loss_exp
    e = np.sqrt(acc + cfg.noise_floor ** 2)
    return float(e) if e.ndim == 0 else e


def _position_at(route: np.ndarray, s: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(route, axis=0).T)
    along = np.concatenate([[0.0], np.cumsum(seg)])
    return np.column_stack([np.interp(s, along, route[:, 0]), np.interp(s, along, route[:, 1])])


def simulate_drive_test(scenario: Scenario) -> tuple[list[RawRecord], list[GpsFix]]:
    """Probe records along the route and an independent 1 Hz GPS track."""
    cfg = scenario.config
    rng = np.random.default_rng(cfg.seed + 7919)
    length = float(np.hypot(*np.diff(scenario.route_xy, axis=0).T).sum())
    duration = length / cfg.speed_mps
    t_gps = np.arange(0.0, duration + cfg.gps_interval_s, cfg.gps_interval_s)
    gps_xy = _position_at(scenario.route_xy, np.minimum(t_gps, duration) * cfg.speed_mps)
    glat, glon = unproject(gps_xy[:, 0], gps_xy[:, 1], cfg.origin)
    track = [GpsFix(float(t), float(a), float(o)) for t, a, o in zip(t_gps, glat, glon)]

    t_rec = np.arange(0.1, duration, cfg.record_interval_s)
    xy = _position_at(scenario.route_xy, t_rec * cfg.speed_mps)
    lat, lon = unproject(xy[:, 0], xy[:, 1], cfg.origin)
    e = np.column_stack([oracle_field(lat, lon, scenario, b) for b in BANDS_MHZ])
    # split every band field over three axes with random direction cosines
    u = np.abs(rng.normal(size=(len(t_rec), len(BANDS_MHZ), 3)))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    fields = e[..., None] * u
    records = [RawRecord(float(t), f) for t, f in zip(t_rec, fields)]
    return records, track


def generate_dataset(cfg: ScenarioConfig) -> list[AreaSample]:
    """Scenario -> drive test -> the ordinary ingestion pipeline."""
    samples, _ = generate_dataset_with_origin(cfg)
    return samples


def generate_dataset_with_origin(cfg: ScenarioConfig):
    scenario = generate_scenario(cfg)
    records, track = simulate_drive_test(scenario)
    return build_dataset(scenario.buildings, scenario.bsa, scenario.ir, scenario.landcover,
                         records, track)


def write_scenario_files(scenario: Scenario, out_dir) -> dict[str, Path]:
    """Emit the CSV/PPM inputs that ``build-dataset`` ingests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, track = simulate_drive_test(scenario)
    paths = {"buildings": out / "buildings.csv", "bsa": out / "bsa.csv", "ir": out / "ir.ppm",
             "landcover": out / "landcover.ppm", "measurements": out / "measurements.csv",
             "gps": out / "gps.csv"}
    write_buildings_csv(paths["buildings"], scenario.buildings)
    write_bsa_csv(paths["bsa"], scenario.bsa)
    write_raster(paths["ir"], scenario.ir)
    write_raster(paths["landcover"], scenario.landcover)
    write_measurements_csv(paths["measurements"], records)
    write_gps_csv(paths["gps"], track)
    return paths
