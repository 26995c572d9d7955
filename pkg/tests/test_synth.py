import math

import numpy as np
import pytest

from exposnet.dataset import build_dataset
from exposnet.geodata import (BANDS_MHZ, BsaRecord, read_bsa_csv, read_buildings_csv,
                              read_raster, unproject)
from exposnet.measurements import combine_triaxis, read_gps_csv, read_measurements_csv
from exposnet.synth import (ScenarioConfig, generate_dataset, generate_dataset_with_origin,
                            generate_scenario, oracle_field, serpentine_route,
                            simulate_drive_test, write_scenario_files)

SMALL = dict(extent_m=1000.0, n_buildings=30, n_sites=4, bsa_count=14, route_spacing_m=250.0)


@pytest.fixture(scope="module")
def small_scenario():
    return generate_scenario(ScenarioConfig(seed=3, **SMALL))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(extent_m=500), dict(path_loss_exp=1.5),
                                    dict(noise_floor=-1), dict(power_scale=(1.0,))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ScenarioConfig(**kw)

    def test_json_round_trip(self):
        cfg = ScenarioConfig(seed=5, **SMALL)
        assert ScenarioConfig.from_json(cfg.to_json()) == cfg


class TestRoute:
    def test_serpentine(self):
        r = serpentine_route(1000, 250)
        np.testing.assert_array_equal(r[:4], [[0, 125], [1000, 125], [1000, 375], [0, 375]])
        assert len(r) == 8


class TestOracle:
    def test_single_antenna_hand_value(self, small_scenario):
        sc = generate_scenario(ScenarioConfig(seed=3, **SMALL))
        cfg = sc.config
        lat, lon = unproject(500.0, 500.0, cfg.origin)
        sc.bsa = [BsaRecord("s", lat, lon, 30.0, 90.0, 1800)]
        rx_lat, rx_lon = unproject(600.0, 500.0, cfg.origin)
        d = math.sqrt(100 ** 2 + 28.5 ** 2)
        p = cfg.power_scale[BANDS_MHZ.index(1800)]
        want = math.sqrt(p / d ** cfg.path_loss_exp + cfg.noise_floor ** 2)
        assert oracle_field(rx_lat, rx_lon, sc, 1800) == pytest.approx(want, rel=1e-9)
        # behind the antenna only the noise floor remains
        back_lat, back_lon = unproject(400.0, 500.0, cfg.origin)
        assert oracle_field(back_lat, back_lon, sc, 1800) == pytest.approx(cfg.noise_floor)
        # no antenna in another band
        assert oracle_field(rx_lat, rx_lon, sc, 700) == pytest.approx(cfg.noise_floor)

    def test_decays_with_distance(self, small_scenario):
        sc = small_scenario
        ant = sc.bsa[0]
        cfg = sc.config
        from exposnet.geodata import project_to_local
        ax, ay = project_to_local(ant.lat, ant.lon, cfg.origin)
        az = math.radians(ant.azimuth_deg)
        ranges = [50, 100, 200, 400]
        pts = [unproject(ax + r * math.sin(az), ay + r * math.cos(az), cfg.origin) for r in ranges]
        e = [oracle_field(la, lo, sc, ant.band_mhz) for la, lo in pts]
        assert all(a > b for a, b in zip(e, e[1:]))


class TestScenario:
    def test_deterministic(self):
        a = generate_scenario(ScenarioConfig(seed=1, **SMALL))
        b = generate_scenario(ScenarioConfig(seed=1, **SMALL))
        c = generate_scenario(ScenarioConfig(seed=2, **SMALL))
        assert a.buildings == b.buildings and a.bsa == b.bsa
        assert a.ir.pixels.tobytes() == b.ir.pixels.tobytes()
        assert a.bsa != c.bsa

    def test_height_mix(self):
        sc = generate_scenario(ScenarioConfig(seed=0))
        kinds = {"height": 0, "floors": 0, "unknown": 0}
        for b in sc.buildings:
            kinds["height" if b.height_m is not None else
                  "floors" if b.floors is not None else "unknown"] += 1
        assert all(v > 0 for v in kinds.values())

    def test_every_band_served(self):
        sc = generate_scenario(ScenarioConfig(seed=0))
        assert {r.band_mhz for r in sc.bsa} == set(BANDS_MHZ)

    def test_drive_test_matches_oracle(self, small_scenario):
        records, track = simulate_drive_test(small_scenario)
        assert len(track) >= 2 and len(records) > 100
        assert all(b.timestamp_s > a.timestamp_s for a, b in zip(records, records[1:]))
        # recombined tri-axis fields equal the oracle at the true position
        cfg = small_scenario.config
        r = records[37]
        s = r.timestamp_s * cfg.speed_mps
        route = small_scenario.route_xy
        seg = np.hypot(*np.diff(route, axis=0).T)
        along = np.concatenate([[0], np.cumsum(seg)])
        x, y = np.interp(s, along, route[:, 0]), np.interp(s, along, route[:, 1])
        lat, lon = unproject(x, y, cfg.origin)
        for j, band in enumerate(BANDS_MHZ):
            e = combine_triaxis(*r.fields[j])
            assert e == pytest.approx(oracle_field(lat, lon, small_scenario, band), rel=1e-9)


class TestDataset:
    def test_files_reproduce_in_memory_dataset(self, tmp_path, small_scenario):
        paths = write_scenario_files(small_scenario, tmp_path)
        samples, origin = build_dataset(
            read_buildings_csv(paths["buildings"]), read_bsa_csv(paths["bsa"]),
            read_raster(paths["ir"]), read_raster(paths["landcover"]),
            read_measurements_csv(paths["measurements"]), read_gps_csv(paths["gps"]))
        ref, ref_origin = generate_dataset_with_origin(small_scenario.config)
        assert origin == ref_origin
        assert len(samples) == len(ref) > 10
        for a, b in zip(samples, ref):
            assert a.inputs.tobytes() == b.inputs.tobytes()
            np.testing.assert_allclose(a.targets, b.targets, rtol=1e-6)

    def test_targets_positive_and_consistent(self):
        samples = generate_dataset(ScenarioConfig(seed=3, **SMALL))
        for s in samples:
            assert np.all(s.targets > 0) or np.all(s.targets[::2] > 0)
            # total RMS^2 equals the sum of band RMS^2 for the same point set
            assert s.targets[14] ** 2 == pytest.approx(np.sum(s.targets[:14:2] ** 2), rel=1e-5)
