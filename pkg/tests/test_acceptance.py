"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end learning runs (criterion 7) use a quarter-width network; see
the README for why and for the measured timings.
"""

import hashlib
import json
import time

import numpy as np
import pytest

import oracles
from test_numerics import layer_grad_error, spaced_input
from exposnet.cli import main
from exposnet.dataset import apply_norm, fit_norm, split_train_test
from exposnet.geodata import (BANDS_MHZ, antenna_gain, rasterize_bsa_heights, rasterize_buildings,
                              rasterize_radiation)
from exposnet.measurements import aggregate_area, total_field
from exposnet.model import ExposNet, ModelConfig
from exposnet.numerics import BatchNorm2d, Conv2d, Dropout, Linear, grad_check
from exposnet.numerics.layers import BilinearResize, GlobalAvgPool, MaxPool2, ReLU, Sigmoid
from exposnet.synth import ScenarioConfig, generate_dataset
from exposnet.training import (TrainConfig, evaluate, loss_per_frequency, loss_per_frequency_grad,
                               loss_total, loss_total_grad, train)

E2E_SEED = 2
E2E_WIDTH_DIVISOR = 4
E2E_INIT = "fan_in_uniform"
F32_TINY = float(np.finfo(np.float32).tiny)


# ----------------------------------------------------------- criterion 1

def test_c01_rasterizer_oracle(criterion):
    with criterion(1, "rasterizer oracle equivalence (50 scenes, < 30 s)") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst_rel = 0.0
        for _ in range(50):
            tile, fps, recs = oracles.random_scene(rng, grid=128)
            got = rasterize_buildings(fps, tile)[0]
            assert got.tobytes() == oracles.building_raster_vec(fps, tile).tobytes()
            np.testing.assert_array_equal(rasterize_bsa_heights(recs, tile)[0],
                                          oracles.bsa_raster(recs, tile))
            for band in BANDS_MHZ:
                got = rasterize_radiation(recs, band, tile)[0].astype(np.float64)
                want = oracles.radiation_raster_vec(recs, band, tile)
                nz = want > 0
                assert np.array_equal(got > 0, nz)
                # relative error over the float32 normal range; subnormal gains (~1e-40)
                # cannot carry 1e-6 relative precision in an f32 map
                if nz.any():
                    rel = np.abs(got[nz] - want[nz]) / np.maximum(want[nz], F32_TINY)
                    worst_rel = max(worst_rel, float(rel.max()))
        elapsed = time.perf_counter() - t0
        c["detail"] = f"max radiation rel err {worst_rel:.2e}, {elapsed:.1f} s"
        assert worst_rel <= 1e-6
        assert elapsed < 30


# ----------------------------------------------------------- criterion 2

def test_c02_gain_model(criterion):
    with criterion(2, "cos^8 gain anchors and monotonicity"):
        assert antenna_gain(0) == 1
        assert antenna_gain(90) == 0
        assert antenna_gain(45) == 0.0625
        g = antenna_gain(np.arange(0, 91, 1.0))
        assert np.all(np.diff(g) <= 0)


# ----------------------------------------------------------- criterion 3

def test_c03_formula_fidelity(criterion):
    with criterion(3, "total field, area RMS/STD and L1 hand case"):
        assert total_field([3, 4, 0, 0, 0, 0, 0]) == 5
        agg = aggregate_area(np.column_stack([[3.0, 4.0], np.zeros((2, 6))]), min_points=2)
        assert abs(agg[0] - 3.535534) <= 1e-6
        assert abs(agg[1] - 0.5) <= 1e-6
        # D = 1 and C = 7: every entry off by one, rebuilt totals sqrt(7) vs 0
        assert abs(loss_per_frequency(np.ones((1, 7, 2)), np.zeros((1, 7, 2)), 0.1) - 1.7) <= 1e-6


# ----------------------------------------------------------- criterion 4

def test_c04_gradient_suite(criterion):
    with criterion(4, "finite-difference gradient suite (< 1e-3, < 2 min)") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        errors = {}
        errors["conv"] = layer_grad_error(lambda: Conv2d(3, 4, np.random.default_rng(0)),
                                          rng.normal(size=(2, 3, 6, 5)))

        def bn():
            m = BatchNorm2d(3)
            m.gamma.data[:] = [1.3, 0.6, 0.9]
            return m
        errors["batchnorm"] = layer_grad_error(bn, rng.normal(size=(3, 3, 4, 4)), train=True)
        errors["maxpool"] = layer_grad_error(MaxPool2, spaced_input((2, 2, 4, 6), 1))
        errors["bilinear"] = layer_grad_error(lambda: BilinearResize(7, 5),
                                              rng.normal(size=(2, 2, 4, 3)))
        errors["global_avg_pool"] = layer_grad_error(GlobalAvgPool, rng.normal(size=(2, 3, 4, 4)))
        errors["linear"] = layer_grad_error(lambda: Linear(6, 4, np.random.default_rng(1)),
                                            rng.normal(size=(3, 6)))
        errors["relu"] = layer_grad_error(ReLU, spaced_input((3, 8), 2))
        errors["sigmoid"] = layer_grad_error(Sigmoid, rng.normal(size=(3, 8)) * 2)

        x = rng.normal(size=(4, 10))
        d32, d64 = Dropout(0.3), Dropout(0.3)
        d32.rng = np.random.default_rng(5)
        proj = rng.normal(size=x.shape)
        d32.forward(x.astype(np.float32), train=True)
        dx = d32.backward(proj.astype(np.float32))

        def f_drop(z):
            d64.rng = np.random.default_rng(5)
            return float(np.sum(d64.forward(z, train=True) * proj))
        errors["dropout"] = grad_check(f_drop, lambda z: dx, x, n_probes=10, rng=rng)

        p, t = rng.random((3, 7, 2)), rng.random((3, 7, 2))
        errors["loss_per_frequency"] = grad_check(
            lambda q: loss_per_frequency(q, t), lambda q: loss_per_frequency_grad(q, t), p,
            n_probes=10, rng=rng)
        p2, t2 = rng.random((4, 2)), rng.random((4, 2))
        errors["loss_total"] = grad_check(lambda q: loss_total(q, t2),
                                          lambda q: loss_total_grad(q, t2), p2,
                                          n_probes=10, rng=rng)
        elapsed = time.perf_counter() - t0
        worst = max(errors, key=errors.get)
        c["detail"] = f"worst {worst} {errors[worst]:.1e}, {elapsed:.1f} s"
        assert all(e < 1e-3 for e in errors.values()), errors
        assert elapsed < 120


# ----------------------------------------------------------- criterion 5

@pytest.fixture(scope="module")
def full_models():
    return {opt: ExposNet(ModelConfig(option=opt)) for opt in ("per_frequency", "total")}


def test_c05_shape_contract(criterion, full_models):
    with criterion(5, "full-width output shapes and H/32 fusion map") as c:
        x = np.random.default_rng(0).random((1, 15, 128, 128)).astype(np.float32)
        h = [np.array([0.9, 0.4])]
        assert full_models["per_frequency"].forward(x, h).shape == (1, 7, 2)
        assert full_models["total"].forward(x, h).shape == (1, 2)
        fused, _ = full_models["total"].fuse(x, h)
        assert fused.shape == (1, 1024, 4, 4)
        c["detail"] = f"{full_models['per_frequency'].num_parameters():,} parameters per-frequency"


# ----------------------------------------------------------- criterion 6

def test_c06_empty_bsa(criterion, full_models):
    with criterion(6, "empty BSA list gives the zero vector"):
        for net in full_models.values():
            out = net.base_station.forward([np.zeros(0, np.float32)])
            assert out.shape == (1, net.cfg.n_bs_out)
            assert not out.any()


# ----------------------------------------------------------- criterion 7

@pytest.fixture(scope="module")
def e2e_dataset():
    t0 = time.perf_counter()
    samples = generate_dataset(ScenarioConfig(seed=E2E_SEED))
    n_test = len(samples) // 5
    train_raw, test_raw = split_train_test(samples, n_test)
    stats = fit_norm(train_raw)
    return {"samples": samples, "n_test": n_test, "stats": stats,
            "train": [apply_norm(s, stats) for s in train_raw],
            "test": [apply_norm(s, stats) for s in test_raw],
            "seconds": time.perf_counter() - t0}


def run_e2e(data, option):
    t0 = time.perf_counter()
    cfg = ModelConfig(option=option, init=E2E_INIT).slim(E2E_WIDTH_DIVISOR)
    net = ExposNet(cfg)
    result = train(net, data["train"], TrainConfig(epochs=10, batch_size=8, lr=1e-4))
    report = evaluate(net, data["test"], option)
    mean = np.mean([s.targets[-2] for s in data["train"]])
    truth = np.array([s.targets[-2] for s in data["test"]])
    return {"history": result.history, "report": report,
            "rmse": report.rmse["total"]["rms"],
            "baseline": float(np.sqrt(np.mean((truth - mean) ** 2))),
            "seconds": data["seconds"] + time.perf_counter() - t0}


@pytest.fixture(scope="module")
def e2e_total(e2e_dataset):
    return run_e2e(e2e_dataset, "total")


@pytest.fixture(scope="module")
def e2e_per_frequency(e2e_dataset):
    return run_e2e(e2e_dataset, "per_frequency")


def check_e2e(c, run, limit_s):
    ratio = run["history"][-1] / run["history"][0]
    c["detail"] = (f"loss ratio {ratio:.3f}, test RMSE {run['rmse']:.4f} vs mean baseline "
                   f"{run['baseline']:.4f}, {run['seconds']:.0f} s")
    assert ratio < 0.5
    assert run["rmse"] < run["baseline"]
    assert run["seconds"] < limit_s


def test_c07_end_to_end_total(criterion, e2e_dataset, e2e_total):
    with criterion(7, "synthetic learning, total option (< 10 min)") as c:
        assert len(e2e_dataset["samples"]) >= 200
        check_e2e(c, e2e_total, 600)


def test_c07_end_to_end_per_frequency(criterion, e2e_per_frequency):
    with criterion(7, "synthetic learning, per-frequency option (< 20 min)") as c:
        check_e2e(c, e2e_per_frequency, 1200)


# ----------------------------------------------------------- criterion 8

SMALL = {"extent_m": 1000.0, "n_buildings": 30, "n_sites": 4, "bsa_count": 14,
         "route_spacing_m": 250.0, "seed": 11}


def pipeline(workdir):
    (workdir / "scenario.json").write_text(json.dumps(SMALL))
    wd = ["--workdir", str(workdir)]
    assert main([*wd, "synth-gen", "--config", "scenario.json", "--out", "scn"]) == 0
    assert main([*wd, "build-dataset", "--buildings", "scn/buildings.csv", "--bsa", "scn/bsa.csv",
                 "--ir", "scn/ir.ppm", "--landcover", "scn/landcover.ppm",
                 "--measurements", "scn/measurements.csv", "--gps", "scn/gps.csv",
                 "--out", "data"]) == 0
    assert main([*wd, "train", "--data", "data", "--option", "per_frequency", "--out", "model",
                 "--epochs", "2", "--width-divisor", "16"]) == 0
    assert main([*wd, "eval", "--model", "model", "--data", "data", "--out", "report"]) == 0
    files = {}
    for pattern in ("data/**/*.expn", "data/*.json", "model/loss_history.csv",
                    "model/model.expm", "report/report.json", "report/maps/*"):
        for p in sorted(workdir.glob(pattern)):
            if p.name != "run_manifest.json":
                files[p.relative_to(workdir).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return files


def test_c08_determinism(criterion, tmp_path):
    with criterion(8, "identical seeds give byte-identical pipeline outputs") as c:
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
        c["detail"] = f"{len(a)} files compared"
        assert len(a) > 10 and "model/loss_history.csv" in a and "report/report.json" in a
        assert a == b


# ----------------------------------------------------------- criterion 9

def test_c09_normalization_and_split(criterion, e2e_dataset):
    with criterion(9, "train inputs in [0, 1], last n_test samples held out") as c:
        samples, n_test = e2e_dataset["samples"], e2e_dataset["n_test"]
        for s in e2e_dataset["train"]:
            assert s.inputs.min() >= 0 and s.inputs.max() <= 1
        train_raw, test_raw = split_train_test(samples, n_test)
        assert len(test_raw) == n_test and len(train_raw) + n_test == len(samples)
        assert all(a is b for a, b in zip(test_raw, samples[-n_test:]))
        assert all(a is b for a, b in zip(train_raw, samples[:-n_test]))
        assert not {id(s) for s in train_raw} & {id(s) for s in test_raw}
        c["detail"] = f"{len(train_raw)} train / {n_test} test"


# ---------------------------------------------------------- criterion 10

def test_c10_report_structure(criterion, e2e_per_frequency, e2e_total):
    with criterion(10, "six bins, medians inside, RMSE/MAPE for every (j, k)"):
        for run in (e2e_per_frequency, e2e_total):
            rep = run["report"]
            assert len(rep.bins) == 6
            assert sum(b.count for b in rep.bins) == rep.n_samples
            for b in rep.bins:
                if b.count:
                    assert b.lo <= b.median <= b.hi
        rep = e2e_per_frequency["report"]
        for band in BANDS_MHZ:
            for k in ("rms", "std"):
                assert np.isfinite(rep.rmse[str(band)][k])
                assert np.isfinite(rep.mape[str(band)][k])
        for k in ("rms", "std"):
            assert np.isfinite(e2e_total["report"].rmse["total"][k])
            assert np.isfinite(e2e_total["report"].mape["total"][k])
