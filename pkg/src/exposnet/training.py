"""Losses, the training loop, evaluation reports and area-map exports."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from exposnet.dataset import AreaSample
from exposnet.geodata import BANDS_MHZ, GeoOrigin, project_to_local
from exposnet.model import ExposNet
from exposnet.numerics.optim import AdamState, adam_step, step_lr

log = logging.getLogger(__name__)

N_BINS = 6
K_NAMES = ("rms", "std")


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------- losses

def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("loss inputs must be finite")


def _totals(y):
    return np.sqrt(np.sum(y[..., 0] ** 2, axis=-1))


def fidelity_term(y_pred, y_true) -> float:
    """Mean squared error over every (sample, band, rms/std) entry."""
    p = np.asarray(y_pred, np.float64)
    t = np.asarray(y_true, np.float64)
    _check_finite(p, t)
    return float(np.mean((p - t) ** 2))


def constraint_term(y_pred, y_true) -> float:
    """Mean squared gap between totals rebuilt from the per-band RMS entries."""
    p = np.asarray(y_pred, np.float64)
    t = np.asarray(y_true, np.float64)
    _check_finite(p, t)
    return float(np.mean((_totals(p) - _totals(t)) ** 2))


def loss_per_frequency(y_pred, y_true, lam: float = 0.1) -> float:
    """Fidelity plus ``lam`` times the total-field constraint; inputs are (N, 7, 2)."""
    return fidelity_term(y_pred, y_true) + lam * constraint_term(y_pred, y_true)


def loss_per_frequency_grad(y_pred, y_true, lam: float = 0.1) -> np.ndarray:
    p = np.asarray(y_pred, np.float64)
    t = np.asarray(y_true, np.float64)
    n = p.shape[0]
    grad = 2.0 * (p - t) / p.size
    tp = _totals(p)
    gap = tp - _totals(t)
    # d|v|/dv is undefined at 0; use 0 there
    safe = np.where(tp > 0, tp, 1.0)
    coef = np.where(tp > 0, 2.0 * lam * gap / (n * safe), 0.0)
    grad[..., 0] += coef[:, None] * p[..., 0]
    return grad


def loss_total(y_pred, y_true) -> float:
    """Plain MSE over (N, 2) total-field (rms, std) predictions."""
    return fidelity_term(y_pred, y_true)


def loss_total_grad(y_pred, y_true) -> np.ndarray:
    p = np.asarray(y_pred, np.float64)
    return 2.0 * (p - np.asarray(y_true, np.float64)) / p.size


# ------------------------------------------------------------------ metrics

def rmse(y_pred, y_true) -> float:
    p = np.asarray(y_pred, np.float64)
    t = np.asarray(y_true, np.float64)
    return float(np.sqrt(np.mean((p - t) ** 2))) if p.size else float("nan")


def mape(y_pred, y_true) -> tuple[float, int]:
    """Mean absolute percentage error and the number of zero-truth entries excluded."""
    p = np.asarray(y_pred, np.float64).reshape(-1)
    t = np.asarray(y_true, np.float64).reshape(-1)
    ok = t > 0
    if not ok.any():
        return float("nan"), int(t.size)
    return float(np.mean(np.abs((p[ok] - t[ok]) / t[ok])) * 100.0), int((~ok).sum())


def rmse_jk(y_pred, y_true, j: int, k: int) -> float:
    return rmse(np.asarray(y_pred)[:, j, k], np.asarray(y_true)[:, j, k])


def mape_jk(y_pred, y_true, j: int, k: int) -> float:
    return mape(np.asarray(y_pred)[:, j, k], np.asarray(y_true)[:, j, k])[0]


# --------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    lr_factor: float = 0.5
    lr_every: int = 5
    weight_decay: float | None = None  # None: 1e-4 per-frequency, 1e-5 total
    lam: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.lr <= 0 or self.lr_every < 1:
            raise ValueError("epochs >= 1, batch_size >= 2, lr > 0 and lr_every >= 1 required")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    def resolved_weight_decay(self, option: str) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 1e-4 if option == "per_frequency" else 1e-5

    def lr_at(self, epoch: int) -> float:
        return step_lr(self.lr, epoch, self.lr_factor, self.lr_every)


def targets_for(samples: Sequence[AreaSample], option: str) -> np.ndarray:
    t = np.stack([s.targets for s in samples]).astype(np.float32)
    if option == "total":
        return t[:, -2:]
    return t[:, :-2].reshape(len(samples), len(BANDS_MHZ), 2)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one joins its predecessor."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _loss_and_grad(option, pred, true, lam):
    if option == "total":
        return loss_total(pred, true), loss_total_grad(pred, true)
    return loss_per_frequency(pred, true, lam), loss_per_frequency_grad(pred, true, lam)


@dataclass
class TrainResult:
    history: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(model: ExposNet, samples: Sequence[AreaSample], cfg: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Mini-batch Adam on normalized samples; returns per-epoch mean training loss."""
    if len(samples) < 2:
        raise TrainingError("need at least two training samples")
    option = model.cfg.option
    x_all = np.stack([s.inputs for s in samples])
    h_all = [s.bsa_heights for s in samples]
    y_all = targets_for(samples, option)
    rng = np.random.default_rng(cfg.seed)
    model.set_rng(np.random.default_rng(cfg.seed + 1))
    params = model.parameters()
    state = AdamState()
    wd = cfg.resolved_weight_decay(option)
    result = TrainResult()
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        total, count = 0.0, 0
        for b, idx in enumerate(batches(len(samples), cfg.batch_size, rng)):
            model.zero_grad()
            pred = model.forward(x_all[idx], [h_all[i] for i in idx], train=True)
            try:
                loss, grad = _loss_and_grad(option, pred, y_all[idx], cfg.lam)
            except ValueError:
                loss = float("nan")
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b} (lr={lr:g})")
            model.backward(grad.astype(np.float32))
            adam_step(params, state, lr, wd)
            total += loss * len(idx)
            count += len(idx)
        mean = total / count
        result.history.append(mean)
        result.lrs.append(lr)
        log.info("epoch %d/%d lr %.3g loss %.6g", epoch + 1, cfg.epochs, lr, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    result.seconds = time.perf_counter() - t0
    return result


def predict_samples(model: ExposNet, samples: Sequence[AreaSample], batch_size: int = 8) -> np.ndarray:
    outs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        outs.append(model.predict(np.stack([s.inputs for s in chunk]),
                                  [s.bsa_heights for s in chunk]))
    return np.concatenate(outs, axis=0)


def write_loss_history(path, result: TrainResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss"])
        for e, (lr, loss) in enumerate(zip(result.lrs, result.history), start=1):
            w.writerow([e, repr(lr), repr(float(loss))])


# ---------------------------------------------------------------- evaluation

@dataclass
class IntervalBin:
    lo: float
    hi: float
    count: int
    median: float | None
    rmse: float | None
    mape: float | None


@dataclass
class EvalReport:
    option: str
    n_samples: int
    rmse: dict          # row -> {"rms": v, "std": v}
    mape: dict
    mape_excluded: dict
    mape_mean: float
    bins: list[IntervalBin]
    truth_total: list[float]
    pred_total: list[float]
    predictions: list
    truth: list

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    def write(self, path, config_echo: dict | None = None):
        d = self.to_json()
        d["config"] = config_echo or {}
        Path(path).write_text(json.dumps(_clean(d), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    """JSON-safe copy with NaN turned into None."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def interval_bins(truth, pred, n_bins: int = N_BINS) -> list[IntervalBin]:
    """Equal-width bins over [min, max] of ``truth`` with per-bin errors."""
    t = np.asarray(truth, np.float64)
    p = np.asarray(pred, np.float64)
    if t.size == 0:
        return []
    lo, hi = float(t.min()), float(t.max())
    width = (hi - lo) / n_bins
    edges = [lo + i * width for i in range(n_bins)] + [hi]
    if width > 0:
        idx = np.minimum(np.floor((t - lo) / width).astype(int), n_bins - 1)
    else:
        idx = np.zeros(t.size, dtype=int)
    out = []
    for b in range(n_bins):
        m = idx == b
        if m.any():
            out.append(IntervalBin(edges[b], edges[b + 1], int(m.sum()), float(np.median(t[m])),
                                   rmse(p[m], t[m]), mape(p[m], t[m])[0]))
        else:
            out.append(IntervalBin(edges[b], edges[b + 1], 0, None, None, None))
    return out


def evaluate(model_or_predictions, samples: Sequence[AreaSample], option: str) -> EvalReport:
    """Report per (band, rms/std) RMSE/MAPE plus binned total-field errors.

    ``model_or_predictions`` is an :class:`ExposNet` or an array of
    already-computed predictions in the option's layout.
    """
    if not samples:
        raise TrainingError("evaluation set is empty")
    if isinstance(model_or_predictions, ExposNet):
        pred = predict_samples(model_or_predictions, samples)
    else:
        pred = np.maximum(np.asarray(model_or_predictions, np.float64), 0.0)
    true = targets_for(samples, option).astype(np.float64)
    pred = np.asarray(pred, np.float64)
    truth_total = np.array([s.targets[-2] for s in samples], np.float64)
    rmse_t, mape_t, excl = {}, {}, {}
    if option == "per_frequency":
        for j, band in enumerate(BANDS_MHZ):
            rmse_t[str(band)] = {k: rmse_jk(pred, true, j, ki) for ki, k in enumerate(K_NAMES)}
            mape_t[str(band)] = {}
            excl[str(band)] = {}
            for ki, k in enumerate(K_NAMES):
                mape_t[str(band)][k], excl[str(band)][k] = mape(pred[:, j, ki], true[:, j, ki])
        pred_total = _totals(pred)
        rmse_t["total"] = {"rms": rmse(pred_total, truth_total)}
        m, e = mape(pred_total, truth_total)
        mape_t["total"], excl["total"] = {"rms": m}, {"rms": e}
    else:
        pred_total = pred[:, 0]
        rmse_t["total"] = {k: rmse(pred[:, ki], true[:, ki]) for ki, k in enumerate(K_NAMES)}
        mape_t["total"], excl["total"] = {}, {}
        for ki, k in enumerate(K_NAMES):
            mape_t["total"][k], excl["total"][k] = mape(pred[:, ki], true[:, ki])
    vals = [v for row in mape_t.values() for v in row.values() if np.isfinite(v)]
    return EvalReport(option, len(samples), rmse_t, mape_t, excl,
                      float(np.mean(vals)) if vals else float("nan"),
                      interval_bins(truth_total, pred_total),
                      truth_total.tolist(), pred_total.tolist(), pred.tolist(), true.tolist())


# -------------------------------------------------------------------- maps

def _write_pgm(path, img: np.ndarray):
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


def export_maps(centers: Sequence[tuple[float, float]], truth, pred, out_dir,
                origin: GeoOrigin | None = None, pixel_m: float = 10.0, side_m: float = 400.0):
    """Paint each area as a uniform block for truth, prediction and |error|.

    Gray level 0 is background; values map linearly onto 1..255 between the
    recorded min and max (a constant quantity paints level 1). Returns the
    sidecar dictionary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = np.asarray(truth, np.float64)
    pred = np.asarray(pred, np.float64)
    lat = np.array([c[0] for c in centers])
    lon = np.array([c[1] for c in centers])
    if origin is None:
        origin = GeoOrigin(float(lat[0]), float(lon[0]))
    x, y = project_to_local(lat, lon, origin)
    x, y = np.atleast_1d(x), np.atleast_1d(y)
    half = side_m / 2
    west, north = x.min() - half, y.max() + half
    w = int(np.ceil((x.max() + half - west) / pixel_m))
    h = int(np.ceil((north - (y.min() - half)) / pixel_m))
    quantities = {"truth": truth, "prediction": pred, "abs_error": np.abs(pred - truth)}
    sidecar = {"pixel_m": pixel_m, "side_m": side_m, "width": w, "height": h,
               "west_m": float(west), "north_m": float(north),
               "origin": [origin.lat, origin.lon], "scales": {}}
    span = int(round(side_m / pixel_m))
    for name, vals in quantities.items():
        vmin, vmax = float(vals.min()), float(vals.max())
        if vmax > vmin:
            gray = 1 + np.round((vals - vmin) / (vmax - vmin) * 254)
        else:
            gray = np.ones_like(vals)
        img = np.zeros((h, w), dtype=np.uint8)
        for xi, yi, g in zip(x, y, gray):
            c0 = int(round((xi - half - west) / pixel_m))
            r0 = int(round((north - (yi + half)) / pixel_m))
            img[max(r0, 0):r0 + span, max(c0, 0):c0 + span] = int(g)
        _write_pgm(out / f"{name}.pgm", img)
        sidecar["scales"][name] = {"min": vmin, "max": vmax}
    (out / "maps.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    with open(out / "samples.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "lat", "lon", "truth", "prediction", "abs_error"])
        for i in range(len(centers)):
            wr.writerow([i, repr(float(lat[i])), repr(float(lon[i])), repr(float(truth[i])),
                         repr(float(pred[i])), repr(float(abs(pred[i] - truth[i])))])
    return sidecar
