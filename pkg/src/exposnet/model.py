"""ExposNet: four input branches, spatial fusion and per-frequency / total heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from exposnet.dataset import NormStats
from exposnet.geodata import BANDS_MHZ
from exposnet.numerics import functional as F
from exposnet.numerics.layers import (INIT_BOUNDS, Conv2d, Dropout, GlobalAvgPool, Linear,
                                      MaxPool2, Module, ReLU, Sequential, Sigmoid, conv_block,
                                      set_dropout_rng)

OPTIONS = ("per_frequency", "total")
CKPT_MAGIC = b"EXPM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    option: str = "per_frequency"
    ir_filters: tuple[int, int] = (16, 32)
    landcover_filters: int = 16
    building_filters: tuple[int, int] = (16, 32)
    building_attention_filters: int = 16
    antenna_filters: tuple[int, int] = (32, 64)
    fusion_filters: tuple[int, ...] = (256, 512, 1024, 1024)
    frequency_filters: tuple[int, ...] = (512, 256, 128)
    output_hidden: int = 64
    n_bs_max: int = 32
    bs_hidden: int = 32
    n_bs_out: int = 16
    dropout: float = 0.3
    init: str = "he_uniform"
    seed: int = 0

    def __post_init__(self):
        if self.option not in OPTIONS:
            raise ValueError(f"option must be one of {OPTIONS}, got {self.option!r}")
        if self.n_bs_out < 1 or self.n_bs_max < 1:
            raise ValueError("n_bs_out and n_bs_max must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.init not in INIT_BOUNDS:
            raise ValueError(f"init must be one of {sorted(INIT_BOUNDS)}")
        if len(self.fusion_filters) != 4:
            raise ValueError("spatial fusion has exactly four conv/pool stages")

    @property
    def n_heads(self) -> int:
        return len(BANDS_MHZ) if self.option == "per_frequency" else 1

    def slim(self, divisor: int) -> "ModelConfig":
        """Same topology with every convolution/hidden width divided by ``divisor``."""
        def d(v):
            return max(2, v // divisor)
        return replace(
            self,
            ir_filters=tuple(d(v) for v in self.ir_filters),
            landcover_filters=d(self.landcover_filters),
            building_filters=tuple(d(v) for v in self.building_filters),
            building_attention_filters=d(self.building_attention_filters),
            antenna_filters=tuple(d(v) for v in self.antenna_filters),
            fusion_filters=tuple(d(v) for v in self.fusion_filters),
            frequency_filters=tuple(d(v) for v in self.frequency_filters),
            output_hidden=d(self.output_hidden),
            bs_hidden=d(self.bs_hidden),
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("ir_filters", "building_filters", "antenna_filters", "fusion_filters",
                  "frequency_filters"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _gate_backward(dout, features, gate):
    """Gradients of ``features * gate`` where ``gate`` has a single channel."""
    return dout * gate, (dout * features).sum(axis=1, keepdims=True)


class SatelliteBranch(Module):
    """Infrared features gated by a land-cover derived weight map."""

    def __init__(self, cfg: ModelConfig, rng):
        c1, c2 = cfg.ir_filters
        self.ir = Sequential(conv_block(3, c1, rng, cfg.init), conv_block(c1, c2, rng, cfg.init), MaxPool2())
        self.landcover = Sequential(conv_block(3, cfg.landcover_filters, rng, cfg.init),
                                    Conv2d(cfg.landcover_filters, 1, rng, cfg.init), Sigmoid())
        self.weight_map = None

    def forward(self, ir, lc, train=False):
        f = self.ir.forward(ir, train)
        w = self.landcover.forward(lc, train)
        g, self._resize = F.bilinear_forward(w, f.shape[2], f.shape[3])
        self.weight_map = g
        self._f = f
        return f * g

    def backward(self, dout):
        df, dg = _gate_backward(dout, self._f, self.weight_map)
        dlc = self.landcover.backward(F.bilinear_backward(dg, self._resize))
        return self.ir.backward(df), dlc


class BuildingBranch(Module):
    """Height-map features refined by a spatial attention map."""

    def __init__(self, cfg: ModelConfig, rng):
        c1, c2 = cfg.building_filters
        self.features = Sequential(conv_block(1, c1, rng, cfg.init), conv_block(c1, c2, rng, cfg.init), MaxPool2())
        self.attention = Sequential(conv_block(c2, cfg.building_attention_filters, rng, cfg.init),
                                    Conv2d(cfg.building_attention_filters, 1, rng, cfg.init), Sigmoid())
        self.attention_map = None

    def forward(self, x, train=False):
        f = self.features.forward(x, train)
        a = self.attention.forward(f, train)
        self._f, self.attention_map = f, a
        return f * a

    def backward(self, dout):
        df, da = _gate_backward(dout, self._f, self.attention_map)
        df = df + self.attention.backward(da)
        return self.features.backward(df)


class AntennaBranch(Sequential):
    def __init__(self, cfg: ModelConfig, rng):
        c1, c2 = cfg.antenna_filters
        super().__init__(conv_block(7, c1, rng, cfg.init), MaxPool2(), conv_block(c1, c2, rng, cfg.init))


def expand_heights(heights: np.ndarray, n_out: int) -> np.ndarray:
    """Linearly resample a height vector to ``n_out`` entries (zeros if empty)."""
    h = np.asarray(heights, dtype=np.float32)
    if h.size == 0:
        return np.zeros(n_out, dtype=np.float32)
    if h.size == 1:
        return np.full(n_out, h[0], dtype=np.float32)
    pos = np.linspace(0.0, h.size - 1, n_out)
    return np.interp(pos, np.arange(h.size), h).astype(np.float32)


class BaseStationBranch(Module):
    """Attention-weighted BSA heights computed from fully connected layers only."""

    def __init__(self, cfg: ModelConfig, rng):
        self.n_max, self.n_out = cfg.n_bs_max, cfg.n_bs_out
        self.mlp = Sequential(Linear(cfg.n_bs_max, cfg.bs_hidden, rng, cfg.init), ReLU(),
                              Linear(cfg.bs_hidden, cfg.n_bs_out, rng, cfg.init), Sigmoid())

    def prepare(self, heights_batch: Sequence[np.ndarray]):
        padded = np.zeros((len(heights_batch), self.n_max), dtype=np.float32)
        expanded = np.zeros((len(heights_batch), self.n_out), dtype=np.float32)
        for i, h in enumerate(heights_batch):
            h = np.sort(np.asarray(h, dtype=np.float32).reshape(-1))[::-1][:self.n_max]
            padded[i, :h.size] = h
            expanded[i] = expand_heights(h, self.n_out)
        return padded, expanded

    def forward(self, heights_batch, train=False):
        padded, expanded = self.prepare(heights_batch)
        w = self.mlp.forward(padded, train)
        self._expanded = expanded
        self.weights = w
        return expanded * w

    def backward(self, dout):
        self.mlp.backward(dout * self._expanded)


class SpatialFusion(Sequential):
    def __init__(self, cfg: ModelConfig, c_in: int, rng):
        layers, c = [], c_in
        for c_out in cfg.fusion_filters:
            layers += [conv_block(c, c_out, rng, cfg.init), MaxPool2()]
            c = c_out
        super().__init__(*layers)


class FrequencyBranch(Sequential):
    def __init__(self, cfg: ModelConfig, rng):
        layers, c = [], cfg.fusion_filters[-1]
        for c_out in cfg.frequency_filters:
            layers.append(conv_block(c, c_out, rng, cfg.init))
            c = c_out
        super().__init__(*layers, GlobalAvgPool())


class OutputBranch(Module):
    """Two parallel FC sub-branches predicting (rms, std)."""

    def __init__(self, cfg: ModelConfig, n_in: int, rng):
        def head():
            return Sequential(Linear(n_in, cfg.output_hidden, rng, cfg.init), ReLU(),
                              Dropout(cfg.dropout), Linear(cfg.output_hidden, 1, rng, cfg.init))
        self.rms = head()
        self.std = head()

    def forward(self, z, train=False):
        return np.concatenate([self.rms.forward(z, train), self.std.forward(z, train)], axis=1)

    def backward(self, dout):
        return self.rms.backward(dout[:, :1]) + self.std.backward(dout[:, 1:])


class ExposNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.satellite = SatelliteBranch(cfg, rng)
        self.building = BuildingBranch(cfg, rng)
        self.antenna = AntennaBranch(cfg, rng)
        self.base_station = BaseStationBranch(cfg, rng)
        self._fusion_in = cfg.ir_filters[-1] + cfg.building_filters[-1] + cfg.antenna_filters[-1]
        self.fusion = SpatialFusion(cfg, self._fusion_in, rng)
        n_feat = cfg.frequency_filters[-1]
        self.frequency = [FrequencyBranch(cfg, rng) for _ in range(cfg.n_heads)]
        self.output = [OutputBranch(cfg, n_feat + cfg.n_bs_out, rng) for _ in range(cfg.n_heads)]
        self.set_rng(np.random.default_rng(cfg.seed + 1))

    def set_rng(self, rng: np.random.Generator):
        """Generator used by train-mode dropout."""
        set_dropout_rng(self, rng)

    def fuse(self, x, heights, train=False):
        """Input phase and spatial fusion; returns (fused map, base-station vector)."""
        x = np.asarray(x)
        if x.dtype != np.float64:
            x = x.astype(np.float32)
        if x.ndim != 4 or x.shape[1] != 15:
            raise ValueError(f"expected N x 15 x H x W input, got {x.shape}")
        if len(heights) != x.shape[0]:
            raise ValueError("need one BSA height list per sample")
        sat = self.satellite.forward(x[:, 0:3], x[:, 3:6], train)
        bld = self.building.forward(x[:, 6:7], train)
        ant = self.antenna.forward(x[:, 8:15], train)
        bs = self.base_station.forward(heights, train)
        self._split = (sat.shape[1], bld.shape[1])
        fused = self.fusion.forward(np.concatenate([sat, bld, ant], axis=1), train)
        return fused, bs

    def forward(self, x, heights, train=False):
        """Per-frequency option: (N, 7, 2); total option: (N, 2)."""
        fused, bs = self.fuse(x, heights, train)
        outs = []
        for fb, ob in zip(self.frequency, self.output):
            feat = fb.forward(fused, train)
            outs.append(ob.forward(np.concatenate([feat, bs], axis=1), train))
        if self.cfg.option == "total":
            return outs[0]
        return np.stack(outs, axis=1)

    def backward(self, dout):
        dout = np.asarray(dout)
        if dout.dtype != np.float64:
            dout = dout.astype(np.float32)
        if self.cfg.option == "total":
            dout = dout[:, None, :]
        n_feat = self.cfg.frequency_filters[-1]
        dfused = 0.0
        dbs = 0.0
        for j, (fb, ob) in enumerate(zip(self.frequency, self.output)):
            dz = ob.backward(dout[:, j])
            dbs = dbs + dz[:, n_feat:]
            dfused = dfused + fb.backward(np.ascontiguousarray(dz[:, :n_feat]))
        dcat = self.fusion.backward(dfused)
        s1, s2 = self._split
        self.satellite.backward(dcat[:, :s1])
        self.building.backward(dcat[:, s1:s1 + s2])
        self.antenna.backward(dcat[:, s1 + s2:])
        self.base_station.backward(dbs)

    def predict(self, x, heights):
        """Eval-mode forward with physically non-negative outputs."""
        return np.maximum(self.forward(x, heights, train=False), 0.0)

    def parameter_groups(self) -> dict[str, list]:
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            top = name.split(".")[0]
            if top in ("frequency", "output"):
                top = ".".join(name.split(".")[:2])
            groups.setdefault(top, []).append(p)
        return groups

    def summary(self) -> dict[str, int]:
        out = {k: int(sum(p.data.size for p in v)) for k, v in self.parameter_groups().items()}
        out["total"] = self.num_parameters()
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters()}
        arrays.update(dict(self.named_buffers()))
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}...")
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            p.data[...] = arrays[name]
        for name, b in buffers.items():
            b[...] = arrays[name]


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: ExposNet, stats: NormStats | None = None,
                    extra: dict | None = None):
    meta = {"config": model.cfg.to_json(),
            "norm_stats": stats.to_json() if stats is not None else None,
            "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    arrays = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(blob)) + blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, a in arrays.items():
            nb = name.encode()
            fh.write(struct.pack("<HB", len(nb), a.ndim) + nb)
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns ``(model, norm_stats or None, extra dict)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an EXPM checkpoint")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 10
    meta = json.loads(data[off:off + n])
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        ln, ndim = struct.unpack_from("<HB", data, off)
        off += 3
        name = data[off:off + ln].decode()
        off += ln
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
    model = ExposNet(ModelConfig.from_json(meta["config"]))
    model.load_state_arrays(arrays)
    stats = NormStats.from_json(meta["norm_stats"]) if meta.get("norm_stats") else None
    return model, stats, meta.get("extra", {})
