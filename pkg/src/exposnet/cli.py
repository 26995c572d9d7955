"""Batch command-line front end: ``exposnet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to
standard error; every command that writes an output directory also writes
``run_manifest.json`` there.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from exposnet import __version__
from exposnet.dataset import (N_TARGETS, AreaSample, DatasetError, apply_norm, build_dataset,
                              load_dataset, save_dataset, split_train_test)
from exposnet.geodata import (BANDS_MHZ, GeoDataError, GeoOrigin, GeoSources, nonzero_bsa_heights,
                              read_bsa_csv, read_buildings_csv, read_raster)
from exposnet.measurements import (MeasurementError, combine_triaxis, read_gps_csv,
                                   read_measurements_csv, summary_stats)
from exposnet.model import CheckpointError, ExposNet, ModelConfig, load_checkpoint, save_checkpoint
from exposnet.synth import ScenarioConfig, generate_scenario, write_scenario_files
from exposnet.training import (TrainConfig, TrainingError, evaluate, export_maps, train,
                               write_loss_history)

log = logging.getLogger("exposnet")

MANIFEST_NAME = "run_manifest.json"
CHECKPOINT_NAME = "model.expm"
DATA_ERRORS = (DatasetError, GeoDataError, MeasurementError, CheckpointError, TrainingError,
               FileNotFoundError, IsADirectoryError, NotADirectoryError)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None = None
    version: str = __version__
    argv: list[str] = field(default_factory=list)

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        text = json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"
        (out_dir / MANIFEST_NAME).write_text(text)


# ------------------------------------------------------------------ helpers

def _path(args, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _load_json_config(args, path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(_path(args, path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _build_config(cls, values: dict):
    try:
        return cls.from_json(values) if hasattr(cls, "from_json") else cls(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {cls.__name__}: {e}")


def _parse_tile(s: str) -> tuple[float, float]:
    try:
        lat, lon = (float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LAT,LON")
    return lat, lon


def _read_raster_opt(path):
    return read_raster(path) if path is not None else None


def _rel(args, p: Path) -> str:
    try:
        return str(Path(p).relative_to(Path(args.workdir)))
    except ValueError:
        return str(p)


# --------------------------------------------------------------- commands

def cmd_synth_gen(args) -> int:
    values = _load_json_config(args, args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = _build_config(ScenarioConfig, values)
    out = _path(args, args.out)
    paths = write_scenario_files(generate_scenario(cfg), out)
    (out / "scenario.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    RunManifest("synth-gen", cfg.to_json(), {"config": args.config},
                {k: _rel(args, v) for k, v in paths.items()}, cfg.seed, argv=args.argv).write(out)
    log.info("wrote scenario seed %d to %s", cfg.seed, out)
    return 0


def cmd_build_dataset(args) -> int:
    buildings = read_buildings_csv(_path(args, args.buildings))
    bsa = read_bsa_csv(_path(args, args.bsa))
    ir = _read_raster_opt(_path(args, args.ir))
    lc = _read_raster_opt(_path(args, args.landcover))
    records = read_measurements_csv(_path(args, args.measurements))
    track = read_gps_csv(_path(args, args.gps))
    if not records:
        raise DataError("no samples: measurement file holds no records")
    samples, origin = build_dataset(buildings, bsa, ir, lc, records, track,
                                    args.spacing, args.min_points)
    if not samples:
        raise DataError("no samples: no area reached the minimum point count")
    n_test = args.n_test if args.n_test is not None else round(args.test_fraction * len(samples))
    if not 0 <= n_test < len(samples):
        raise DataError(f"n_test={n_test} leaves no training samples out of {len(samples)}")
    out = _path(args, args.out)
    save_dataset(out, samples, n_test, origin)
    inputs = {k: getattr(args, k) for k in ("buildings", "bsa", "ir", "landcover",
                                            "measurements", "gps")}
    config = {"spacing_m": args.spacing, "min_points": args.min_points, "n_test": n_test,
              "n_samples": len(samples)}
    RunManifest("build-dataset", config, inputs,
                {"dataset": "dataset.json", "norm_stats": "norm_stats.json", "samples": "samples/"},
                argv=args.argv).write(out)
    log.info("built %d samples (%d held out) in %s", len(samples), n_test, out)
    return 0


def cmd_train(args) -> int:
    values = _load_json_config(args, args.config)
    model_values = dict(values.get("model", {}))
    train_values = dict(values.get("train", {}))
    model_values["option"] = args.option
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"),
                      ("seed", "seed"), ("weight_decay", "weight_decay")):
        if getattr(args, flag) is not None:
            train_values[key] = getattr(args, flag)
    if args.seed is not None:
        model_values["seed"] = args.seed
    if args.init is not None:
        model_values["init"] = args.init
    tcfg = _build_config(TrainConfig, train_values)
    mcfg = _build_config(ModelConfig, model_values)
    width = args.width_divisor or values.get("width_divisor", 1)
    if width != 1:
        mcfg = mcfg.slim(width)

    manifest, samples, stats = load_dataset(_path(args, args.data))
    train_set, _ = split_train_test(samples, manifest.n_test)
    train_set = [apply_norm(s, stats) for s in train_set]
    model = ExposNet(mcfg)
    log.info("training %s model (%d parameters) on %d samples",
             mcfg.option, model.num_parameters(), len(train_set))
    result = train(model, train_set, tcfg)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    origin = [manifest.origin.lat, manifest.origin.lon]
    save_checkpoint(out / CHECKPOINT_NAME, model, stats,
                    {"origin": origin, "train": dataclasses.asdict(tcfg)})
    write_loss_history(out / "loss_history.csv", result)
    config = {"model": mcfg.to_json(), "train": dataclasses.asdict(tcfg),
              "weight_decay": tcfg.resolved_weight_decay(mcfg.option)}
    RunManifest("train", config, {"data": args.data, "config": args.config},
                {"checkpoint": CHECKPOINT_NAME, "loss_history": "loss_history.csv"},
                tcfg.seed, argv=args.argv).write(out)
    return 0


def _checkpoint_path(args) -> Path:
    p = _path(args, args.model)
    return p / CHECKPOINT_NAME if p.is_dir() else p


def cmd_eval(args) -> int:
    manifest, samples, stats = load_dataset(_path(args, args.data))
    if args.split == "test":
        _, samples = split_train_test(samples, manifest.n_test)
    if not samples:
        raise DataError(f"the {args.split} split is empty")
    if args.predictions is not None:
        pred = np.load(_path(args, args.predictions))
        option = args.option
        if option is None:
            option = "total" if pred.ndim == 2 else "per_frequency"
        config = {"predictions": args.predictions}
        report = evaluate(pred, samples, option)
    else:
        model, ckpt_stats, _ = load_checkpoint(_checkpoint_path(args))
        norm = ckpt_stats or stats
        option = model.cfg.option
        config = {"model": model.cfg.to_json()}
        report = evaluate(model, [apply_norm(s, norm) for s in samples], option)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.update({"split": args.split, "option": option})
    report.write(out / "report.json", config)
    export_maps([(s.center_lat, s.center_lon) for s in samples], report.truth_total,
                report.pred_total, out / "maps", origin=manifest.origin)
    RunManifest("eval", config, {"data": args.data, "model": args.model,
                                 "predictions": args.predictions},
                {"report": "report.json", "maps": "maps/"}, argv=args.argv).write(out)
    log.info("total-field RMSE %s", report.rmse["total"])
    return 0


def cmd_predict(args) -> int:
    model, stats, extra = load_checkpoint(_checkpoint_path(args))
    if stats is None:
        raise DataError("checkpoint carries no normalization statistics")
    if "origin" in extra:
        origin = GeoOrigin(*extra["origin"])
    else:
        origin = GeoOrigin(*args.tile)
    sources = GeoSources.from_records(
        origin,
        read_buildings_csv(_path(args, args.buildings)) if args.buildings else (),
        read_bsa_csv(_path(args, args.bsa)) if args.bsa else (),
        _read_raster_opt(_path(args, args.ir)),
        _read_raster_opt(_path(args, args.landcover)))
    tensor = sources.render(sources.tile(*args.tile))
    sample = apply_norm(AreaSample(args.tile[0], args.tile[1], tensor, np.zeros(N_TARGETS),
                                   nonzero_bsa_heights(tensor)), stats)
    pred = model.predict(sample.inputs[None], [sample.bsa_heights])[0]
    result = {"lat": args.tile[0], "lon": args.tile[1], "option": model.cfg.option}
    if model.cfg.option == "per_frequency":
        result["bands"] = {str(b): {"rms": float(pred[j, 0]), "std": float(pred[j, 1])}
                           for j, b in enumerate(BANDS_MHZ)}
        result["total_rms"] = float(np.sqrt(np.sum(pred[:, 0] ** 2)))
    else:
        result["total_rms"], result["total_std"] = float(pred[0]), float(pred[1])
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out is not None:
        out = _path(args, args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "prediction.json").write_text(text + "\n")
        inputs = {k: getattr(args, k) for k in ("model", "buildings", "bsa", "ir", "landcover")}
        RunManifest("predict", {"tile": list(args.tile)}, inputs,
                    {"prediction": "prediction.json"}, argv=args.argv).write(out)
    return 0


def cmd_stats(args) -> int:
    records = read_measurements_csv(_path(args, args.measurements))
    if not records:
        raise DataError("measurement file holds no records")
    fields = np.stack([r.fields for r in records])           # (n, 7, 3)
    e = combine_triaxis(fields[..., 0], fields[..., 1], fields[..., 2])
    rows = {}
    for j, band in enumerate(BANDS_MHZ):
        rows[str(band)] = summary_stats(e[:, j]).as_dict()
    header = f"{'band':>6} {'median':>10} {'q1':>10} {'q3':>10} {'low':>10} {'high':>10} {'out':>5}"
    lines = [header]
    for band, r in rows.items():
        lines.append(f"{band:>6} {r['median']:10.4g} {r['q1']:10.4g} {r['q3']:10.4g} "
                     f"{r['whisker_low']:10.4g} {r['whisker_high']:10.4g} {r['n_outliers']:5d}")
    print("\n".join(lines), file=sys.stderr)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    RunManifest("stats", {}, {"measurements": args.measurements},
                {"stats": "stats.json"}, argv=args.argv).write(out)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="exposnet", description="RF-EMF exposure estimation pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="generate a synthetic scenario and its input files")
    s.add_argument("--config", help="ScenarioConfig JSON")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("build-dataset", help="turn raw inputs into area samples")
    for name in ("buildings", "bsa", "measurements", "gps"):
        s.add_argument(f"--{name}", required=True)
    s.add_argument("--ir", help="IR orthophoto PPM (optional)")
    s.add_argument("--landcover", help="land-cover PPM (optional)")
    s.add_argument("--out", required=True)
    s.add_argument("--spacing", type=float, default=50.0, help="area-center spacing in metres")
    s.add_argument("--min-points", type=int, default=5)
    split = s.add_mutually_exclusive_group()
    split.add_argument("--n-test", type=int)
    split.add_argument("--test-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", help="train a model on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--option", choices=("per_frequency", "total"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help='JSON with optional "model", "train", "width_divisor"')
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--init", choices=("he_uniform", "fan_in_uniform"))
    s.add_argument("--width-divisor", type=int, help="divide every layer width (e.g. 4)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a model and export maps")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="model directory or checkpoint file")
    src.add_argument("--predictions", help=".npy predictions in place of a model")
    s.add_argument("--option", choices=("per_frequency", "total"),
                   help="layout of --predictions (inferred if omitted)")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("test", "all"), default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict one tile, printed as JSON")
    s.add_argument("--model", required=True)
    s.add_argument("--tile", required=True, type=_parse_tile, metavar="LAT,LON")
    s.add_argument("--buildings")
    s.add_argument("--bsa")
    s.add_argument("--ir")
    s.add_argument("--landcover")
    s.add_argument("--out", help="also write prediction.json here")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("stats", help="box-plot statistics per band")
    s.add_argument("--measurements", required=True)
    s.add_argument("--out", default="stats")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"exposnet {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (DataError, *DATA_ERRORS) as e:
        print(f"exposnet {args.command}: data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
