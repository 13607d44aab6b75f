"""Command-line entry point: synth / train / eval / ablate / gradcheck.

All commands are driven by a strict JSON config (unknown keys are errors,
diagnostics name the offending field path) and are deterministic under a
fixed seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .attention import POS_ENCODINGS, VARIANTS
from .data import (
    DEFAULT_CLASS_NAMES,
    DEFAULT_SAMPLE_RATE,
    SplitSpec,
    read_dataset,
    split_by_patient,
    synth_dataset,
    write_dataset,
)
from .errors import ConfigError, FormatError, LganetError
from .gradcheck import run_all
from .model import Model, ModelConfig
from .training import ScheduleSpec, TrainSpec, evaluate, train, write_log_csv

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

DEFAULT_WINDOW_SWEEP = (16, 32, 64, 128)


@dataclass
class RunConfig:
    """Everything one training/ablation run needs, parsed from JSON."""

    seed: int = 42
    precision: str = "f32"
    model: ModelConfig = field(default_factory=lambda: ModelConfig.create())
    train: TrainSpec = field(default_factory=TrainSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    dataset: str | None = None

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        del model["precision"]  # carried at the top level
        return {
            "seed": self.seed,
            "precision": self.precision,
            "model": model,
            "train": {
                "lr_start": self.train.schedule.lr_start,
                "lr_end": self.train.schedule.lr_end,
                "epochs": self.train.schedule.total_epochs,
                "batch_size": self.train.batch_size,
                "patience": self.train.patience,
                "weight_decay": self.train.weight_decay,
                "threshold": self.train.threshold,
            },
            "split": {"train": self.split.train, "val": self.split.val,
                      "dev": self.split.dev, "seed": self.split.seed},
            "data": {"dataset": self.dataset},
        }


def _expect(obj, path: str, kind) -> None:
    if not isinstance(obj, kind):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {type(obj).__name__}")


def _section(raw: dict, path: str, fields: dict) -> dict:
    """Strictly read one JSON object: known keys only, typed, with defaults."""
    _expect(raw, path, dict)
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    out = {}
    for name, (types, default) in fields.items():
        if name in raw:
            value = raw[name]
            if types is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, types) or isinstance(value, bool) and types is not bool:
                want = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
                raise ConfigError(f"{path}.{name}: expected {want}, got {type(value).__name__}")
            out[name] = value
        elif default is ...:
            raise ConfigError(f"{path}.{name}: required field is missing")
        else:
            out[name] = default
    return out


def parse_run_config(raw: dict) -> RunConfig:
    top = _section(raw, "config", {
        "seed": (int, 42),
        "precision": (str, "f32"),
        "model": (dict, {}),
        "train": (dict, {}),
        "split": (dict, {}),
        "data": (dict, {}),
    })
    defaults = ModelConfig()
    m = _section(top["model"], "model", {
        "leads": (int, defaults.leads),
        "input_len": (int, defaults.input_len),
        "embed_dim": (int, defaults.embed_dim),
        "heads": (int, defaults.heads),
        "num_stages": (int, defaults.num_stages),
        "num_classes": (int, defaults.num_classes),
        "window_len": (int, defaults.window_len),
        "stride": (int, defaults.stride),
        "query_kernel": (int, defaults.query_kernel),
        "kv_kernel": (int, defaults.kv_kernel),
        "variant": (str, defaults.variant),
        "pos_encoding": (str, defaults.pos_encoding),
    })
    t = _section(top["train"], "train", {
        "lr_start": (float, 1e-4),
        "lr_end": (float, 1e-5),
        "epochs": (int, 50),
        "batch_size": (int, 32),
        "patience": (int, 7),
        "weight_decay": (float, 0.01),
        "threshold": (float, 0.5),
    })
    s = _section(top["split"], "split", {
        "train": (float, 0.90),
        "val": (float, 0.05),
        "dev": (float, 0.05),
        "seed": (int, 0),
    })
    d = _section(top["data"], "data", {"dataset": ((str, type(None)), None)})
    model = ModelConfig.create(precision=top["precision"], **m)
    spec = TrainSpec(
        schedule=ScheduleSpec(t["lr_start"], t["lr_end"], t["epochs"]),
        batch_size=t["batch_size"], patience=t["patience"],
        weight_decay=t["weight_decay"], threshold=t["threshold"],
        seed=top["seed"],
    )
    spec.validate()
    split = SplitSpec(s["train"], s["val"], s["dev"], s["seed"])
    split.validate()
    return RunConfig(top["seed"], top["precision"], model, spec, split, d["dataset"])


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return parse_run_config(raw)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "precision", None) is not None:
        cfg.precision = args.precision
        cfg.model = ModelConfig.from_dict({**cfg.model.to_dict(), "precision": args.precision})
    if getattr(args, "data", None) is not None:
        cfg.dataset = args.data
    return cfg


def _load_records(path):
    if path is None:
        raise ConfigError("no dataset path given (config data.dataset or --data)")
    if not os.path.exists(path):
        raise ConfigError(f"dataset file not found: {path}")
    return read_dataset(path)


def _class_names(k: int) -> tuple[str, ...]:
    if k == len(DEFAULT_CLASS_NAMES):
        return DEFAULT_CLASS_NAMES
    return tuple(f"class_{i}" for i in range(k))


# -- commands -------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.n <= 0:
        raise ConfigError(f"--n must be positive, got {args.n}")
    records = synth_dataset(args.n, num_classes=args.classes, seed=args.seed,
                            leads=args.leads, length=args.length)
    write_dataset(records, args.out, sample_rate=args.sample_rate)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def _train_once(cfg: RunConfig, records, out_dir: Path, verbose: bool):
    tr, val, dev = split_by_patient(records, cfg.split, require_nonempty=True)
    model = Model(cfg.model, seed=cfg.seed)
    log = train(model, tr, val, cfg.train, verbose=verbose)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / "weights.lgaw")
    write_log_csv(log, out_dir / "training_log.csv")
    report = evaluate(model, val, cfg.train.threshold, cfg.train.batch_size)
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return model, log, report, dev


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    records = _load_records(cfg.dataset)
    model, log, report, _dev = _train_once(cfg, records, Path(args.out), args.verbose)
    print(f"trained {len(log)} epochs, {model.count_parameters()} parameters, "
          f"final val macro-F1 {report.macro_f1:.4f}")
    print(f"artifacts in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = Model.load(args.weights, precision=args.precision)
    records = _load_records(args.data)
    report = evaluate(model, records, threshold=args.threshold)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(payload)
    return EXIT_OK


def _ablation_values(cfg: RunConfig, axis: str, values: str | None):
    if axis == "attention":
        return [("variant", v) for v in VARIANTS]
    if axis == "pe":
        return [("pos_encoding", p) for p in POS_ENCODINGS]
    if axis == "window":
        sweep = DEFAULT_WINDOW_SWEEP if values is None else tuple(
            int(v) for v in values.split(","))
        return [("window_len", w) for w in sweep]
    raise ConfigError(f"unknown ablation axis {axis!r}, expected attention | pe | window")


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    records = _load_records(cfg.dataset)
    settings = _ablation_values(cfg, args.axis, args.values)
    names = _class_names(cfg.model.num_classes)
    rows = []
    for knob, value in settings:
        model_cfg = ModelConfig.from_dict({**cfg.model.to_dict(), knob: value})
        run = RunConfig(cfg.seed, cfg.precision, model_cfg, cfg.train, cfg.split, cfg.dataset)
        tr, val, dev = split_by_patient(records, run.split, require_nonempty=True)
        model = Model(run.model, seed=run.seed)
        train(model, tr, val, run.train, verbose=args.verbose)
        report = evaluate(model, dev, run.train.threshold, run.train.batch_size)
        rows.append([str(value)] + [f"{c.f1:.4f}" for c in report.classes]
                    + [f"{report.macro_f1:.4f}"])
        print(f"[{args.axis}={value}] dev macro-F1 {report.macro_f1:.4f}", flush=True)
    header = [args.axis] + [f"f1_{n}" for n in names] + ["macro_f1"]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"ablation_{args.axis}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(r, widths))
             for r in [header] + rows]
    table = "\n".join(lines)
    print(table)
    with open(out_dir / f"ablation_{args.axis}.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(seed=args.seed, tol=args.tol)
    failed = 0
    for res in results:
        mark = "PASS" if res.passed else "FAIL"
        failed += not res.passed
        print(f"{mark}  {res.name:<28s} max_rel_err={res.max_rel:.3e}  (tol {res.tol:g})")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lga",
        description="Local-global attention ECG classifier: data, training, ablations.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--out", required=True, help="output .lgae path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--leads", type=int, default=12)
    p.add_argument("--length", type=int, default=4096)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--sample-rate", type=int, default=DEFAULT_SAMPLE_RATE)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="dataset path (overrides config data.dataset)")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved weights on a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score one run per setting on an axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=("attention", "pe", "window"))
    p.add_argument("--values", help="comma-separated window sizes (axis=window only)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="dataset path (overrides config data.dataset)")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LganetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
