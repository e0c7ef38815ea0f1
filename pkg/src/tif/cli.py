"""``tif`` command-line interface.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Failures print one JSON line on stderr and exit with

* 2 for configuration errors,
* 3 for dataset or schema mismatches,
* 4 for numerical failures during training.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__
from .continual import ContinualConfig, run_continual
from .datagen import DatasetFormatError, GeneratorSpec, SpecError, default_spec, generate, read_dataset, write_dataset
from .envsplit import SplitError, split
from .experiment import (
    METRIC_COLUMNS,
    aut_summary,
    evaluate_windows,
    reference_malware,
    time_windows,
    train_end_date,
)
from .metrics import class_gap, discriminability_check, fcs, max_ratio_deviation, representation_similarity_variance
from .model import load_checkpoint, save_checkpoint
from .trainer import Ablation, ConfigError, NumericalError, TrainConfig, prepare, train

logger = logging.getLogger("tif")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **details: Any):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.details = details


# ---------------------------------------------------------------------------
# Config handling


def load_json(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, "config", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, "config", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, "config", f"{path}: top level must be an object")
    return data


def resolve(flags: dict, file_cfg: dict, defaults: dict) -> tuple[dict, dict]:
    """Merge with precedence flag > file > default; return (values, source of each key)."""
    values, source = {}, {}
    for key in {*defaults, *file_cfg, *flags}:
        if flags.get(key) is not None:
            values[key], source[key] = flags[key], "flag"
        elif key in file_cfg:
            values[key], source[key] = file_cfg[key], "file"
        elif key in defaults:
            values[key], source[key] = defaults[key], "default"
    return values, source


def require_seed(values: dict) -> int:
    seed = values.get("seed")
    if seed is None:
        raise CliError(EXIT_CONFIG, "config", "seed is required (top-level 'seed' in --config, or --seed)")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise CliError(EXIT_CONFIG, "config", f"seed must be an integer, got {seed!r}")
    return seed


def canonical_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def dataset_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    for name in ("meta.json", "samples.jsonl"):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, source: dict, seed: int | None,
                   data_hash: str | None, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": canonical_hash(config),
        "dataset_hash": data_hash,
        "seed": seed,
        "version": __version__,
        "precedence": dict(sorted(source.items())),
        "outputs": sorted(outputs),
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def load_data(path: str | Path):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, "config", f"dataset not found: {exc.filename}") from None
    except DatasetFormatError as exc:
        raise CliError(EXIT_DATA, "dataset", str(exc), file=exc.path, line=exc.line) from None


def load_model(path: str | Path, dim: int):
    try:
        model, manifest = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, "config", f"checkpoint not found: {path}") from None
    if manifest["dim"] != dim:
        raise CliError(
            EXIT_DATA, "dataset",
            f"checkpoint expects {manifest['dim']} features but the dataset has {dim}",
        )
    return model, manifest.get("extra", {})


def write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def parse_date(value: str | None) -> dt.date | None:
    if value is None:
        return None
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise CliError(EXIT_CONFIG, "config", f"not a YYYY-MM-DD date: {value!r}") from None


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> None:
    file_cfg = load_json(args.config)
    values, source = resolve({"seed": args.seed, "samples_per_month": args.samples_per_month}, file_cfg, {})
    seed = require_seed(values)
    preset = values.get("preset", "default" if "dim" not in values else None)
    try:
        if preset == "default":
            spec = default_spec(seed=seed, samples_per_month=values.get("samples_per_month", 1000))
        elif preset is None:
            spec = GeneratorSpec.from_dict({k: v for k, v in values.items() if k != "preset"})
        else:
            raise CliError(EXIT_CONFIG, "config", f"unknown preset {preset!r}")
        ds = generate(spec)
    except (SpecError, TypeError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, "config", f"invalid generator spec: {exc}") from None
    write_dataset(ds, args.out)
    logger.info("wrote %d samples (d=%d) to %s", len(ds), ds.dim, args.out)
    write_manifest(args.out, "generate", spec.to_dict(), source, seed, dataset_hash(args.out),
                   ["meta.json", "samples.jsonl"])


TRAIN_DEFAULTS = {"method": "tif", "train_months": 12}


def cmd_train(args) -> None:
    file_cfg = load_json(args.config)
    flags = {
        "seed": args.seed,
        "method": args.method,
        "ablation": args.ablation,
        "total_epochs": args.epochs,
        "stage1_epochs": args.stage1_epochs,
        "train_months": args.train_months,
    }
    values, source = resolve(flags, file_cfg, TRAIN_DEFAULTS)
    require_seed(values)
    method = values.pop("method")
    if method not in ("tif", "erm"):
        raise CliError(EXIT_CONFIG, "config", f"method must be 'tif' or 'erm', got {method!r}")
    train_months = values.pop("train_months")
    try:
        config = TrainConfig.from_dict(values)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None

    ds = load_data(args.data)
    if len(ds) == 0:
        raise CliError(EXIT_DATA, "dataset", "dataset has no samples")
    end = train_end_date(ds, train_months)
    train_ds = ds.between(None, end)
    try:
        assignment = split(train_ds, config.granularity)
        model, report = train(train_ds, config, method, assignment)
        data = prepare(train_ds, assignment, config)
    except NumericalError as exc:
        raise CliError(EXIT_NUMERIC, "numerical", str(exc), stage=exc.stage, epoch=exc.epoch) from None
    except (ConfigError, SplitError) as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None

    effective = {"method": method, "train_months": train_months, **config.to_dict()}
    extra = {
        "method": method,
        "train_config": config.to_dict(),
        "train_end": end.isoformat(),
        "train_t_max": train_ds.t_max.isoformat(),
        "validation_ids": [train_ds.samples[i].id for i in data.val_idx],
    }
    save_checkpoint(model, args.out / "checkpoint.npz", extra)
    report.wall_clock = 0.0  # keep report.json reproducible; timing goes to the log
    report.write(args.out / "report.json")
    assignment.write(args.out / "environments.json", train_ds)
    logger.info("trained %s on %d samples across %d environments", method, len(train_ds), assignment.env_count)
    write_manifest(args.out, "train", effective, source, config.seed, dataset_hash(args.data),
                   ["checkpoint.npz", "report.json", "environments.json"])


def cmd_evaluate(args) -> None:
    file_cfg = load_json(args.config)
    values, source = resolve(
        {"seed": args.seed, "window": args.window, "start": args.start, "end": args.end, "fcs": args.fcs},
        file_cfg,
        {"window": "monthly", "fcs": True},
    )
    ds = load_data(args.data)
    model, extra = load_model(args.checkpoint, ds.dim)
    seed = values.get("seed", extra.get("train_config", {}).get("seed", 0))
    start = parse_date(values.get("start")) or parse_date(extra.get("train_end"))
    if start is None:
        raise CliError(EXIT_CONFIG, "config", "no --start given and the checkpoint records no training end")
    try:
        windows = time_windows(ds, start, values["window"], parse_date(values.get("end")))
    except (ValueError, SplitError) as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None
    reference = reference_malware(ds, extra.get("validation_ids", []))
    rows = evaluate_windows(model, windows, reference, with_fcs=bool(values["fcs"]), seed=seed)
    write_csv(args.out / "metrics.csv", METRIC_COLUMNS, [r.row() for r in rows])
    summary = aut_summary(rows)
    (args.out / "aut.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info("evaluated %d windows; AUT(F1) = %s", len(rows), summary["aut_macro_f1"])
    write_manifest(args.out, "evaluate", values, source, seed, dataset_hash(args.data), ["metrics.csv", "aut.json"])


ANALYZE_DEFAULTS = {"epsilon": 0.05, "n0": 500, "delta": 0.5, "n_subsets": 200, "fcs_samples": 500}


def cmd_analyze(args) -> None:
    file_cfg = load_json(args.config)
    values, source = resolve({"seed": args.seed}, file_cfg, ANALYZE_DEFAULTS)
    ds = load_data(args.data)
    model, extra = load_model(args.checkpoint, ds.dim)
    seed = values.get("seed", extra.get("train_config", {}).get("seed", 0))
    end = parse_date(extra.get("train_end"))
    train_ds = ds.between(None, end)
    X, y = train_ds.features(), train_ds.labels()
    if y.min() == y.max():
        raise CliError(EXIT_DATA, "dataset", "training period holds a single class")
    months = np.array([(s.timestamp.year - train_ds.t_min.year) * 12 + s.timestamp.month - train_ds.t_min.month
                       for s in train_ds.samples])

    # a feature is stable when its active ratio holds within each class
    stable = np.ones(ds.dim, dtype=bool)
    for c in (0, 1):
        mask = y == c
        n0 = min(int(values["n0"]), int(mask.sum()))
        worst, _ = max_ratio_deviation(X[mask], months[mask], n0, int(values["n_subsets"]), seed)
        stable &= worst <= values["epsilon"]
    gap = class_gap(X, y)
    discriminative = gap >= values["delta"]
    # subsampling robustness only matters for features that pass the gap threshold
    for j in np.flatnonzero(discriminative):
        res = discriminability_check(X[:, j], y, values["delta"], n_subsets=100, seed=seed)
        discriminative[j] = res.min_subsample_gap >= values["delta"]
    scores = fcs(model, X, y, seed=seed, max_samples=int(values["fcs_samples"])).scores

    roles = {}
    for role, idx in (ds.feature_roles or {}).items():
        for j in idx:
            roles[j] = role
    write_csv(
        args.out / "features.csv",
        ("index", "role", "gap", "stable", "discriminative", "fcs"),
        [[j, roles.get(j, ""), f"{gap[j]:.6f}", int(stable[j]), int(discriminative[j]), f"{scores[j]:.6e}"]
         for j in range(ds.dim)],
    )

    windows = time_windows(ds, end) if end is not None else []
    ref = reference_malware(ds, extra.get("validation_ids", []))
    sim = representation_similarity_variance(
        model, ref if len(ref) else X[y == 1], [w.features()[w.labels() == 1] for _, w in windows]
    )
    write_csv(args.out / "similarity.csv", ("window", "cosine_mean_mal"),
              [[label, f"{c:.6f}"] for (label, _), c in zip(windows, sim.cosines)])
    summary = {
        "similarity_variance": sim.variance,
        "n_stable": int(stable.sum()),
        "n_discriminative": int(discriminative.sum()),
        "fcs_total": float(scores.sum()),
    }
    (args.out / "analysis.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, "analyze", values, source, seed, dataset_hash(args.data),
                   ["features.csv", "similarity.csv", "analysis.json"])


def cmd_continual(args) -> None:
    file_cfg = load_json(args.config)
    values, source = resolve({"seed": args.seed}, file_cfg, asdict(ContinualConfig()))
    ds = load_data(args.data)
    model, extra = load_model(args.checkpoint, ds.dim)
    if "train_config" not in extra:
        raise CliError(EXIT_CONFIG, "config", "checkpoint lacks its training configuration")
    train_cfg = TrainConfig.from_dict(extra["train_config"])
    seed = values.pop("seed", train_cfg.seed)
    train_cfg.seed = seed
    try:
        config = ContinualConfig(**values)
    except TypeError as exc:
        raise CliError(EXIT_CONFIG, "config", f"invalid continual config: {exc}") from None
    end = parse_date(extra["train_end"])
    train_ds = ds.between(None, end)
    try:
        _, report = run_continual(
            model, train_ds, split(train_ds, train_cfg.granularity), time_windows(ds, end),
            config, train_cfg, extra.get("method", "tif"),
        )
    except NumericalError as exc:
        raise CliError(EXIT_NUMERIC, "numerical", str(exc), stage=exc.stage, epoch=exc.epoch) from None
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None
    report.write(args.out / "continual_report.json")
    logger.info("%d updates, %d labels", report.n_updates, report.total_cost)
    write_manifest(args.out, "continual", {**values, "seed": seed}, source, seed, dataset_hash(args.data),
                   ["continual_report.json"])


def cmd_report(args) -> None:
    runs = {}
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        entry: dict[str, Any] = {}
        if (run_dir / "aut.json").exists():
            entry["aut"] = json.loads((run_dir / "aut.json").read_text())
        if (run_dir / "continual_report.json").exists():
            cont = json.loads((run_dir / "continual_report.json").read_text())
            entry["continual"] = {k: cont[k] for k in ("method", "n_updates", "update_months", "total_cost")}
        if (run_dir / "analysis.json").exists():
            entry["analysis"] = json.loads((run_dir / "analysis.json").read_text())
        if not entry:
            raise CliError(EXIT_CONFIG, "config", f"{run_dir} holds no evaluate/analyze/continual outputs")
        runs[str(run_dir)] = entry
    (args.out / "summary.json").write_text(json.dumps(runs, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        for name, entry in runs.items():
            parts = [f"{k}={v}" for k, v in sorted(entry.get("aut", {}).items())]
            if "continual" in entry:
                parts.append(f"updates={entry['continual']['n_updates']}")
            print(f"{name}: {' '.join(parts)}")
    write_manifest(args.out, "report", {"runs": sorted(runs)}, {}, None, None, ["summary.json"])


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tif", description="Temporal invariant training for drifting detectors.")
    parser.add_argument("--version", action="version", version=f"tif {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_data=True, needs_checkpoint=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--quiet", action="store_true")
        if needs_data:
            p.add_argument("--data", required=True, help="dataset directory")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint.npz written by train")

    p = sub.add_parser("generate", help="write a synthetic drifting dataset")
    common(p, needs_data=False)
    p.add_argument("--samples-per-month", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector on the leading months of a dataset")
    common(p)
    p.add_argument("--method", choices=("tif", "erm"))
    p.add_argument("--ablation", help="'none', 'all', or a comma list of mpc1,mpc2,iga")
    p.add_argument("--epochs", type=int, help="total epochs")
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--train-months", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-window metrics after the training period")
    common(p, needs_checkpoint=True)
    p.add_argument("--window", choices=("monthly", "quarterly"))
    p.add_argument("--start", help="first window start (default: end of training)")
    p.add_argument("--end", help="exclusive end date")
    p.add_argument("--no-fcs", dest="fcs", action="store_const", const=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="feature stability/discriminability/FCS and embedding drift")
    common(p, needs_checkpoint=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("continual", help="threshold-triggered update loop over the test months")
    common(p, needs_checkpoint=True)
    p.set_defaults(func=cmd_continual)

    p = sub.add_parser("report", help="collect run outputs into summary.json")
    common(p, needs_data=False)
    p.add_argument("runs", nargs="+", help="output directories of earlier commands")
    p.set_defaults(func=cmd_report)
    return parser


def fail(err: CliError) -> int:
    record = {"error": err.kind, "exit_code": err.code, "message": str(err), **err.details}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return err.code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    threads = os.environ.get("TIF_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            return fail(CliError(EXIT_CONFIG, "config", f"TIF_THREADS must be an integer, got {threads!r}"))
    start = time.perf_counter()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args)
    except CliError as err:
        return fail(err)
    logger.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
