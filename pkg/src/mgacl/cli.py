"""Experiment runner: ``mgacl prepare | train | eval | sweep``.

Config files are flat ``key = value`` text; keys are either TrainConfig
field names or the long flag names (``temp``, ``batch`` ...). Flags win.
Exit status is 0 on success, 1 when a run fails and 2 on bad input.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import diffcore as dc
from .errors import AlignmentError, ConfigError, MGACLError, ParseError
from .evalmetrics import MetricsReport, evaluate, format_table
from .ingest import load_prepared, prepare_files, save_prepared
from .trainer import ABLATIONS, Recommender, TrainConfig, fit

log = logging.getLogger("mgacl")

# flag name -> TrainConfig field
FLAGS = {
    "lp": "l_p",
    "lh": "l_h",
    "M": "M",
    "N": "N",
    "temp": "tau",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "dim": "dim",
    "lr": "lr",
    "batch": "batch_size",
    "epochs": "epochs",
    "seed": "seed",
    "drop-prob": "drop_prob",
    "neg-ratio": "neg_ratio",
    "ablate": "ablate",
    "k": "k",
}
FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
ABLATION_MATRIX = [("N/A", ())] + [(f"w/o {flag}", (flag,)) for flag in ABLATIONS]


def fixture_dir() -> Path:
    """Directory of the bundled tiny dataset."""
    return Path(str(resources.files("mgacl") / "data" / "tiny"))


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def field_name(key: str) -> str | None:
    key = key.strip().lstrip("-")
    if key in FIELDS:
        return key
    return FLAGS.get(key) or FLAGS.get(key.replace("_", "-"))


def coerce(name: str, value):
    """Convert a textual value to the type of TrainConfig field ``name``."""
    default = FIELDS[name].default
    if name == "ablate":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v and v != "none"]
        return tuple(value)
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    return float(value)


def read_config_file(path) -> tuple[dict, list[str]]:
    values, problems = {}, []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{path}:{lineno}: expected key = value")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in ("build_id",):
            continue
        name = field_name(key)
        if name is None:
            problems.append(f"{path}:{lineno}: unknown key {key!r}")
            continue
        values[name] = value
    return values, problems


def resolve_config(args, extra: dict | None = None) -> TrainConfig:
    """Defaults < config file < flags < ``extra``; all problems reported together."""
    raw, problems = {}, []
    if getattr(args, "config", None):
        file_values, problems = read_config_file(args.config)
        raw.update(file_values)
    for flag, name in FLAGS.items():
        value = getattr(args, flag.replace("-", "_"), None)
        if value is not None:
            raw[name] = value
    raw.update(extra or {})
    values = {}
    for name, value in raw.items():
        try:
            values[name] = coerce(name, value)
        except (TypeError, ValueError):
            problems.append(f"{name}: cannot parse {value!r}")
    cfg = TrainConfig(**values)
    problems += cfg.problems()
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def write_resolved(path: Path, cfg: TrainConfig):
    lines = [f"# resolved configuration, mgacl {__version__}", f"build_id = {build_id()}"]
    for name, value in cfg.to_dict().items():
        if name == "ablate":
            value = ",".join(value) or "none"
        lines.append(f"{name} = {value!r}" if isinstance(value, float) else f"{name} = {value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _jsonable(record: dict) -> dict:
    return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in record.items()}


def train_run(cfg: TrainConfig, data_dir, out_dir) -> Path:
    """Train on a prepared dataset; writes config, log and the best checkpoint."""
    prepared = load_prepared(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out / "resolved_config.txt", cfg)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        def on_epoch(report):
            fh.write(json.dumps(_jsonable(report), sort_keys=True) + "\n")
            fh.flush()

        result = fit(cfg, prepared.split.train, prepared.graph, prepared.split.eval, on_epoch=on_epoch)
    g = prepared.graph
    meta = {
        "config": cfg.to_dict(),
        "best_epoch": result.best_epoch,
        "shape": [g.num_users, g.num_items, g.num_entities, g.num_relations],
        "build_id": build_id(),
    }
    path = out / "checkpoint.npz"
    dc.save_checkpoint(path, result.store, meta)
    return path


def eval_run(checkpoint, data_dir, out_dir, k: int | None = None, dim: int | None = None) -> MetricsReport:
    store, meta = dc.load_checkpoint(checkpoint)
    prepared = load_prepared(data_dir)
    g = prepared.graph
    expected = {
        "user": (g.num_users, store.dim),
        "entity": (g.num_entities, store.dim),
        "relation": (g.num_relations + 1, store.dim),
    }
    for name, shape in expected.items():
        if getattr(store, name).shape != shape:
            raise ConfigError(
                f"checkpoint {name} table has shape {getattr(store, name).shape}, graph needs {shape}"
            )
    shape = [g.num_users, g.num_items, g.num_entities, g.num_relations]
    if meta.get("shape", shape) != shape:
        raise ConfigError(
            f"checkpoint was trained on graph shape {meta['shape']} (users, items, entities, relations), "
            f"this dataset has {shape}"
        )
    if dim is not None and dim != store.dim:
        raise ConfigError(f"dimension mismatch: checkpoint has d={store.dim}, requested d={dim}")
    config = dict(meta.get("config", {}))
    config["ablate"] = tuple(config.get("ablate", ()))
    cfg = TrainConfig(**config)
    if cfg.dim != store.dim:
        raise ConfigError(f"dimension mismatch: checkpoint config says d={cfg.dim}, tables have d={store.dim}")
    k = cfg.k if k is None else k
    report = evaluate(Recommender(store, g, cfg), prepared.split.eval, prepared.split.train, k=k)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "metrics_table.txt").write_text(format_table({"MGACL": report}), encoding="utf-8")
    return report


def parse_axis(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise ConfigError(f"axis {text!r} must look like name=v1,v2")
    key, values = text.split("=", 1)
    name = field_name(key)
    if name is None or name == "ablate":
        raise ConfigError(f"axis {key!r} is not a sweepable config field")
    items = [v for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"axis {key!r} has no values")
    try:
        return name, [coerce(name, v) for v in items]
    except ValueError:
        raise ConfigError(f"axis {key!r}: cannot parse values {values!r}") from None


def sweep_rows(axes: list, ablation_matrix: bool) -> list[tuple[str, dict]]:
    """Cartesian product of ``axes`` (and optionally the one-off ablation matrix)."""
    names = [name for name, _ in axes]
    grid = list(itertools.product(*[values for _, values in axes])) or [()]
    variants = ABLATION_MATRIX if ablation_matrix else [(None, None)]
    rows = []
    for combo in grid:
        for label, ablate in variants:
            overrides = dict(zip(names, combo))
            if ablate is not None:
                overrides["ablate"] = ablate
            parts = [f"{n}={v}" for n, v in zip(names, combo)]
            if label is not None:
                parts.append(label)
            rows.append((" ".join(parts) or "default", overrides))
    return rows


def aggregate(rows: list[dict], path: Path, axis_names: list[str], dataset: str):
    """Write ``sweep.csv``; a pure function of the run records."""
    metrics = ["auc", "acc", "f1", "recall_at_k", "ndcg_at_k"]
    header = ["run", "dataset", *axis_names, "ablate", *metrics, "status", "error"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            report = row.get("report") or {}
            writer.writerow(
                [row["run"], dataset]
                + [row["overrides"].get(n, "") for n in axis_names]
                + [",".join(row["config"].get("ablate", ())) or "none"]
                + [f"{report[m]:.6f}" if m in report else "" for m in metrics]
                + [row["status"], row.get("error", "")]
            )


# commands

def cmd_prepare(args) -> int:
    if args.fixture:
        base = fixture_dir()
        paths = [base / "interactions.tsv", base / "kg.tsv", base / "alignment.tsv"]
    else:
        missing = [n for n in ("interactions", "kg", "alignment") if getattr(args, n) is None]
        if missing:
            raise ConfigError(f"missing inputs: {', '.join('--' + m for m in missing)} (or use --fixture)")
        paths = [args.interactions, args.kg, args.alignment]
    prepared = prepare_files(
        *paths, threshold=args.threshold, k=args.kcore, eval_fraction=args.eval_fraction,
        neg_ratio=args.neg_ratio, seed=args.seed,
    )
    save_prepared(args.out, prepared)
    print(json.dumps(prepared.manifest["counts"], sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    path = train_run(cfg, args.data, args.out)
    print(f"checkpoint written to {path}")
    return 0


def cmd_eval(args) -> int:
    report = eval_run(args.checkpoint, args.data, args.out, k=args.k, dim=args.dim)
    print(format_table({"MGACL": report}), end="")
    return 0


def cmd_sweep(args) -> int:
    axes = [parse_axis(a) for a in args.axis or []]
    base = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, tables = [], {}
    for i, (label, overrides) in enumerate(sweep_rows(axes, args.ablation_matrix)):
        run_dir = out / f"run_{i:03d}"
        record = {"run": label, "overrides": overrides, "config": base.to_dict(), "status": "ok"}
        try:
            cfg = dataclasses.replace(base, **overrides).validate()
            record["config"] = cfg.to_dict()
            ckpt = train_run(cfg, args.data, run_dir)
            report = eval_run(ckpt, args.data, run_dir)
            record["report"] = dataclasses.asdict(report)
            tables[label] = report
        except Exception as exc:  # recorded, sweep continues
            log.error("run %s failed: %s", label, exc)
            record["status"] = "failed"
            record["error"] = f"{type(exc).__name__}: {exc}"
        records.append(record)
        print(f"[{i + 1}] {label}: {record['status']}", flush=True)
    aggregate(records, out / "sweep.csv", [n for n, _ in axes], Path(args.data).name)
    if tables:
        (out / "metrics_table.txt").write_text(format_table(tables), encoding="utf-8")
    failed = sum(r["status"] != "ok" for r in records)
    if failed:
        print(f"{failed} of {len(records)} runs failed", file=sys.stderr)
    return 1 if failed else 0


def add_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model and training")
    g.add_argument("--config", help="flat key = value config file (flags override it)")
    g.add_argument("--lp", help="user preference hops l_p")
    g.add_argument("--lh", help="item tree depth l_h")
    g.add_argument("--M", help="preference-set size per hop")
    g.add_argument("--N", help="neighbors per item-tree node")
    g.add_argument("--temp", help="contrastive temperature")
    g.add_argument("--lambda1", help="contrastive loss weight")
    g.add_argument("--lambda2", help="L2 weight")
    g.add_argument("--dim", help="embedding size")
    g.add_argument("--lr", help="Adam learning rate")
    g.add_argument("--batch", help="batch size")
    g.add_argument("--epochs")
    g.add_argument("--seed")
    g.add_argument("--drop-prob", help="feature dropout for the inter-level views")
    g.add_argument("--neg-ratio")
    g.add_argument("--ablate", nargs="*", help="components to switch off: rv ev gcn cl")
    g.add_argument("--k", help="cut-off for Recall@k / NDCG@k")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgacl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"mgacl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse, filter and split raw files into a cache")
    p.add_argument("--interactions")
    p.add_argument("--kg")
    p.add_argument("--alignment")
    p.add_argument("--fixture", action="store_true", help="use the bundled tiny dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=4.0, help="ratings >= threshold are positive")
    p.add_argument("--kcore", type=int, default=20)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.add_argument("--neg-ratio", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared dataset")
    p.add_argument("--data", required=True, help="directory written by prepare")
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--dim", type=int, help="expected embedding size (checked against the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid of train+eval runs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", action="append", help="name=v1,v2 (repeatable)")
    p.add_argument("--ablation-matrix", action="store_true", help="full model plus each one-off ablation")
    add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, AlignmentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MGACLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
