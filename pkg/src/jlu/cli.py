"""Command line harness: data generation, training runs, evaluation and reports.

Run configs are JSON documents::

    {
      "version": 1,
      "experiment": "bias-removal",
      "seed": 1,
      "mode": "both",
      "output_dir": "runs",
      "data": {"rho": 0.8, "n_train": 4000},
      "train": {"base_lr": 0.1, "epochs": 400, "batch_size": 4000}
    }

Unknown keys anywhere in the document are rejected. ``data`` takes the
dataset recipe fields (or ``dataset_dir`` pointing at ``gen-data`` output),
``train`` the optimisation settings.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime or
data errors, 4 file system errors.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path


from . import __version__, datagen
from .autodiff import ContractError, DimensionError
from .datagen import DatasetParseError, LabeledDataset
from .experiments import EXPERIMENTS, DataBundle, DataConfig, build_data, build_spec, secondary_map
from .losses import DataError
from .metrics import (
    MetricsRecord,
    chance_level,
    export_embeddings,
    percent_unlearned,
)
from .model import CheckpointFormatError, ConfigurationError, NetworkBundle, checksum, load_bundle, save_bundle
from .trainer import InnerPolicy, TrainConfig, embed, evaluate, run_baseline, run_jlu

logger = logging.getLogger("jlu")

CONFIG_VERSION = 1
MODES = ("baseline", "jlu", "both")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

INCOMPLETE = ".incomplete"
LOCK = ".lock"
ARTIFACTS = ("config.json", "metrics.csv", "checkpoint.bin", "embeddings.csv", "summary.json")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {"version", "experiment", "seed", "mode", "output_dir", "data", "train"}
_DATA_KEYS = {f.name for f in dataclasses.fields(DataConfig)} - {"preset"} | {"dataset_dir"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_INNER_KEYS = {f.name for f in dataclasses.fields(InnerPolicy)}


@dataclasses.dataclass
class RunConfig:
    experiment: str
    seed: int
    mode: str
    output_dir: str
    data: DataConfig
    train: TrainConfig
    dataset_dir: str | None = None

    def resolved(self, mode: str | None = None) -> dict:
        """Every setting with defaults filled in; enough to reproduce a run."""
        data = dataclasses.asdict(self.data)
        data.pop("preset")
        if self.dataset_dir is not None:
            data = {"dataset_dir": self.dataset_dir}
        train = dataclasses.asdict(self.train)
        train.pop("seed")
        train["hidden"] = list(train["hidden"])
        train["frozen_layers"] = list(train["frozen_layers"])
        return {
            "version": CONFIG_VERSION,
            "experiment": self.experiment,
            "seed": self.seed,
            "mode": mode or self.mode,
            "data": data,
            "train": train,
        }


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise CliError(f"config key {where!r} must be an object", EXIT_CONFIG)
    unknown = sorted(set(section) - allowed)
    if unknown:
        prefix = f"{where}." if where else ""
        raise CliError(f"unknown config key {prefix + unknown[0]!r}; allowed: {sorted(allowed)}", EXIT_CONFIG)


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document completely before anything runs."""
    _reject_unknown(doc, _TOP_KEYS, "")
    if doc.get("version") != CONFIG_VERSION:
        raise CliError(f"config key 'version' must be {CONFIG_VERSION}, got {doc.get('version')!r}", EXIT_CONFIG)
    experiment = doc.get("experiment", "bias-removal")
    if experiment not in EXPERIMENTS:
        raise CliError(f"config key 'experiment' must be one of {EXPERIMENTS}, got {experiment!r}", EXIT_CONFIG)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise CliError(f"config key 'seed' must be a nonnegative integer, got {seed!r}", EXIT_CONFIG)
    mode = doc.get("mode", "both")
    if mode not in MODES:
        raise CliError(f"config key 'mode' must be one of {MODES}, got {mode!r}", EXIT_CONFIG)
    output_dir = doc.get("output_dir", "runs")
    if not isinstance(output_dir, str):
        raise CliError("config key 'output_dir' must be a string", EXIT_CONFIG)

    data_doc = dict(doc.get("data", {}))
    _reject_unknown(data_doc, _DATA_KEYS, "data")
    dataset_dir = data_doc.pop("dataset_dir", None)
    if dataset_dir is not None and data_doc:
        raise CliError(f"config key 'data.{sorted(data_doc)[0]}' cannot be combined with 'data.dataset_dir'", EXIT_CONFIG)
    try:
        data = DataConfig(preset=experiment, **data_doc)
        if dataset_dir is None:
            build_spec(data)
    except (ConfigurationError, TypeError, ValueError, KeyError) as exc:
        raise CliError(f"invalid 'data' section: {exc}", EXIT_CONFIG) from exc
    for key in ("n_train", "n_test", "n_secondary"):
        value = getattr(data, key)
        if not isinstance(value, int) or value < 1:
            raise CliError(f"config key 'data.{key}' must be a positive integer, got {value!r}", EXIT_CONFIG)

    train_doc = dict(doc.get("train", {}))
    _reject_unknown(train_doc, _TRAIN_KEYS, "train")
    inner_doc = train_doc.pop("inner", {})
    _reject_unknown(inner_doc, _INNER_KEYS, "train.inner")
    try:
        for key in ("hidden", "frozen_layers"):
            if key in train_doc:
                train_doc[key] = tuple(train_doc[key])
        train = TrainConfig(seed=seed, inner=InnerPolicy(**inner_doc), **train_doc)
        train.validate()
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise CliError(f"invalid 'train' section: {exc}", EXIT_CONFIG) from exc
    if train.epochs < 1:
        raise CliError("config key 'train.epochs' must be at least 1", EXIT_CONFIG)
    return RunConfig(experiment, seed, mode, output_dir, data, train, dataset_dir)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})", EXIT_CONFIG) from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object", EXIT_CONFIG)
    return parse_config(doc)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
SPLITS = ("train", "test", "secondary")


def write_data(data: DataBundle, cfg: RunConfig, out_dir: Path, force: bool) -> list[Path]:
    paths = [out_dir / f"{s}.csv" for s in SPLITS] + [out_dir / MANIFEST]
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise CliError(f"{existing[0]} exists; pass --force to overwrite", EXIT_IO)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, ds in zip(SPLITS, (data.train, data.test, data.secondary)):
        datagen.export_dataset(ds, out_dir / f"{split}.csv")
    manifest = {
        "version": CONFIG_VERSION,
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "primary": data.train.primary_name,
        "class_counts": data.train.class_counts,
        "spec": data.spec.to_dict(),
        "data": cfg.resolved()["data"],
        "sizes": {s: len(ds) for s, ds in zip(SPLITS, (data.train, data.test, data.secondary))},
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def _manifest_for(csv_path: Path) -> dict | None:
    path = csv_path.parent / MANIFEST
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: not valid JSON ({exc})", EXIT_RUNTIME) from exc


def read_dataset(path, class_counts: dict | None = None, primary_name: str | None = None) -> LabeledDataset:
    """Import a dataset CSV, taking names and class counts from a sibling manifest if present."""
    path = Path(path)
    if not path.exists():
        raise CliError(f"dataset {path} does not exist", EXIT_IO)
    manifest = _manifest_for(path)
    counts = dict(class_counts or {})
    if manifest is not None:
        counts = {**counts, **manifest["class_counts"]}
        primary_name = manifest["primary"]
    return datagen.import_dataset(path, counts or None, primary_name or "primary")


def load_data(cfg: RunConfig) -> DataBundle:
    if cfg.dataset_dir is None:
        return build_data(cfg.data, cfg.seed)
    root = Path(cfg.dataset_dir)
    manifest = _manifest_for(root / "train.csv")
    if manifest is None:
        raise CliError(f"{root / MANIFEST} not found", EXIT_IO)
    splits = [read_dataset(root / f"{s}.csv") for s in SPLITS]
    return DataBundle(datagen.SyntheticSpec.from_dict(manifest["spec"]), *splits)


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


def metrics_header(record: MetricsRecord) -> list[str]:
    header = ["epoch", "primary_acc", "primary_adj_acc", "loss_primary", "loss_confusion"]
    for task in record.probes:
        header += [f"probe_acc_{task}", f"rescaled_{task}"]
    return header + [f"kl_{name}" for name in record.kl]


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def metrics_csv(history: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if history:
        w.writerow(metrics_header(history[0]))
    for rec in history:
        w.writerow([rec.epoch] + [_fmt(v) for v in rec.values()])
    return buf.getvalue()


def summarize(rec: MetricsRecord, data: LabeledDataset) -> dict:
    return {
        "epoch": rec.epoch,
        "primary_acc": rec.primary_accuracy,
        "primary_adj_acc": rec.primary_adjacent_accuracy,
        "loss_primary": rec.loss_primary,
        "loss_confusion": rec.loss_confusion,
        "probes": {
            task: {
                "probe_acc": p.probe_accuracy,
                "rescaled": p.rescaled_score,
                "chance": chance_level(data.class_counts[task]),
            }
            for task, p in rec.probes.items()
        },
        "kl": dict(rec.kl),
    }


def _acquire(lock: Path) -> None:
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise CliError(f"{lock.parent} is locked by another run (remove {lock} if stale)", EXIT_RUNTIME) from exc
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")


def train_one(cfg: RunConfig, mode: str, data: DataBundle, out_root: Path, force: bool) -> tuple[Path, dict]:
    """Train one network into its run directory and return (run_dir, summary)."""
    resolved = cfg.resolved(mode)
    digest = config_hash(resolved)
    run_dir = out_root / f"{cfg.experiment}-{cfg.seed}-{digest[:8]}"
    snapshot = run_dir / "config.json"
    if snapshot.exists():
        try:
            previous = json.loads(snapshot.read_text())
        except json.JSONDecodeError:
            previous = None
        if previous is None or config_hash(previous) != digest:
            raise CliError(f"{run_dir} holds a different config; refusing to resume", EXIT_CONFIG)
        complete = not (run_dir / INCOMPLETE).exists() and all((run_dir / a).exists() for a in ARTIFACTS)
        if complete and not force:
            logger.info("%s is complete; nothing to do", run_dir)
            return run_dir, json.loads((run_dir / "summary.json").read_text())

    run_dir.mkdir(parents=True, exist_ok=True)
    if force:
        (run_dir / LOCK).unlink(missing_ok=True)
    _acquire(run_dir / LOCK)
    try:
        (run_dir / INCOMPLETE).write_text("")
        snapshot.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        train_cfg = copy.deepcopy(cfg.train)
        if mode == "jlu":
            bundle, history = run_jlu(train_cfg, data.train, secondary_map(data), data.test)
        else:
            bundle, history = run_baseline(train_cfg, data.train, data.test)
        (run_dir / "metrics.csv").write_text(metrics_csv(history))
        save_bundle(bundle, run_dir / "checkpoint.bin")
        _export(bundle, data.test, run_dir / "embeddings.csv")
        summary = {
            "mode": mode,
            "experiment": cfg.experiment,
            "seed": cfg.seed,
            "config_hash": digest,
            "data_hash": config_hash({"seed": cfg.seed, "data": resolved["data"], "experiment": cfg.experiment}),
            "checkpoint_sha256": checksum(bundle.all_params()),
            "primary_task": data.train.primary_name,
            "bayes_primary_acc": datagen.bayes_oracle_accuracy(data.spec, data.spec.task_names[0], "test"),
            "final": summarize(history[-1], data.test),
        }
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (run_dir / INCOMPLETE).unlink()
    finally:
        (run_dir / LOCK).unlink(missing_ok=True)
    return run_dir, summary


def _export(bundle: NetworkBundle, data: LabeledDataset, path: Path) -> None:
    if bundle.extractor.input_dim != data.x.shape[1]:
        raise DimensionError(f"checkpoint expects {bundle.extractor.input_dim} features, dataset has {data.x.shape[1]}")
    export_embeddings(path, embed(bundle, data.x), data.primary_labels, data.spurious_labels)


def summary_line(run_dir: Path, summary: dict) -> str:
    final = summary["final"]
    probes = " ".join(f"probe_{t}={p['probe_acc']:.4f}" for t, p in final["probes"].items())
    return f"{summary['mode']:8s} {run_dir.name}: primary_acc={final['primary_acc']:.4f} {probes}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.dataset_dir is not None:
        raise CliError("gen-data needs a generative 'data' section, not 'data.dataset_dir'", EXIT_CONFIG)
    data = build_data(cfg.data, cfg.seed)
    for path in write_data(data, cfg, Path(args.out), args.force):
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_root = Path(args.output_dir or cfg.output_dir)
    data = load_data(cfg)
    modes = ("baseline", "jlu") if cfg.mode == "both" else (cfg.mode,)
    for mode in modes:
        run_dir, summary = train_one(cfg, mode, data, out_root, args.force)
        print(summary_line(run_dir, summary))
    return EXIT_OK


def _eval_report(bundle: NetworkBundle, data: LabeledDataset, tasks: list[str], seed: int) -> MetricsRecord:
    if bundle.extractor.input_dim != data.x.shape[1]:
        raise CliError(
            f"checkpoint expects {bundle.extractor.input_dim} features, dataset has {data.x.shape[1]}", EXIT_CONFIG
        )
    if bundle.primary_head.n_classes < data.class_counts[data.primary_name]:
        raise CliError("dataset has more primary classes than the checkpoint's head", EXIT_CONFIG)
    return evaluate(bundle, data, epoch=0, probe_seed=seed, probe_tasks=tasks)


def _checkpoint(path) -> NetworkBundle:
    if not Path(path).exists():
        raise CliError(f"checkpoint {path} does not exist", EXIT_IO)
    return load_bundle(path)


def _dataset_for(bundle: NetworkBundle, path) -> LabeledDataset:
    counts = {bundle.arch.primary.name: bundle.arch.primary.n_classes}
    counts.update({t.name: t.n_classes for t in bundle.arch.secondary})
    return read_dataset(path, counts, bundle.arch.primary.name)


def cmd_eval(args) -> int:
    bundle = _checkpoint(args.checkpoint)
    data = _dataset_for(bundle, args.dataset)
    tasks = args.probe if args.probe else data.task_names
    missing = [t for t in tasks if t not in data.spurious_labels]
    if missing:
        raise CliError(f"dataset {args.dataset} has no labels for task {missing[0]!r}", EXIT_CONFIG)
    rec = _eval_report(bundle, data, tasks, args.seed)
    report = summarize(rec, data)
    report.pop("epoch")
    report.pop("loss_primary")
    report.pop("loss_confusion")
    if args.baseline:
        base = _eval_report(_checkpoint(args.baseline), data, tasks, args.seed)
        for task, entry in report["probes"].items():
            entry["baseline_probe_acc"] = base.probes[task].probe_accuracy
            entry["percent_unlearned"] = percent_unlearned(base.probes[task].rescaled_score, entry["rescaled"])
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    bundle = _checkpoint(args.checkpoint)
    data = _dataset_for(bundle, args.dataset)
    try:
        _export(bundle, data, Path(args.out))
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    print(args.out)
    return EXIT_OK


REPORT_COLUMNS = [
    "run", "mode", "experiment", "seed", "primary_acc", "task", "probe_acc", "chance", "rescaled", "percent_unlearned",
]


def report_rows(run_dirs: list[Path]) -> list[dict]:
    runs = []
    for run_dir in run_dirs:
        if (run_dir / INCOMPLETE).exists() or not (run_dir / "summary.json").exists():
            logger.warning("skipping incomplete run %s", run_dir)
            continue
        runs.append((run_dir, json.loads((run_dir / "summary.json").read_text())))
    baselines = {s["data_hash"]: s for _, s in runs if s["mode"] == "baseline"}
    rows = []
    for run_dir, s in runs:
        base = baselines.get(s["data_hash"]) if s["mode"] == "jlu" else None
        for task, p in s["final"]["probes"].items():
            pu = None
            if base is not None and task in base["final"]["probes"]:
                pu = percent_unlearned(base["final"]["probes"][task]["rescaled"], p["rescaled"])
            rows.append(
                {
                    "run": run_dir.name,
                    "mode": s["mode"],
                    "experiment": s["experiment"],
                    "seed": s["seed"],
                    "primary_acc": f"{s['final']['primary_acc']:.4f}",
                    "task": task,
                    "probe_acc": f"{p['probe_acc']:.4f}",
                    "chance": f"{p['chance']:.4f}",
                    "rescaled": f"{p['rescaled']:.4f}",
                    "percent_unlearned": "" if pu is None else f"{pu:.1f}",
                }
            )
    return rows


def render_table(rows: list[dict]) -> str:
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in REPORT_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in REPORT_COLUMNS))
    lines += ["  ".join(str(r[c]).ljust(widths[c]) for c in REPORT_COLUMNS) for r in rows]
    return "\n".join(lines)


def cmd_report(args) -> int:
    rows = report_rows([Path(p) for p in args.run_dirs])
    if not rows:
        raise CliError("no completed runs to report", EXIT_RUNTIME)
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.csv:
        try:
            Path(args.csv).write_text(buf.getvalue())
        except OSError as exc:
            raise CliError(f"cannot write {args.csv}: {exc}", EXIT_IO) from exc
    print(buf.getvalue() if args.format == "csv" else render_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jlu", description="Joint learning and unlearning experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/test/secondary CSVs and a manifest")
    p.add_argument("config")
    p.add_argument("out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train baseline and/or JLU networks")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override the config's output_dir")
    p.add_argument("--force", action="store_true", help="retrain complete runs and clear stale locks")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy, probes and group KL of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="dataset CSV")
    p.add_argument("--probe", nargs="+", metavar="TASK", help="spurious tasks to probe (default: all)")
    p.add_argument("--baseline", metavar="CHECKPOINT", help="baseline checkpoint for %%-unlearned")
    p.add_argument("--seed", type=int, default=0, help="probe split seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="write PCA and raw embeddings of a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("out")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("report", help="compare completed runs, one row per (run, task)")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--csv", help="also write the CSV table here")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetParseError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
