"""Command-line entry point: ``tgaml <command> ...``.

Exit status is 0 on success, 2 for configuration problems, 3 for bad or
missing data and 4 for any other failure. Errors are reported as one line on
stderr. ``TGAML_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence


from . import ConfigError, DataError, TgamlError, __version__
from . import autodiff as ad
from . import config as cfgmod
from .features import FeatureTable, NormalizationStats, assemble
from .graph import TemporalGraph, build_graph, file_digest, load_graph, save_graph, stratified_split
from .ingest import build_intermediate, parse_csv, write_intermediate
from .metrics import evaluate as evaluate_metrics
from .metrics import roc_curve, write_metrics_json, write_roc_csv
from .model import GraphInputs, Model
from .report import plot_history, plot_roc
from .synthgen import GenSpec, generate
from .trainer import Trainer

log = logging.getLogger("tgaml")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
THREADS_ENV = "TGAML_THREADS"
SPLIT_NAMES = ("train", "validation", "test")

GRAPH_FILE = "graph.bin"
SUMMARY_FILE = "summary.json"
SNAPSHOT_FILE = "config.snapshot"
STATS_FILE = "features.stats"


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# -- generate ------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> None:
    raw = {}
    if args.spec:
        try:
            text = Path(args.spec).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read spec {args.spec}: {exc.strerror}") from None
        raw = cfgmod.parse_text(text, args.spec)
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = GenSpec.from_config(raw)
    csv_path, labels = generate(spec, args.out, control=args.control)
    print(f"wrote {csv_path} and {labels}")


# -- ingest --------------------------------------------------------------------

def _ingest(csv_path: Path, out: Path, cfg: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    digest = file_digest(csv_path)
    cache = out / GRAPH_FILE
    parsed = parse_csv(csv_path, cfgmod.schema(cfg), cfg["ingest.timestamp_format"], cfg["ingest.lenient"])
    inter = build_intermediate(parsed.rows, drop_self=cfg["ingest.drop_self"])
    write_intermediate(inter, out)
    try:
        load_graph(cache, digest)
        log.info("graph cache %s is current", cache)
    except (OSError, DataError):
        save_graph(build_graph(inter.transactions, inter.accounts, inter.total_steps), cache, digest)
    summary = {**inter.summary(), "skipped_rows": parsed.skipped, "source": str(csv_path),
               "source_sha256": digest.hex()}
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_ingest(args: argparse.Namespace) -> None:
    cfg = cfgmod.load(args.config, args.set)
    s = _ingest(Path(args.csv), Path(args.out), cfg)
    print(f"{s['accounts']} accounts, {s['launderers']} launderers ({100 * s['launderer_fraction']:.2f}%), "
          f"{s['transactions']} transactions, {s['total_steps']} steps, {s['skipped_rows']} skipped rows")


# -- train / evaluate ----------------------------------------------------------

def load_data_graph(data_dir: str | Path) -> TemporalGraph:
    path = Path(data_dir) / GRAPH_FILE
    if not path.exists():
        raise DataError(f"{path} not found; run ingest first")
    return load_graph(path)


def splits_for(graph: TemporalGraph, cfg: dict) -> dict[str, TemporalGraph]:
    spec = cfgmod.split_spec(cfg)
    parts = stratified_split(graph, spec, cfg["split.fold"])
    return dict(zip(SPLIT_NAMES, parts))


def run_training(graph: TemporalGraph, cfg: dict, run_dir: Path) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_snapshot(cfg, run_dir / SNAPSHOT_FILE)
    parts = splits_for(graph, cfg)
    if "validation" not in parts:
        raise ConfigError("split.fractions needs at least a train and a validation part")
    pr = cfgmod.pagerank_params(cfg)
    train_table = assemble(parts["train"], **pr)
    train_table.normalization_stats.save(run_dir / STATS_FILE)
    val_table = assemble(parts["validation"], train_table.normalization_stats, **pr)
    mcfg = cfgmod.model_config(cfg)
    train = GraphInputs.build(parts["train"], train_table, mcfg.max_sequence_length)
    val = GraphInputs.build(parts["validation"], val_table, mcfg.max_sequence_length)
    model = Model.create(mcfg, train_table.node_features.shape[1], train_table.edge_features.shape[1], cfg["seed"])
    tcfg = cfgmod.train_config(cfg)
    result = Trainer(model, train, val, tcfg, cfgmod.loss_fn(cfg)).fit(run_dir)
    history = [json.loads(r.to_json()) for r in result.history]
    plot_history(history, run_dir / "history.png", tcfg.selection_metric)
    info = {"best_epoch": result.best_epoch, "best_score": result.best_score,
            "selection_metric": tcfg.selection_metric, "epochs_run": len(history),
            "stopped_early": result.stopped_early}
    (run_dir / "fit.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


def cmd_train(args: argparse.Namespace) -> None:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = cfgmod.load(args.config, overrides)
    graph = load_data_graph(args.data)
    info = run_training(graph, cfg, Path(args.run))
    print(f"best epoch {info['best_epoch']} of {info['epochs_run']}: "
          f"validation {info['selection_metric']} = {info['best_score']:.4f}")


def read_snapshot(run_dir: Path) -> dict:
    path = run_dir / SNAPSHOT_FILE
    if not path.exists():
        raise DataError(f"{path} not found; not a run directory")
    return cfgmod.resolve(cfgmod.parse_text(path.read_text(encoding="utf-8"), str(path)))


def load_run_model(run_dir: Path, cfg: dict, table: FeatureTable) -> Model:
    ckpt = run_dir / "best.ckpt"
    if not ckpt.exists():
        raise DataError(f"{ckpt} not found; train first")
    model = Model.create(cfgmod.model_config(cfg), table.node_features.shape[1],
                         table.edge_features.shape[1], cfg["seed"])
    state = ad.load_checkpoint(ckpt)
    model.params.load_state({k: v for k, v in state.items() if "@" not in k})
    return model


def run_evaluation(graph: TemporalGraph, run_dir: Path, split: str, threshold: float | None,
                   out_dir: Path) -> dict:
    cfg = read_snapshot(run_dir)
    parts = splits_for(graph, cfg)
    if split not in parts:
        raise ConfigError(f"split {split!r} not available with fractions {cfg['split.fractions']}")
    part = parts[split]
    stats = NormalizationStats.load(run_dir / STATS_FILE)
    table = assemble(part, stats, **cfgmod.pagerank_params(cfg))
    model = load_run_model(run_dir, cfg, table)
    inputs = GraphInputs.build(part, table, model.config.max_sequence_length)
    probs = model.predict(inputs)
    thr = cfg["train.threshold"] if threshold is None else threshold
    report = evaluate_metrics(probs, inputs.labels, thr)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_json(report, out_dir / "metrics.json")
    with (out_dir / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bank", "account", "label", "probability"])
        for (bank, acct), y, p in zip(part.keys, part.labels, probs):
            w.writerow([bank, acct, int(y), repr(float(p))])
    if report.roc_points:
        write_roc_csv(probs, inputs.labels, out_dir / "roc.csv")
        fpr, tpr, _ = roc_curve(probs, inputs.labels)
        plot_roc(fpr, tpr, report.auc, out_dir / "roc.png", title=f"ROC ({split})")
    return report.to_dict()


def cmd_evaluate(args: argparse.Namespace) -> None:
    if args.threshold is not None and not 0.0 <= args.threshold <= 1.0:
        raise ConfigError("--threshold must lie in [0, 1]")
    run_dir = Path(args.run)
    graph = load_data_graph(args.data)
    m = run_evaluation(graph, run_dir, args.split, args.threshold, Path(args.out) if args.out else run_dir)
    print(" ".join(f"{k}={m[k]:.4f}" for k in ("accuracy", "precision", "recall", "f1", "mcc", "auc")))


# -- inspect -------------------------------------------------------------------

def history_table(run_dir: Path) -> str:
    path = run_dir / "history.jsonl"
    if not path.exists():
        raise DataError(f"{path} not found; not a run directory")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    cols = ("loss", "f1", "mcc", "auc")
    best = None
    fit = run_dir / "fit.json"
    if fit.exists():
        best = json.loads(fit.read_text()).get("best_epoch")
    lines = ["epoch  phase1    phase2    " + "  ".join(f"val_{c:<6}" for c in cols) + "  seconds"]
    for r in rows:
        v = r["validation"]
        vals = "  ".join(f"{v.get(c, float('nan')):<10.4f}" for c in cols)
        mark = " *" if r["epoch"] == best else ""
        lines.append(f"{r['epoch']:<5}  {r['phase1_loss']:<8.4f}  {r['phase2_loss']:<8.4f}  {vals}  "
                     f"{r['wall_time']:.2f}{mark}")
    return "\n".join(lines)


def cmd_inspect(args: argparse.Namespace) -> None:
    print(history_table(Path(args.run)))


# -- plumbing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgaml", description="Temporal graph money-laundering detector")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic transaction corpus")
    g.add_argument("--spec", help="generator key = value file")
    g.add_argument("--out", required=True)
    g.add_argument("--control", action="store_true", help="shuffle the steps of laundering transactions")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("ingest", help="parse a transaction CSV into a cached graph")
    i.add_argument("--csv", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    i.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", help="fit a model on an ingested graph")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--run", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a trained run on one split")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=SPLIT_NAMES)
    e.add_argument("--threshold", type=float)
    e.add_argument("--out", help="output directory (default: the run directory)")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("inspect", help="print the training history of a run")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, OSError, UnicodeDecodeError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            args.func(args)
    except (TgamlError, OSError, UnicodeDecodeError, ValueError, ArithmeticError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"tgaml {args.command}: {msg}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
