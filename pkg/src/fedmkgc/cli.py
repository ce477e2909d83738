"""Command line harness: partition, train, eval and ablate."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import ExperimentConfig, from_dict, load_config, with_override
from .dataset import (
    ConfigError,
    MultimodalKG,
    build_federation,
    load_features,
    load_triples,
    read_partition,
    synth_features,
    synth_kg,
    write_partition,
)
from .fedproto import (
    build_clients,
    evaluate_clients,
    load_state_dict,
    quantize_state,
    read_checkpoint,
    save_checkpoint,
    train_until_stop,
    warmstart_structural,
)
from .kge import RankingMetrics

log = logging.getLogger("fedmkgc")

CSV_COLUMNS = ["round", "client_id", "split", "hits1", "hits3", "hits10", "mrr", "wall_seconds"]
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


# data ---------------------------------------------------------------------------


def build_graph(cfg: ExperimentConfig) -> MultimodalKG:
    data = cfg.data
    if data.synthetic is not None:
        s = data.synthetic
        kg = synth_kg(s.num_entities, s.num_relations, s.num_triples, s.latent_dim, s.num_types, s.temperature, cfg.seed)
        return synth_features(kg, s.d_v, s.d_d, s.variants_per_entity, cfg.seed, s.feature_noise)
    kg = load_triples(data.triples)
    if data.features_v is not None:
        for m, path in (("v", data.features_v), ("d", data.features_d)):
            feats = load_features(path, kg.num_entities)
            kg.feature_variants[m] = [feats[i:i + 1] for i in range(kg.num_entities)]
    return kg


def load_federation(cfg: ExperimentConfig):
    """(num_global_entities, shards) from a partition directory or by building one."""
    if cfg.data.partition_dir is not None:
        manifest, shards = read_partition(cfg.data.partition_dir)
        return manifest["num_entities"], shards
    kg = build_graph(cfg)
    return kg.num_entities, build_federation(kg, cfg.partition_config())


# metric rows ----------------------------------------------------------------------


def metric_row(round_: int, client, split: str, m: RankingMetrics, wall: float) -> dict:
    return {
        "round": round_,
        "client_id": client,
        "split": split,
        "hits1": f"{m.hits1:.6f}",
        "hits3": f"{m.hits3:.6f}",
        "hits10": f"{m.hits10:.6f}",
        "mrr": f"{m.mrr:.6f}",
        "wall_seconds": f"{wall:.3f}",
    }


def metric_rows(round_: int, per_client, agg, split: str, wall: float) -> list[dict]:
    rows = [metric_row(round_, i, split, m, wall) for i, m in enumerate(per_client)]
    rows.append(metric_row(round_, "aggregate", split, agg, wall))
    return rows


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def format_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["client_id", "split", "hits1", "hits3", "hits10", "mrr"]
    buf.write("  ".join(f"{c:>10}" for c in cols) + "\n")
    for r in rows:
        buf.write("  ".join(f"{str(r[c]):>10}" for c in cols) + "\n")
    return buf.getvalue()


def run_manifest(cfg: ExperimentConfig, extra: dict | None = None) -> dict:
    doc = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    doc.update(extra or {})
    return doc


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# commands ----------------------------------------------------------------------------


def cmd_partition(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.data.partition_dir is not None:
        raise ConfigError("partition needs a synthetic or file data source, not partition_dir")
    kg = build_graph(cfg)
    shards = build_federation(kg, cfg.partition_config())
    manifest = write_partition(out, kg, cfg.partition_config(), shards)
    log.info("wrote %d clients to %s", len(shards), out)
    return manifest


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    """Train until early stop; write metrics.csv, checkpoint/ and run.json under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    tcfg = cfg.training_config()
    num_global, shards = load_federation(cfg)
    server, clients = build_clients(shards, num_global, tcfg)
    start = time.perf_counter()

    def wall() -> float:
        return time.perf_counter() - start if cfg.record_wall_time else 0.0

    rows: list[dict] = []
    metric_log: list[dict] = []
    summary = {"best_round": 0, "rounds_run": 0, "best_valid_mrr": None, "test": None}
    if tcfg.rounds > 0:
        if tcfg.warmstart_rounds:
            warmstart_structural(clients, server, tcfg.warmstart_rounds, tcfg)

        def on_round(ro, per, agg):
            rows.extend(metric_rows(ro, per, agg, "valid", wall()))
            metric_log.append({"round": ro, "valid_mrr": agg.mrr})
            log.info("round %d valid mrr %.4f", ro, agg.mrr)

        result = train_until_stop(server, clients, tcfg, on_round)
        quantize_state(server, clients)
        per, agg = evaluate_clients(clients, "test", cfg.seed)
        rows.extend(metric_rows(result.best_round, per, agg, "test", wall()))
        summary = {
            "best_round": result.best_round,
            "rounds_run": result.rounds_run,
            "best_valid_mrr": result.best_valid_mrr,
            "test": agg.as_dict(),
        }
    write_csv(out / "metrics.csv", rows)
    ckpt_manifest = {"seed": cfg.seed, "config_hash": cfg.config_hash(), "metric_log": metric_log,
                     "best_round": summary["best_round"]}
    server.round = summary["best_round"]
    save_checkpoint(out / "checkpoint", server, clients, ckpt_manifest)
    _write_json(out / "run.json", run_manifest(cfg, {"summary": summary}))
    return summary


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path, out: Path | None) -> list[dict]:
    doc, state = read_checkpoint(checkpoint)
    if doc.get("config_hash") != cfg.config_hash():
        raise ConfigError(f"checkpoint was written for config {doc.get('config_hash')}, this config is {cfg.config_hash()}")
    tcfg = cfg.training_config()
    num_global, shards = load_federation(cfg)
    server, clients = build_clients(shards, num_global, tcfg)
    load_state_dict(server, clients, state)
    per, agg = evaluate_clients(clients, "test", cfg.seed)
    rows = metric_rows(int(doc.get("best_round", doc["round"])), per, agg, "test", 0.0)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "eval.csv", rows)
    sys.stdout.write(format_table(rows))
    return rows


def parse_sweep(doc) -> list[tuple[str, list]]:
    if not isinstance(doc, dict):
        raise ConfigError("sweep must be an object mapping dotted keys to value lists")
    axes = []
    for key, values in doc.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep axis {key!r} needs a non-empty list of values")
        axes.append((key, values))
    return axes


def cmd_ablate(cfg: ExperimentConfig, sweep: dict, out: Path) -> list[dict]:
    """One training run per grid point; consolidated ablation.csv keyed by the swept values."""
    axes = parse_sweep(sweep)
    keys = [k for k, _ in axes]
    points = list(itertools.product(*[v for _, v in axes]))
    # validate the whole grid before running anything
    configs = []
    for point in points:
        c = cfg
        for key, value in zip(keys, point):
            c = with_override(c, key, value)
        configs.append(c)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, (point, c) in enumerate(zip(points, configs)):
        summary = cmd_train(c, out / f"run_{i}")
        test = summary["test"] or {}
        row = {k: v for k, v in zip(keys, point)}
        row.update({
            "run": f"run_{i}",
            "best_round": summary["best_round"],
            "valid_mrr": "" if summary["best_valid_mrr"] is None else f"{summary['best_valid_mrr']:.6f}",
            **{m: f"{test[m]:.6f}" if m in test else "" for m in ("hits1", "hits3", "hits10", "mrr")},
        })
        results.append(row)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        cols = keys + ["run", "best_round", "valid_mrr", "hits1", "hits3", "hits10", "mrr"]
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(results)
    return results


# entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmkgc", description="Federated multimodal KG completion experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("partition", "train", "eval", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="root seed, overrides the config")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "ablate":
            p.add_argument("--sweep", type=Path, help="JSON object of dotted key -> list of values")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = with_override(cfg, "seed", args.seed)
    return cfg


def _output_dir(args, cfg: ExperimentConfig) -> Path | None:
    if args.out is not None:
        return args.out
    return Path(cfg.output_dir) if cfg.output_dir else None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve_config(args)
        out = _output_dir(args, cfg)
        if args.command != "eval" and out is None:
            raise ConfigError("an output directory is required (--out or output_dir)")
        sweep = {}
        if args.command == "ablate" and args.sweep is not None:
            try:
                sweep = json.loads(args.sweep.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read sweep {args.sweep}: {exc}") from exc
            parse_sweep(sweep)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "partition":
            cmd_partition(cfg, out)
        elif args.command == "train":
            summary = cmd_train(cfg, out)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, out)
        else:
            cmd_ablate(cfg, sweep, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code carries the failure class
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
