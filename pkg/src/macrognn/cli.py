"""``macrognn`` command line.

Every subcommand reads an optional flat ``key=value`` config file
(``--config``) and applies overrides on top of it, either as ``--set key=value``
(repeatable) or through the dedicated flags listed in ``--help``. See
:mod:`macrognn.config` for the key schema.

Subcommands
    generate      write a synthetic SBM graph to ``--graph-out``
    partition     write per-rank ownership dumps to ``out_dir/partitions``
    build-cache   build aggregation-cache files ``out_dir/cache_rank<r>.bin``
    train         train and write ``metrics.txt``, ``report.txt``, ``checkpoint.bin``
    evaluate      test accuracy of ``--checkpoint``
    report        table plus cost-model check for an existing ``metrics.txt``

Environment
    MACROGNN_THREADS   worker threads per rank for subgraph assembly (default 1)
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .agg_cache import MODEL_AGGREGATOR, CacheConfigError, build_cache, save_cache
from .config import RunConfig
from .graph_store import GraphBoundsError, GraphFormatError, DimensionError, ValidationError
from .netsim import Fabric, RankFailure, run_ranks
from .nn.layers import LayerConfigError
from .nn.model import save_checkpoint
from .partitioner import PartitionError, partition_all, write_partition_dump
from .report import epoch_lines, format_table, model_check, parse_metrics
from .sampler import AssemblyError
from .sbm import SBMConfigError, write_graph_files
from .trainer import ConfigError, evaluate_distributed, train_distributed

log = logging.getLogger("macrognn")

# dedicated flag -> config key
_FLAG_KEYS = {
    "num_ranks": "num_ranks",
    "epochs": "epochs",
    "layer": "layer",
    "fans": "fans",
    "minibatch_size": "minibatch_size",
    "macrobatch_size": "macrobatch_size",
    "feature_round": "feature_round",
    "use_cache": "use_cache",
    "rng_root": "rng_root",
    "out_dir": "out_dir",
    "graph_dir": "graph_dir",
    "policy": "policy",
}

USER_ERRORS = (ConfigError, CacheConfigError, SBMConfigError, PartitionError, GraphFormatError,
               GraphBoundsError, DimensionError, ValidationError, LayerConfigError, AssemblyError,
               FileNotFoundError)


def _load(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for attr, key in _FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = str(val)
    return RunConfig.load(args.config, overrides)


def cmd_generate(args) -> int:
    rc = _load(args)
    if rc.sbm_spec() is None:
        raise ConfigError("generate needs sbm.* keys (e.g. --set sbm.seed=7)")
    g = rc.load_graph()
    paths = write_graph_files(args.graph_out, g)
    print(f"wrote {g.num_vertices} vertices, {g.num_edges} edges, dim {g.feature_dim} to {paths['edges'].parent}")
    return 0


def cmd_partition(args) -> int:
    rc = _load(args)
    g = rc.load_graph()
    out = rc.out_dir / "partitions"
    out.mkdir(parents=True, exist_ok=True)
    for p in partition_all(g, rc.num_ranks, rc.policy, rc.partition_seed, rc.direction):
        path = out / f"rank{p.rank}.txt"
        write_partition_dump(path, p)
        print(f"rank={p.rank} owned={p.num_owned} local_edges={p.num_local_edges} -> {path}")
    return 0


def cmd_build_cache(args) -> int:
    rc = _load(args)
    g = rc.load_graph()
    tc = rc.train_config(g)
    kind = MODEL_AGGREGATOR.get(tc.model.kind)
    if kind is None:
        raise ConfigError(f"layer {tc.model.kind!r} has no cache aggregator")
    parts = partition_all(g, rc.num_ranks, rc.policy, rc.partition_seed, rc.direction)
    fabric = Fabric(rc.num_ranks)
    rc.out_dir.mkdir(parents=True, exist_ok=True)

    def body(rank):
        cache = build_cache(fabric, parts[rank], kind)
        save_cache(rc.out_dir / f"cache_rank{rank}.bin", cache)
        return cache

    for cache in run_ranks(fabric, body):
        c = fabric.snapshot_counters(cache.rank)
        print(f"rank={cache.rank} kind={cache.kind} rows={cache.rows.shape[0]} "
              f"payload_bytes={c.payload_bytes} seconds.build={cache.build_seconds:.6f}")
    return 0


def cmd_train(args) -> int:
    rc = _load(args)
    g = rc.load_graph()
    tc = rc.train_config(g)
    out = rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    result = train_distributed(g, rc.num_ranks, tc, rc.policy, rc.partition_seed, rc.direction)
    lines = ["# keys under seconds. are wall-clock timings and are not reproducible"]
    for epoch in range(tc.epochs):
        for rank in range(rc.num_ranks):
            lines += epoch_lines(result.reports[rank][epoch])
    text = "\n".join(lines) + "\n"
    (out / "metrics.txt").write_text(text)
    metrics = parse_metrics(text)
    check, mismatches = model_check(metrics)
    report = format_table(metrics) + "\n\n" + check + "\n"
    (out / "report.txt").write_text(report)
    save_checkpoint(out / "checkpoint.bin", result.models[0])
    print(format_table(metrics))
    print(f"final test accuracy {result.final_accuracy:.4f}")
    print(f"wrote {out / 'metrics.txt'}, {out / 'report.txt'}, {out / 'checkpoint.bin'}")
    if mismatches:
        print(f"{len(mismatches)} cost-model mismatches, see report.txt", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    rc = _load(args)
    g = rc.load_graph()
    tc = rc.train_config(g)
    acc = evaluate_distributed(g, rc.num_ranks, tc, args.checkpoint, rc.policy, rc.partition_seed, rc.direction)
    print(f"test_accuracy={acc:.6f}")
    return 0


def cmd_report(args) -> int:
    metrics = parse_metrics(Path(args.metrics).read_text())
    check, mismatches = model_check(metrics)
    print(format_table(metrics))
    print()
    print(check)
    if mismatches:
        print(f"{len(mismatches)} mismatches", file=sys.stderr)
        return 1 if args.strict else 0
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="macrognn", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--graph-dir", dest="graph_dir", help="directory written by 'generate'")
        p.add_argument("--num-ranks", dest="num_ranks", type=int)
        p.add_argument("--policy", choices=("hash", "modulo"))
        p.add_argument("--out-dir", dest="out_dir")
        return p

    def training(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--layer", choices=("sage", "gcn", "gin"))
        p.add_argument("--fans", help="comma list, outermost layer first, e.g. 15,10,5")
        p.add_argument("--minibatch-size", dest="minibatch_size", type=int)
        p.add_argument("--macrobatch-size", dest="macrobatch_size", help="B, an integer or 'all'")
        p.add_argument("--feature-round", dest="feature_round", help="F, an integer or 'all' (= B)")
        p.add_argument("--use-cache", dest="use_cache", action="store_const", const="true")
        p.add_argument("--rng-root", dest="rng_root", type=int)
        return p

    p = common(sub.add_parser("generate", help="write a synthetic SBM graph"))
    p.add_argument("--graph-out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("partition", help="write per-rank partition dumps"))
    p.set_defaults(func=cmd_partition)

    p = training(common(sub.add_parser("build-cache", help="build aggregation-cache files")))
    p.set_defaults(func=cmd_build_cache)

    p = training(common(sub.add_parser("train", help="train and write metrics, report, checkpoint")))
    p.set_defaults(func=cmd_train)

    p = training(common(sub.add_parser("evaluate", help="test accuracy of a checkpoint")))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="format an existing metrics.txt")
    p.add_argument("metrics", help="path to metrics.txt")
    p.add_argument("--strict", action="store_true", help="exit 1 when any prediction mismatches")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RankFailure as exc:
        print(f"error: rank {exc.rank} phase {exc.phase}: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
