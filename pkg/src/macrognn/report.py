"""Metrics line protocol, human-readable tables, and the cost-model check.

Every metric is one line of space-separated ``key=value`` tokens; the last
token is the metric, the others are labels::

    rank=0 epoch=2 relays=7
    rank=0 epoch=2 seconds.topo=0.0132      # wall-clock, not reproducible

Keys under ``seconds.`` are timings and vary run to run; every other key is
deterministic for a fixed configuration and seeds.
"""

from __future__ import annotations

import math
from collections import defaultdict

from .trainer import PHASES, EpochReport

HEADLINE_EPOCH = 2   # third epoch, zero-based


def epoch_lines(rep: EpochReport) -> list[str]:
    lab = {"rank": rep.rank, "epoch": rep.epoch}
    pre = f"rank={rep.rank} epoch={rep.epoch}"
    out = [f"{pre} seconds.{p}={rep.seconds[p]:.6f}" for p in PHASES]
    out.append(f"{pre} loss={rep.loss:.9g}")
    out.append(f"{pre} minibatches={rep.minibatches}")
    if rep.test_accuracy is not None:
        out.append(f"{pre} test_accuracy={rep.test_accuracy:.6f}")
    out.append(f"{pre} param_hash={rep.param_hash}")
    out += rep.counters.to_lines(**lab)
    t = rep.terms
    scalars = {
        "M": t.minibatches, "B": t.B, "F": t.F, "L": t.sampled_layers, "macrobatches": t.macrobatches,
        "feature_rounds": t.feature_rounds, "S": t.feature_bytes, "num_ranks": t.num_ranks,
        "sum_fi": t.sum_fi, "sum_fi_remote": t.sum_fi_remote, "sum_Ak": t.sum_Ak, "sum_Ak_remote": t.sum_Ak_remote,
        "V": t.V, "N": t.N, "T_v": t.T_v, "T_n": t.T_n, "T_e": -1 if t.T_e is None else t.T_e,
        "use_cache": int(t.use_cache),
        "pred.topo_relays": t.predicted_topo_relays(), "pred.feat_relays": t.predicted_feat_relays(),
        "pred.topo_payload": t.topo_payload(), "pred.feat_payload": t.feat_payload(),
        "pred.incidental_per_relay": t.incidental_per_relay(),
    }
    out += [f"{pre} terms.{k}={v}" for k, v in scalars.items()]
    return out


def parse_metrics(text: str) -> dict[tuple[int, int], dict[str, str]]:
    rows: dict[tuple[int, int], dict[str, str]] = defaultdict(dict)
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        toks = dict(tok.split("=", 1) for tok in line.split())
        key = (int(toks.pop("rank")), int(toks.pop("epoch")))
        rows[key].update(toks)
    return dict(rows)


def _i(row, key, default=0) -> int:
    return int(row.get(key, default))


def format_table(metrics: dict[tuple[int, int], dict[str, str]]) -> str:
    """Per-epoch table averaged over ranks (timings) / summed (counts)."""
    by_epoch: dict[int, list[dict[str, str]]] = defaultdict(list)
    for (rank, epoch), row in sorted(metrics.items()):
        by_epoch[epoch].append(row)
    head = f"{'epoch':>5} {'Topo':>8} {'Feat':>8} {'Export':>8} {'Fwd':>8} {'Bwd':>8} {'loss':>8} {'acc':>6} " \
           f"{'relays':>7} {'feat_total':>10} {'feat_remote':>11} {'payload_B':>11}"
    lines = ["timings in seconds (mean over ranks, NOT reproducible); counts summed over ranks", head, "-" * len(head)]
    for epoch, rows in sorted(by_epoch.items()):
        secs = [sum(float(r[f"seconds.{p}"]) for r in rows) / len(rows) for p in PHASES]
        losses = [float(r["loss"]) for r in rows if not math.isnan(float(r["loss"]))]
        acc = rows[0].get("test_accuracy")
        mark = "*" if epoch == HEADLINE_EPOCH else " "
        lines.append(
            f"{epoch:>4}{mark} " + " ".join(f"{s:8.4f}" for s in secs)
            + f" {(sum(losses) / len(losses)) if losses else float('nan'):8.4f} {float(acc) if acc else float('nan'):6.3f}"
            + f" {_i(rows[0], 'relays'):>7} {sum(_i(r, 'features_fetched_total') for r in rows):>10}"
            + f" {sum(_i(r, 'features_fetched_remote') for r in rows):>11} {sum(_i(r, 'payload_bytes') for r in rows):>11}"
        )
    lines.append("* headline epoch (third epoch of execution)")
    return "\n".join(lines)


def _tagged(row, field_name: str, prefix: str) -> int:
    key = f"{field_name}."
    return sum(int(v) for k, v in row.items() if k.startswith(key + prefix))


def check_rows(row: dict[str, str]) -> list[tuple[str, int, int]]:
    """(quantity, measured, predicted) triples for one rank-epoch."""
    L = _i(row, "terms.L")
    out = [
        ("topology relays (L*ceil(M/B))", _tagged(row, "relays_by_tag", "topo"), _i(row, "terms.pred.topo_relays")),
        ("feature relays (ceil(M/B)*ceil(B/F))", _tagged(row, "relays_by_tag", "feat"), _i(row, "terms.pred.feat_relays")),
        ("feature vectors fetched (sum |A_k|)", _i(row, "features_fetched_total"), _i(row, "terms.sum_Ak")),
        ("remote feature vectors (sum |A_k| remote)", _i(row, "features_fetched_remote"), _i(row, "terms.sum_Ak_remote")),
        ("topology payload bytes (sum T_i)", _tagged(row, "payload_by_tag", "topo"), _i(row, "terms.pred.topo_payload")),
        ("feature payload bytes", _tagged(row, "payload_by_tag", "feat"), _i(row, "terms.pred.feat_payload")),
        ("incidental bytes (relays * C)", _i(row, "incidental_bytes"), _i(row, "relays") * _i(row, "terms.pred.incidental_per_relay")),
    ]
    if _i(row, "terms.use_cache"):
        out.append(("cached aggregate rows (|V| per round)", _i(row, "cache_rows_fetched_total"), _i(row, "features_fetched_total")))
    elif L:
        out.append((f"last-layer edge bytes T_e", _tagged(row, "payload_by_tag", f"topo{L - 1}"), _i(row, "terms.T_e")))
    return out


def model_check(metrics: dict[tuple[int, int], dict[str, str]]) -> tuple[str, list[str]]:
    """Juxtapose measured counters with closed-form predictions.

    Returns the text table and a list of mismatch descriptions (empty when
    every measured value equals its prediction).
    """
    lines = []
    mismatches = []
    for (rank, epoch), row in sorted(metrics.items()):
        S = _i(row, "terms.S")
        V, N = _i(row, "terms.V"), _i(row, "terms.N")
        sum_fi, sum_ak = _i(row, "terms.sum_fi"), _i(row, "terms.sum_Ak")
        ratio = f"{sum_fi / sum_ak:.4f}" if sum_ak else "n/a"
        lines.append(f"rank {rank} epoch {epoch}: M={row.get('terms.M')} B={row.get('terms.B')} F={row.get('terms.F')} "
                     f"L={row.get('terms.L')} cache={'on' if _i(row, 'terms.use_cache') else 'off'}")
        lines.append(f"  fetch prediction B=1: sum|f_i|={sum_fi}  macrobatch: sum|A_k|={sum_ak}  ratio={ratio}")
        T_e = _i(row, "terms.T_e")
        lines.append(f"  cost terms: VS={V * S} |N(V)|S={N * S} T_v={_i(row, 'terms.T_v')} T_n={_i(row, 'terms.T_n')} "
                     f"T_e={'n/a' if T_e < 0 else T_e}")
        for name, measured, predicted in check_rows(row):
            ok = measured == predicted
            lines.append(f"  {'ok      ' if ok else 'MISMATCH'} {name:<42} measured={measured:<12} predicted={predicted}")
            if not ok:
                mismatches.append(f"rank {rank} epoch {epoch}: {name} measured {measured} predicted {predicted}")
    return "\n".join(lines), mismatches
