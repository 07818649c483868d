"""Precomputed full-neighbor aggregates of the static input features.

Each rank stores one aggregated row per owned vertex. During macrobatch
preparation the last sampling layer is skipped and these rows are fetched
alongside the raw features of the same vertices instead.

Persistence format: 20-byte header ``<4s magic "AGGC"><u32 rows><u32 cols>
<u32 kind code><u32 rank>`` followed by float32 rows, little-endian.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netsim import Fabric, ProtocolError
from .nn.functional import segment_sum
from .partitioner import Partition
from .sampler import SamplingPlan

AGGREGATORS = ("mean", "gcn", "sum")
MODEL_AGGREGATOR = {"sage": "mean", "gcn": "gcn", "gin": "sum"}
_HDR = struct.Struct("<4sIIII")


class CacheConfigError(ValueError):
    pass


@dataclass(eq=False)
class AggCache:
    kind: str
    rows: np.ndarray            # one row per owned vertex, in partition.owned order
    global_degree: np.ndarray
    rank: int = 0
    build_seconds: float = 0.0


def aggregate_rows(kind: str, neighbor_rows: np.ndarray, offsets: np.ndarray,
                   dest_degree: np.ndarray, src_degree: np.ndarray | None = None) -> np.ndarray:
    """Aggregate pre-gathered neighbor rows per destination segment.

    ``dest_degree`` is the degree used for normalization of each destination;
    ``src_degree`` (GCN only) is the degree of each gathered neighbor, edge-aligned.
    Accumulation is in float64.
    """
    vals = neighbor_rows.astype(np.float64)
    if kind == "gcn":
        dst_deg = np.repeat(dest_degree, np.diff(offsets)).astype(np.float64)
        coef = 1.0 / np.sqrt((dst_deg + 1.0) * (src_degree.astype(np.float64) + 1.0))
        vals = vals * coef[:, None]
    agg = segment_sum(vals, offsets)
    if kind == "mean":
        cnt = np.diff(offsets).astype(np.float64)
        agg /= np.maximum(cnt, 1.0)[:, None]
    elif kind not in ("gcn", "sum"):
        raise CacheConfigError(f"unknown aggregator {kind!r}; expected one of {AGGREGATORS}")
    return agg


def build_cache(fabric: Fabric, partition: Partition, kind: str) -> AggCache:
    """Collective: every rank builds rows for its owned vertices."""
    if kind not in AGGREGATORS:
        raise CacheConfigError(f"unknown aggregator {kind!r}; expected one of {AGGREGATORS}")
    if partition.features is None:
        raise CacheConfigError("features must be scattered before building the cache")
    t0 = time.perf_counter()
    rank = partition.rank
    nbrs = partition.local_targets
    need = np.unique(nbrs)
    remote = need[partition.owner_of(need) != rank] if need.size else need
    owners = partition.owner_of(remote)
    requests = {d: remote[owners == d] for d in range(partition.num_ranks) if (owners == d).any()}

    def handle(src, ids):
        lv = partition.g2l[ids]
        if (lv < 0).any():
            raise ProtocolError(f"rank {rank} asked for feature rows it does not own")
        return partition.features[lv]

    got = fabric.relay(rank, requests, handle, tag="cache")

    dim = partition.feature_dim
    table_ids = np.concatenate([partition.owned] + [requests[d] for d in sorted(got)])
    table = np.concatenate([partition.features] + [got[d] for d in sorted(got)]).reshape(-1, dim)
    order = np.argsort(table_ids, kind="stable")
    pos = order[np.searchsorted(table_ids[order], nbrs)] if nbrs.size else np.zeros(0, np.int64)

    src_deg = partition.global_degree[nbrs] if kind == "gcn" else None
    rows = aggregate_rows(kind, table[pos], partition.local_offsets, partition.global_degree[partition.owned], src_deg)
    return AggCache(
        kind=kind,
        rows=rows.astype(partition.features.dtype),
        global_degree=partition.global_degree,
        rank=rank,
        build_seconds=time.perf_counter() - t0,
    )


def check_kind(cache: AggCache | None, model_kind: str) -> None:
    want = MODEL_AGGREGATOR.get(model_kind)
    if want is None:
        raise CacheConfigError(f"layer type {model_kind!r} cannot use the aggregation cache")
    if cache is not None and cache.kind != want:
        raise CacheConfigError(f"cache holds {cache.kind!r} aggregates but {model_kind} layers need {want!r}")


def plan_with_cache(plan: SamplingPlan, cache: AggCache, model_kind: str) -> SamplingPlan:
    """Drop the last sampling layer; its aggregation comes from the cache."""
    check_kind(cache, model_kind)
    return SamplingPlan(plan.fans, use_cache=True)


def save_cache(path, cache: AggCache) -> None:
    rows = np.ascontiguousarray(cache.rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HDR.pack(b"AGGC", rows.shape[0], rows.shape[1], AGGREGATORS.index(cache.kind), cache.rank))
        fh.write(rows.tobytes())


def load_cache(path, partition: Partition) -> AggCache:
    data = Path(path).read_bytes()
    magic, n, d, code, rank = _HDR.unpack_from(data)
    if magic != b"AGGC":
        raise CacheConfigError(f"{path}: not a cache file")
    if n != partition.num_owned or rank != partition.rank:
        raise CacheConfigError(f"{path}: cache for rank {rank} with {n} rows does not match this partition")
    rows = np.frombuffer(data, dtype="<f4", offset=_HDR.size).reshape(n, d).astype(np.float32)
    return AggCache(AGGREGATORS[code], rows, partition.global_degree, rank)
