"""Macrobatch neighbor sampling, feature fetching and subgraph assembly.

A macrobatch groups B minibatches so that each sampling layer costs one relay
for all of them, and features for F minibatches at a time are fetched once per
unique vertex. Sampling randomness is keyed on (epoch, minibatch ID, layer,
vertex, seed position), never on batching, so the subgraph built for a
minibatch is the same whatever B and F are.

Wire encoding
-------------
topology request   per item: int64 vertex ID + uint64 stream key (16 bytes)
topology response  per item: ``fan`` int64 neighbor IDs, -1 padded for
                   vertices with no neighbors
feature request    int64 vertex IDs
feature response   float32 rows (and, with the aggregation cache, a second
                   block of cached aggregate rows of the same shape)
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .graph_store import GraphBoundsError
from .netsim import Fabric, ProtocolError
from .partitioner import Partition

ID_BYTES = 8
TOPO_ITEM_BYTES = 16


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplingPlan:
    fans: tuple[int, ...]
    use_cache: bool = False

    @property
    def num_layers(self) -> int:
        return len(self.fans)

    @property
    def sampled_layers(self) -> int:
        """Layers that are actually sampled; the cache replaces the last one."""
        return len(self.fans) - 1 if self.use_cache else len(self.fans)


@dataclass
class Macrobatch:
    epoch: int
    index: int
    minibatches: list[np.ndarray]
    minibatch_ids: list[int]
    feature_round: int
    domain: int = rng.DOMAIN_TRAIN
    layer_sets: list[list[np.ndarray]] = field(default_factory=list)
    samples: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.minibatches) != len(self.minibatch_ids):
            raise ValueError("one global ID per minibatch required")
        if self.feature_round < 1:
            raise ValueError("feature round width F must be >= 1")
        self.minibatches = [np.asarray(s, dtype=np.int64) for s in self.minibatches]
        if not self.layer_sets:
            self.layer_sets = [[s] for s in self.minibatches]
            self.samples = [[] for _ in self.minibatches]

    @property
    def size(self) -> int:
        return len(self.minibatches)

    @property
    def num_rounds(self) -> int:
        return -(-self.size // self.feature_round) if self.size else 0

    def round_members(self, r: int) -> range:
        lo = r * self.feature_round
        return range(lo, min(lo + self.feature_round, self.size))

    def frontier(self, i: int, layer: int) -> list[tuple[int, np.ndarray]]:
        """(seed, sampled neighbors) pairs of minibatch ``i`` at ``layer``."""
        V, S = self.layer_sets[i][layer], self.samples[i][layer]
        return [(int(v), row[row >= 0]) for v, row in zip(V, S)]


def select_seeds(partition: Partition, epoch: int, minibatch_size: int, seed: int) -> list[np.ndarray]:
    """Shuffle owned training vertices and cut full minibatches; the remainder is dropped."""
    if minibatch_size < 1:
        raise ValueError("minibatch_size must be >= 1")
    if partition.train_mask is None:
        raise ValueError("partition has no train mask")
    ids = partition.owned[partition.train_mask]
    order = rng.permutation_order(rng.key_scalar(rng.DOMAIN_SHUFFLE, seed, epoch, partition.rank), ids)
    ids = ids[order]
    n = ids.size // minibatch_size
    return [ids[i * minibatch_size:(i + 1) * minibatch_size] for i in range(n)]


def eval_seeds(partition: Partition, minibatch_size: int) -> list[np.ndarray]:
    """Owned test vertices in ID order, chunked; the last chunk may be short."""
    ids = partition.owned[partition.test_mask]
    return [ids[i:i + minibatch_size] for i in range(0, ids.size, minibatch_size)]


def _sampling_handler(partition: Partition, fan: int):
    offsets, targets = partition.local_offsets, partition.local_targets

    def handle(src: int, req: np.ndarray) -> np.ndarray:
        v = req[:, 0]
        if v.size and (v.min() < 0 or v.max() >= partition.num_vertices):
            raise GraphBoundsError(f"sampling request from rank {src} names a vertex outside the graph")
        lv = partition.g2l[v]
        if (lv < 0).any():
            bad = int(v[np.flatnonzero(lv < 0)[0]])
            raise ProtocolError(f"rank {partition.rank} asked by rank {src} to sample vertex {bad} it does not own")
        start = offsets[lv]
        deg = offsets[lv + 1] - start
        keys = rng.mix64(req[:, 1].view(np.uint64) ^ rng.mix64(v))
        pick = rng.bounded(rng.stream(keys, fan), deg[:, None])
        pos = np.minimum(start[:, None] + pick, max(targets.size - 1, 0))
        out = np.where(deg[:, None] > 0, targets[pos] if targets.size else -1, -1)
        return np.ascontiguousarray(out, dtype=np.int64).reshape(v.size, fan)

    return handle


def _grow(V: np.ndarray, sampled: np.ndarray) -> np.ndarray:
    """V followed by vertices first seen in ``sampled`` (row-major), in first-seen order."""
    flat = sampled[sampled >= 0]
    if flat.size == 0:
        return V.copy()
    both = np.concatenate([V, flat])
    uniq, first = np.unique(both, return_index=True)
    fresh = first >= V.size
    return np.concatenate([V, both[np.sort(first[fresh])]])


def sample_layer(
    fabric: Fabric,
    partition: Partition,
    mb: Macrobatch,
    layer: int,
    fan: int,
    rng_root: int,
) -> None:
    """Sample ``fan`` neighbors with replacement for every vertex of every
    minibatch's layer set, in a single relay across the whole macrobatch."""
    if any(len(ls) != layer + 1 for ls in mb.layer_sets):
        raise ValueError(f"layer {layer} requested but macrobatch has {len(mb.layer_sets[0]) - 1} sampled layers")
    rank, n = partition.rank, partition.num_ranks

    # inspector: exact request counts per owner
    owners = [partition.owner_of(ls[layer]) for ls in mb.layer_sets]
    counts = np.zeros(n, dtype=np.int64)
    for o in owners:
        counts += np.bincount(o, minlength=n)
    bufs = {d: np.empty((int(counts[d]), 2), dtype=np.int64) for d in range(n) if counts[d]}
    book_mb = {d: np.empty(int(counts[d]), dtype=np.int64) for d in bufs}
    book_pos = {d: np.empty(int(counts[d]), dtype=np.int64) for d in bufs}

    # executor: serialize into disjoint slices
    cursor = np.zeros(n, dtype=np.int64)
    for i, (ls, own) in enumerate(zip(mb.layer_sets, owners)):
        V = ls[layer]
        keys = rng.hash_key(rng_root, mb.domain, mb.epoch, mb.minibatch_ids[i], layer, np.arange(V.size))
        for d in np.unique(own):
            sel = np.flatnonzero(own == d)
            c = cursor[d]
            bufs[d][c:c + sel.size, 0] = V[sel]
            bufs[d][c:c + sel.size, 1] = keys[sel].view(np.int64)
            book_mb[d][c:c + sel.size] = i
            book_pos[d][c:c + sel.size] = sel
            cursor[d] += sel.size

    responses = fabric.relay(rank, bufs, _sampling_handler(partition, fan), tag=f"topo{layer}")

    samples = [np.full((ls[layer].size, fan), -1, dtype=np.int64) for ls in mb.layer_sets]
    for d, resp in responses.items():
        if resp.shape != (bufs[d].shape[0], fan):
            raise ProtocolError(f"rank {d} answered {resp.shape} for {bufs[d].shape[0]} items at fan {fan}")
        for i in np.unique(book_mb[d]):
            rows = book_mb[d] == i
            samples[i][book_pos[d][rows]] = resp[rows]

    for i, ls in enumerate(mb.layer_sets):
        mb.samples[i].append(samples[i])
        ls.append(_grow(ls[layer], samples[i]))


@dataclass
class FetchedRows:
    ids: np.ndarray            # sorted unique global IDs
    features: np.ndarray
    cached: np.ndarray | None = None
    remote: int = 0

    def rows_for(self, gids: np.ndarray, cached: bool = False) -> np.ndarray:
        pos = np.searchsorted(self.ids, gids)
        if gids.size and (pos.max() >= self.ids.size or (self.ids[np.minimum(pos, self.ids.size - 1)] != gids).any()):
            raise AssemblyError("feature row missing for a referenced vertex")
        src = self.cached if cached else self.features
        return src[pos]


def round_union(mb: Macrobatch, r: int) -> np.ndarray:
    sets = [mb.layer_sets[i][-1] for i in mb.round_members(r)]
    return np.unique(np.concatenate(sets)) if sets else np.zeros(0, dtype=np.int64)


def fetch_features(fabric: Fabric, partition: Partition, mb: Macrobatch, r: int, cache=None) -> FetchedRows:
    """Fetch every row needed by round ``r``'s minibatches exactly once.

    With an aggregation cache, the same request also returns the cached
    aggregate row of each vertex.
    """
    rank = partition.rank
    U = round_union(mb, r)
    if U.size and (U.min() < 0 or U.max() >= partition.num_vertices):
        raise GraphBoundsError("feature request names a vertex outside the graph")
    owners = partition.owner_of(U)
    requests = {d: U[owners == d] for d in range(partition.num_ranks) if (owners == d).any()}

    def handle(src: int, ids: np.ndarray):
        lv = partition.g2l[ids]
        if (lv < 0).any():
            raise ProtocolError(f"rank {rank} asked for feature rows it does not own")
        if cache is None:
            return partition.features[lv]
        return (partition.features[lv], cache.rows[lv])

    responses = fabric.relay(rank, requests, handle, tag="feat")

    dim = partition.feature_dim
    feats = np.empty((U.size, dim), dtype=partition.features.dtype)
    cached = np.empty((U.size, dim), dtype=cache.rows.dtype) if cache is not None else None
    for d, resp in responses.items():
        sel = owners == d
        if cache is None:
            feats[sel] = resp
        else:
            feats[sel], cached[sel] = resp

    remote = int((owners != rank).sum())
    c = fabric.counters[rank]
    c.features_fetched_total += int(U.size)
    c.features_fetched_remote += remote
    if cache is not None:
        c.cache_rows_fetched_total += int(U.size)
        c.cache_rows_fetched_remote += remote
    return FetchedRows(U, feats, cached, remote)


@dataclass(eq=False)
class LayerBlock:
    """Bipartite edges of one sampling layer in local IDs.

    Destinations are the layer's seed set (local 0..num_dst-1); sources are
    local IDs < num_src. CSC is grouped by destination, CSR by source.
    """
    num_dst: int
    num_src: int
    csc_offsets: np.ndarray
    csc_sources: np.ndarray
    csr_offsets: np.ndarray
    csr_targets: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.csc_sources.size)

    @property
    def dest_in_degree(self) -> np.ndarray:
        return np.diff(self.csc_offsets)

    @classmethod
    def from_samples(cls, local_samples: np.ndarray, num_src: int) -> "LayerBlock":
        num_dst = local_samples.shape[0]
        valid = local_samples >= 0
        dst = np.repeat(np.arange(num_dst, dtype=np.int64), valid.sum(axis=1))
        src = local_samples[valid]
        csc_off = np.zeros(num_dst + 1, dtype=np.int64)
        np.cumsum(valid.sum(axis=1), out=csc_off[1:])
        order = np.argsort(src, kind="stable")
        csr_off = np.zeros(num_src + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=num_src), out=csr_off[1:])
        return cls(num_dst, num_src, csc_off, src.astype(np.int64), csr_off, dst[order])


@dataclass(eq=False)
class SampledSubgraph:
    minibatch_id: int
    global_ids: np.ndarray          # local -> global
    layer_sizes: list[int]          # |V_0| .. |V_n|
    layers: list[LayerBlock]        # sampling layer k: dst V_k, src V_{k+1}
    features: np.ndarray
    labels: np.ndarray
    global_degree: np.ndarray
    cached: np.ndarray | None = None

    @property
    def num_vertices(self) -> int:
        return int(self.global_ids.size)

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def num_seeds(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_edges(self) -> int:
        return sum(b.num_edges for b in self.layers)

    def arrays(self) -> list[np.ndarray]:
        out = [self.global_ids, np.asarray(self.layer_sizes), self.features, self.labels, self.global_degree]
        for b in self.layers:
            out += [b.csc_offsets, b.csc_sources, b.csr_offsets, b.csr_targets]
        if self.cached is not None:
            out.append(self.cached)
        return out

    def digest(self) -> str:
        h = hashlib.sha256(str(self.minibatch_id).encode())
        for a in self.arrays():
            h.update(str(a.dtype).encode() + str(a.shape).encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def assembly_threads() -> int:
    """Worker threads for subgraph assembly, from ``MACROGNN_THREADS`` (default 1)."""
    raw = os.environ.get("MACROGNN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise AssemblyError(f"MACROGNN_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def _assemble_one(partition: Partition, mb: Macrobatch, i: int, fetched: FetchedRows) -> SampledSubgraph:
    sets = mb.layer_sets[i]
    gids = sets[-1]
    sorter = np.argsort(gids, kind="stable")
    sorted_g = gids[sorter]
    blocks = []
    for k, S in enumerate(mb.samples[i]):
        local = np.full(S.shape, -1, dtype=np.int64)
        valid = S >= 0
        local[valid] = sorter[np.searchsorted(sorted_g, S[valid])]
        blocks.append(LayerBlock.from_samples(local, sets[k + 1].size))
    seeds = sets[0]
    labels = partition.labels[partition.g2l[seeds]] if seeds.size else np.zeros(0, np.int64)
    return SampledSubgraph(
        minibatch_id=mb.minibatch_ids[i],
        global_ids=gids,
        layer_sizes=[s.size for s in sets],
        layers=blocks,
        features=fetched.rows_for(gids),
        labels=labels,
        global_degree=partition.global_degree[gids],
        cached=fetched.rows_for(gids, cached=True) if fetched.cached is not None else None,
    )


def build_subgraphs(partition: Partition, mb: Macrobatch, r: int, fetched: FetchedRows,
                    threads: int | None = None) -> list[SampledSubgraph]:
    """Relabel, build CSR/CSC and gather rows for round ``r``'s minibatches.

    Local IDs: seeds first in seed order, then each layer's newly sampled
    vertices in first-encounter order, so every layer set is a prefix of the next.
    Minibatches are independent, so with ``threads > 1`` they are assembled
    concurrently; results come back in minibatch order either way.
    """
    members = list(mb.round_members(r))
    threads = assembly_threads() if threads is None else max(int(threads), 1)
    if threads == 1 or len(members) < 2:
        return [_assemble_one(partition, mb, i, fetched) for i in members]
    with ThreadPoolExecutor(max_workers=min(threads, len(members))) as pool:
        return list(pool.map(lambda i: _assemble_one(partition, mb, i, fetched), members))


def minibatch_gid(local_index: int, rank: int, num_ranks: int) -> int:
    return local_index * num_ranks + rank


def macrobatches(seed_lists: list[np.ndarray], rank: int, num_ranks: int, epoch: int,
                 B: int | None, F: int | None, domain: int = rng.DOMAIN_TRAIN) -> list[Macrobatch]:
    """Split an epoch's minibatches into macrobatches of B (None = all)."""
    M = len(seed_lists)
    B = M if B is None else B
    if B < 1:
        B = 1
    out = []
    for k, lo in enumerate(range(0, M, B)):
        chunk = list(range(lo, min(lo + B, M)))
        f = len(chunk) if F is None else min(F, len(chunk))
        out.append(Macrobatch(
            epoch=epoch,
            index=k,
            minibatches=[seed_lists[j] for j in chunk],
            minibatch_ids=[minibatch_gid(j, rank, num_ranks) for j in chunk],
            feature_round=max(f, 1),
            domain=domain,
        ))
    return out


def sample_macrobatch(fabric: Fabric, partition: Partition, mb: Macrobatch, plan: SamplingPlan, rng_root: int) -> None:
    for k in range(plan.sampled_layers):
        sample_layer(fabric, partition, mb, k, plan.fans[k], rng_root)


def prepare_round(fabric: Fabric, partition: Partition, mb: Macrobatch, r: int, cache=None) -> list[SampledSubgraph]:
    fetched = fetch_features(fabric, partition, mb, r, cache)
    return build_subgraphs(partition, mb, r, fetched)


def strip_cache(sg: SampledSubgraph) -> SampledSubgraph:
    return replace(sg, cached=None)
