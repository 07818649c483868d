"""Epoch orchestration: seeds -> macrobatch sampling -> per-minibatch
forward/backward -> gradient all-reduce -> Adam, with phase timings and
communication counters collected per epoch."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import rng
from .agg_cache import AggCache, build_cache, check_kind, plan_with_cache, MODEL_AGGREGATOR
from .graph_store import Graph
from .netsim import HEADER_BYTES, CommCounters, Fabric, ProtocolError, run_ranks
from .nn.functional import softmax_xent
from .nn.model import GNNModel, ModelConfig, load_checkpoint
from .partitioner import Partition, partition_all
from .sampler import (
    ID_BYTES,
    TOPO_ITEM_BYTES,
    Macrobatch,
    SampledSubgraph,
    SamplingPlan,
    build_subgraphs,
    eval_seeds,
    fetch_features,
    macrobatches,
    sample_layer,
    select_seeds,
)

log = logging.getLogger(__name__)

PHASES = ("topo", "feat", "export", "forward", "backward")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 3
    minibatch_size: int = 1024
    fans: tuple[int, ...] = (15, 10, 5)
    test_fans: tuple[int, ...] | None = None
    macrobatch_size: int | None = None      # None = all minibatches of the epoch
    feature_round: int | None = None        # None = macrobatch size
    use_cache: bool = False
    cache_at_eval: bool | None = None       # None = only for GIN
    eval_minibatch_size: int | None = None
    eval_every: int = 0                     # 0 = evaluate only after the last epoch
    rng_root: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.fans = tuple(int(f) for f in self.fans)
        if len(self.fans) != self.model.num_layers:
            raise ConfigError(f"{len(self.fans)} fans for a {self.model.num_layers}-layer model")
        if self.test_fans is not None:
            self.test_fans = tuple(int(f) for f in self.test_fans)
            if len(self.test_fans) != self.model.num_layers:
                raise ConfigError("test_fans length must equal model depth")
        if self.macrobatch_size is not None and self.macrobatch_size < 1:
            raise ConfigError("macrobatch size B must be >= 1")
        if self.feature_round is not None:
            if self.feature_round < 1:
                raise ConfigError("feature round F must be >= 1")
            if self.macrobatch_size is not None and self.feature_round > self.macrobatch_size:
                raise ConfigError("feature round F must not exceed macrobatch size B")
        if self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be >= 1")
        if self.use_cache and self.model.kind not in MODEL_AGGREGATOR:
            raise ConfigError(f"aggregation cache requires native layers, not {self.model.kind!r}")

    def eval_fans(self) -> tuple[int, ...]:
        if self.test_fans is not None:
            return self.test_fans
        if self.model.kind == "gin":
            return self.fans
        return (20,) * self.model.num_layers

    def eval_uses_cache(self) -> bool:
        if not self.use_cache:
            return False
        return self.model.kind == "gin" if self.cache_at_eval is None else self.cache_at_eval


@dataclass
class ModelTerms:
    """Closed-form predictions for one epoch, computed from the sampled sets
    rather than from the fabric's counters."""
    minibatches: int = 0
    macrobatches: int = 0
    feature_rounds: int = 0
    sampled_layers: int = 0
    feature_bytes: int = 0                  # S
    sum_fi: int = 0                         # sum over minibatches of |f_i|
    sum_fi_remote: int = 0
    sum_Ak: int = 0                         # sum over rounds of |A_k|
    sum_Ak_remote: int = 0
    V: int = 0                              # remote vertices aggregated by the first compute layer
    N: int = 0                              # remote newly sampled vertices of the last sampling layer
    topo_items_remote: list[int] = field(default_factory=list)   # per sampling layer
    fans: tuple[int, ...] = ()
    use_cache: bool = False
    num_ranks: int = 1
    B: int = 1
    F: int = 1

    def predicted_topo_relays(self) -> int:
        """L * ceil(M / B)."""
        return self.sampled_layers * -(-self.minibatches // self.B) if self.minibatches else 0

    def predicted_feat_relays(self) -> int:
        """Sum over macrobatches of ceil(size_k / F); ceil(M/B) * ceil(B/F) when B divides M."""
        full, rem = divmod(self.minibatches, self.B)
        return full * -(-self.B // self.F) + (-(-rem // min(self.F, rem)) if rem else 0)

    @property
    def T_v(self) -> int:
        return ID_BYTES * self.V

    @property
    def T_n(self) -> int:
        return ID_BYTES * self.N

    @property
    def T_e(self) -> int | None:
        if self.use_cache or len(self.topo_items_remote) < len(self.fans):
            return None
        return self.topo_items_remote[-1] * (TOPO_ITEM_BYTES + ID_BYTES * self.fans[-1])

    def topo_payload(self) -> int:
        return sum(n * (TOPO_ITEM_BYTES + ID_BYTES * f) for n, f in zip(self.topo_items_remote, self.fans))

    def feat_payload(self) -> int:
        S = self.feature_bytes
        if self.use_cache:
            return self.V * (2 * S + ID_BYTES)          # VS + VS + T_v
        return (self.V + self.N) * (S + ID_BYTES)       # VS + |N|S + T_v + T_n

    def incidental_per_relay(self) -> int:
        return HEADER_BYTES * 2 * (self.num_ranks - 1)


@dataclass
class EpochReport:
    rank: int
    epoch: int
    seconds: dict[str, float]
    counters: CommCounters
    loss: float
    minibatches: int
    terms: ModelTerms
    test_accuracy: float | None = None
    param_hash: str = ""


StepHook = Callable[[int, SampledSubgraph, np.ndarray, np.ndarray, GNNModel], None]


def _tally_round(terms: ModelTerms, partition: Partition, mb: Macrobatch, r: int, plan: SamplingPlan) -> None:
    rank = partition.rank
    members = list(mb.round_members(r))
    last = plan.num_layers - 1
    for i in members:
        f = mb.layer_sets[i][-1]
        terms.sum_fi += f.size
        terms.sum_fi_remote += int((partition.owner_of(f) != rank).sum())
    U = np.unique(np.concatenate([mb.layer_sets[i][-1] for i in members]))
    Vset = np.unique(np.concatenate([mb.layer_sets[i][last] for i in members]))
    Nset = np.setdiff1d(U, Vset)
    terms.sum_Ak += U.size
    terms.sum_Ak_remote += int((partition.owner_of(U) != rank).sum())
    terms.V += int((partition.owner_of(Vset) != rank).sum())
    terms.N += int((partition.owner_of(Nset) != rank).sum())
    terms.feature_rounds += 1


def _tally_topology(terms: ModelTerms, partition: Partition, mb: Macrobatch, plan: SamplingPlan) -> None:
    if not terms.topo_items_remote:
        terms.topo_items_remote = [0] * plan.sampled_layers
    for i in range(mb.size):
        for k in range(plan.sampled_layers):
            V = mb.layer_sets[i][k]
            terms.topo_items_remote[k] += int((partition.owner_of(V) != partition.rank).sum())


def _common_count(fabric: Fabric, rank: int, n: int, how: str) -> int:
    counts = fabric.allgather(rank, np.array([n], dtype=np.int64), tag="control")
    vals = [int(c[0]) for c in counts]
    return min(vals) if how == "min" else max(vals)


def sync_gradients(fabric: Fabric, rank: int, model: GNNModel) -> tuple[np.ndarray, np.ndarray]:
    """Average gradients (and batch-norm running stats) across ranks in place.

    Returns (local flat grads, averaged flat grads).
    """
    local = model.flat_grads()
    bufs = model.flat_buffers()
    avg = fabric.allreduce_mean(rank, np.concatenate([local, bufs.astype(local.dtype)]), tag="grad")
    model.set_flat_grads(avg[:local.size])
    if bufs.size:
        model.set_flat_buffers(avg[local.size:])
    return local, avg[:local.size]


def train_epoch(
    fabric: Fabric,
    partition: Partition,
    model: GNNModel,
    config: TrainConfig,
    epoch: int,
    cache: AggCache | None = None,
    on_step: StepHook | None = None,
) -> EpochReport:
    rank, n = partition.rank, partition.num_ranks
    start = fabric.snapshot_counters(rank)
    seconds = dict.fromkeys(PHASES, 0.0)

    plan = SamplingPlan(config.fans)
    if config.use_cache:
        if cache is None:
            raise ConfigError("use_cache is set but no aggregation cache was built")
        plan = plan_with_cache(plan, cache, model.cfg.kind)

    fabric.phase[rank] = "seeds"
    seeds = select_seeds(partition, epoch, config.minibatch_size, config.rng_root)
    M = _common_count(fabric, rank, len(seeds), "min")
    if M != len(seeds):
        log.debug("rank %d: trimming %d -> %d minibatches to match peers", rank, len(seeds), M)
    seeds = seeds[:M]

    terms = ModelTerms(fans=plan.fans[:plan.sampled_layers], use_cache=plan.use_cache,
                       feature_bytes=partition.feature_dim * partition.features.dtype.itemsize,
                       sampled_layers=plan.sampled_layers, minibatches=M, num_ranks=n)
    terms.B = max(config.macrobatch_size or M, 1)
    terms.F = min(config.feature_round or terms.B, terms.B)
    losses = []
    for mb in macrobatches(seeds, rank, n, epoch, config.macrobatch_size, config.feature_round):
        terms.macrobatches += 1
        fabric.phase[rank] = "topo"
        t0 = time.perf_counter()
        for k in range(plan.sampled_layers):
            sample_layer(fabric, partition, mb, k, plan.fans[k], config.rng_root)
        seconds["topo"] += time.perf_counter() - t0
        _tally_topology(terms, partition, mb, plan)

        for r in range(mb.num_rounds):
            fabric.phase[rank] = "feat"
            t0 = time.perf_counter()
            fetched = fetch_features(fabric, partition, mb, r, cache if plan.use_cache else None)
            seconds["feat"] += time.perf_counter() - t0
            _tally_round(terms, partition, mb, r, plan)

            fabric.phase[rank] = "export"
            t0 = time.perf_counter()
            subgraphs = build_subgraphs(partition, mb, r, fetched)
            seconds["export"] += time.perf_counter() - t0

            for sg in subgraphs:
                fabric.phase[rank] = "forward"
                t0 = time.perf_counter()
                model.zero_grad()
                logits = model.forward(sg, train=True, epoch=epoch)
                loss, grad = softmax_xent(logits, sg.labels)
                seconds["forward"] += time.perf_counter() - t0

                fabric.phase[rank] = "backward"
                t0 = time.perf_counter()
                model.backward(grad)
                local, avg = sync_gradients(fabric, rank, model)
                model.step()
                seconds["backward"] += time.perf_counter() - t0
                losses.append(loss)
                if on_step is not None:
                    on_step(rank, sg, local, avg, model)

    fabric.phase[rank] = "idle"
    return EpochReport(
        rank=rank,
        epoch=epoch,
        seconds=seconds,
        counters=fabric.snapshot_counters(rank).minus(start),
        loss=float(np.mean(losses)) if losses else float("nan"),
        minibatches=M,
        terms=terms,
        param_hash=model.param_hash(),
    )


def evaluate(
    fabric: Fabric,
    partition: Partition,
    model: GNNModel,
    config: TrainConfig,
    cache: AggCache | None = None,
) -> float:
    """Global test accuracy; collective over all ranks."""
    rank, n = partition.rank, partition.num_ranks
    fabric.phase[rank] = "evaluate"
    use_cache = config.eval_uses_cache()
    if use_cache and cache is None:
        raise ConfigError("evaluation wants the aggregation cache but none was built")
    plan = SamplingPlan(config.eval_fans(), use_cache=use_cache)
    if use_cache:
        check_kind(cache, model.cfg.kind)

    seeds = eval_seeds(partition, config.eval_minibatch_size or config.minibatch_size)
    count = _common_count(fabric, rank, len(seeds), "max")
    seeds = seeds + [np.zeros(0, dtype=np.int64)] * (count - len(seeds))

    correct = total = 0
    for mb in macrobatches(seeds, rank, n, 0, config.macrobatch_size, config.feature_round, domain=rng.DOMAIN_EVAL):
        for k in range(plan.sampled_layers):
            sample_layer(fabric, partition, mb, k, plan.fans[k], config.rng_root)
        for r in range(mb.num_rounds):
            fetched = fetch_features(fabric, partition, mb, r, cache if use_cache else None)
            for sg in build_subgraphs(partition, mb, r, fetched):
                if sg.num_seeds == 0:
                    continue
                pred = model.predict(sg)
                correct += int((pred == sg.labels).sum())
                total += sg.num_seeds

    tallies = fabric.allgather(rank, np.array([correct, total], dtype=np.int64), tag="control")
    correct = sum(int(t[0]) for t in tallies)
    total = sum(int(t[1]) for t in tallies)
    fabric.phase[rank] = "idle"
    if total == 0:
        if rank == 0:
            warnings.warn("no test vertices; reporting accuracy 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return correct / total


@dataclass
class TrainResult:
    reports: list[list[EpochReport]]     # [rank][epoch]
    models: list[GNNModel]
    partitions: list[Partition]
    caches: list[AggCache | None]
    fabric: Fabric

    @property
    def final_accuracy(self) -> float | None:
        return self.reports[0][-1].test_accuracy if self.reports and self.reports[0] else None


def setup(graph: Graph, num_ranks: int, config: TrainConfig, policy: str = "hash", partition_seed: int = 0,
          direction: str = "out", dtype=np.float32):
    if graph.features is None:
        raise ConfigError("graph has no features attached")
    parts = partition_all(graph, num_ranks, policy, partition_seed, direction)
    cfg = config.model
    if cfg.in_dim != graph.feature_dim:
        raise ConfigError(f"model in_dim {cfg.in_dim} != feature dim {graph.feature_dim}")
    if dtype != np.float32:
        parts = [replace(p, features=p.features.astype(dtype)) for p in parts]
    models = [GNNModel(cfg, config.rng_root, dtype) for _ in range(num_ranks)]
    return parts, models


def train_distributed(
    graph: Graph,
    num_ranks: int,
    config: TrainConfig,
    policy: str = "hash",
    partition_seed: int = 0,
    direction: str = "out",
    on_step: StepHook | None = None,
    on_epoch: Callable[[EpochReport], None] | None = None,
    fabric: Fabric | None = None,
    init_checkpoint=None,
) -> TrainResult:
    """Partition, optionally build the cache, then train ``config.epochs`` epochs on ``num_ranks`` threads."""
    parts, models = setup(graph, num_ranks, config, policy, partition_seed, direction)
    if init_checkpoint is not None:
        for m in models:
            load_checkpoint(init_checkpoint, m)
    fabric = fabric or Fabric(num_ranks)
    caches: list[AggCache | None] = [None] * num_ranks
    reports: list[list[EpochReport]] = [[] for _ in range(num_ranks)]

    def body(rank: int):
        p, model = parts[rank], models[rank]
        if config.use_cache:
            fabric.phase[rank] = "build-cache"
            caches[rank] = build_cache(fabric, p, MODEL_AGGREGATOR[config.model.kind])
        for epoch in range(config.epochs):
            rep = train_epoch(fabric, p, model, config, epoch, caches[rank], on_step)
            last = epoch == config.epochs - 1
            if last or (config.eval_every and (epoch + 1) % config.eval_every == 0):
                rep.test_accuracy = evaluate(fabric, p, model, config, caches[rank])
            hashes = fabric.allgather(rank, np.frombuffer(bytes.fromhex(rep.param_hash), dtype=np.uint8), tag="control")
            if any(not np.array_equal(h, hashes[0]) for h in hashes):
                raise ProtocolError(f"parameter divergence across ranks after epoch {epoch}")
            reports[rank].append(rep)
            if on_epoch is not None:
                on_epoch(rep)

    run_ranks(fabric, body)
    return TrainResult(reports, models, parts, caches, fabric)


def evaluate_distributed(graph: Graph, num_ranks: int, config: TrainConfig, checkpoint, policy: str = "hash",
                         partition_seed: int = 0, direction: str = "out") -> float:
    parts, models = setup(graph, num_ranks, config, policy, partition_seed, direction)
    for m in models:
        load_checkpoint(checkpoint, m)
    fabric = Fabric(num_ranks)
    out = [0.0] * num_ranks

    def body(rank):
        cache = None
        if config.eval_uses_cache():
            cache = build_cache(fabric, parts[rank], MODEL_AGGREGATOR[config.model.kind])
        out[rank] = evaluate(fabric, parts[rank], models[rank], config, cache)

    run_ranks(fabric, body)
    return out[0]
