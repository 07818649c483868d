"""One-pass edge-cut partitioning.

Each vertex is assigned an owner once, by a pure function of its ID; the owner
keeps every edge of that vertex in the sampling direction. Ranks read the full
edge stream and keep only what they own, so no coordination is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .graph_store import Graph, build_csr

POLICIES = ("modulo", "hash")


class PartitionError(ValueError):
    pass


def assign_owner(v, num_ranks: int, policy: str = "hash", seed: int = 0):
    """Owner rank of global vertex ID(s) ``v``. Scalar in, int out; array in, array out."""
    if num_ranks < 1:
        raise PartitionError("num_ranks must be >= 1")
    arr = np.asarray(v, dtype=np.int64)
    if policy == "modulo":
        out = arr % num_ranks
    elif policy == "hash":
        out = rng.bounded(rng.hash_key(rng.DOMAIN_OWNER, seed, arr), num_ranks).reshape(arr.shape)
    else:
        raise PartitionError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    return int(out) if arr.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Partition:
    rank: int
    num_ranks: int
    policy: str
    seed: int
    num_vertices: int
    owned: np.ndarray            # sorted global IDs
    local_offsets: np.ndarray    # CSR over owned vertices, len(owned)+1
    local_targets: np.ndarray    # global IDs
    g2l: np.ndarray              # global -> local index, -1 if not owned
    global_degree: np.ndarray    # degree of every vertex in the sampling direction
    direction: str = "out"
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    train_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None

    @property
    def num_owned(self) -> int:
        return int(self.owned.size)

    @property
    def num_local_edges(self) -> int:
        return int(self.local_targets.size)

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    def owner_of(self, v):
        return assign_owner(v, self.num_ranks, self.policy, self.seed)

    def neighbors(self, v: int) -> np.ndarray:
        lv = self.g2l[v]
        if lv < 0:
            raise PartitionError(f"rank {self.rank} does not own vertex {v}")
        return self.local_targets[self.local_offsets[lv]:self.local_offsets[lv + 1]]

    def local_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(global src, global dst) of every stored edge, in local CSR order."""
        src = np.repeat(self.owned, np.diff(self.local_offsets))
        return src, self.local_targets.copy()


def partition_graph(
    g: Graph,
    rank: int,
    num_ranks: int,
    policy: str = "hash",
    seed: int = 0,
    direction: str = "out",
) -> Partition:
    if not 0 <= rank < num_ranks:
        raise PartitionError(f"rank {rank} outside [0, {num_ranks})")
    if direction == "out":
        offsets, adj = g.csr_offsets, g.csr_targets
    elif direction == "in":
        offsets, adj = g.csc_offsets, g.csc_sources
    else:
        raise PartitionError(f"direction must be 'out' or 'in', got {direction!r}")

    owners = assign_owner(np.arange(g.num_vertices), num_ranks, policy, seed)
    owned = np.flatnonzero(owners == rank).astype(np.int64)
    g2l = np.full(g.num_vertices, -1, dtype=np.int64)
    g2l[owned] = np.arange(owned.size)

    deg = np.diff(offsets)
    keep = np.repeat(owners == rank, deg)
    src = np.repeat(np.arange(g.num_vertices, dtype=np.int64), deg)[keep]
    local_offsets, local_targets = build_csr(owned.size, g2l[src], adj[keep])

    p = Partition(
        rank=rank,
        num_ranks=num_ranks,
        policy=policy,
        seed=seed,
        num_vertices=g.num_vertices,
        owned=owned,
        local_offsets=local_offsets,
        local_targets=local_targets,
        g2l=g2l,
        global_degree=deg.astype(np.int64),
        direction=direction,
    )
    if g.features is not None:
        p = scatter_features(g, [p])[0]
    return p


def scatter_features(g: Graph, partitions: list[Partition]) -> list[Partition]:
    """Attach each rank's owned feature, label and mask rows."""
    if g.features is None:
        raise PartitionError("graph has no features attached")
    return [
        replace(
            p,
            features=g.features[p.owned].copy(),
            labels=g.labels[p.owned].copy(),
            train_mask=g.train_mask[p.owned].copy(),
            test_mask=g.test_mask[p.owned].copy(),
        )
        for p in partitions
    ]


def partition_all(g: Graph, num_ranks: int, policy: str = "hash", seed: int = 0, direction: str = "out") -> list[Partition]:
    return [partition_graph(g, r, num_ranks, policy, seed, direction) for r in range(num_ranks)]


def write_partition_dump(path, p: Partition) -> None:
    """Debug dump: ``rank num_ranks num_owned num_edges`` then one line per owned
    vertex, ``global_id deg t0 t1 ...``."""
    with open(path, "w") as fh:
        fh.write(f"{p.rank} {p.num_ranks} {p.num_owned} {p.num_local_edges}\n")
        for i, gid in enumerate(p.owned.tolist()):
            nbrs = p.local_targets[p.local_offsets[i]:p.local_offsets[i + 1]].tolist()
            fh.write(" ".join(map(str, [gid, len(nbrs), *nbrs])) + "\n")
