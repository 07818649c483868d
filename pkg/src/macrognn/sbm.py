"""Stochastic-block-model graphs with block-indicator features, for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph_store import Graph, attach_features, make_undirected, write_edge_list, write_features, write_labels


class SBMConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SBMSpec:
    sizes: tuple[int, ...] = (500, 500)
    p_intra: float = 0.02
    p_inter: float = 0.002
    seed: int = 0
    feature_dim: int | None = None   # default: number of blocks + 6 pure-noise columns
    noise: float = 1.0
    train_frac: float = 0.8

    def __post_init__(self):
        for name in ("p_intra", "p_inter", "train_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SBMConfigError(f"{name}={v} is not a probability")
        if any(s < 0 for s in self.sizes) or not self.sizes:
            raise SBMConfigError("block sizes must be non-negative and non-empty")
        if self.feature_dim is not None and self.feature_dim < len(self.sizes):
            raise SBMConfigError("feature_dim must be at least the number of blocks")

    @property
    def num_vertices(self) -> int:
        return int(sum(self.sizes))

    @property
    def dim(self) -> int:
        return self.feature_dim if self.feature_dim is not None else len(self.sizes) + 6


def generate_sbm(spec: SBMSpec) -> Graph:
    rng = np.random.default_rng(spec.seed)
    starts = np.concatenate([[0], np.cumsum(spec.sizes)]).astype(np.int64)
    src_parts, dst_parts = [], []
    nb = len(spec.sizes)
    for a in range(nb):
        for b in range(a, nb):
            na, nb_ = spec.sizes[a], spec.sizes[b]
            p = spec.p_intra if a == b else spec.p_inter
            hit = rng.random((na, nb_)) < p
            if a == b:
                hit = np.triu(hit, k=1)
            i, j = np.nonzero(hit)
            src_parts.append(i + starts[a])
            dst_parts.append(j + starts[b])
    src = np.concatenate(src_parts) if src_parts else np.zeros(0, np.int64)
    dst = np.concatenate(dst_parts) if dst_parts else np.zeros(0, np.int64)
    g = make_undirected(Graph.from_edges(spec.num_vertices, src, dst))

    n = spec.num_vertices
    labels = np.repeat(np.arange(nb), spec.sizes)
    feats = rng.normal(0.0, spec.noise, size=(n, spec.dim)).astype(np.float32)
    feats[np.arange(n), labels] += 1.0
    order = rng.permutation(n)
    n_train = int(round(spec.train_frac * n))
    train = np.zeros(n, bool)
    train[order[:n_train]] = True
    return attach_features(g, feats, labels, train, ~train)


def write_graph_files(out_dir, g: Graph) -> dict[str, Path]:
    """Write edges.txt, features.bin, labels.bin and meta.txt under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "edges": out / "edges.txt",
        "features": out / "features.bin",
        "labels": out / "labels.bin",
        "meta": out / "meta.txt",
    }
    write_edge_list(paths["edges"], g)
    write_features(paths["features"], g.features)
    write_labels(paths["labels"], g.labels, g.train_mask, g.test_mask)
    num_classes = int(g.labels.max()) + 1 if g.labels.size else 0
    paths["meta"].write_text(
        f"num_vertices={g.num_vertices}\nnum_edges={g.num_edges}\n"
        f"feature_dim={g.feature_dim}\nnum_classes={num_classes}\n"
    )
    return paths
