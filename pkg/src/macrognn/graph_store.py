"""Immutable CSR/CSC graph container plus the on-disk formats it reads and writes.

File formats
------------
edge list
    text, one ``src dst`` pair per line (whitespace separated). Blank lines and
    lines starting with ``#`` are skipped.
feature file
    8-byte header ``<u32 rows><u32 cols>`` followed by ``rows*cols`` little-endian
    float32 values, row-major.
label file
    8-byte header ``<u32 rows><u32 0>`` followed by ``rows`` little-endian int32
    labels and then ``rows`` uint8 split codes (0 = none, 1 = train, 2 = test).
COO subgraph export
    text. Header line ``num_local num_edges num_layers``; then one ``src dst layer``
    line per sampled edge (local IDs, layer-major, CSR order within a layer);
    then ``num_local`` lines each holding the global ID of local vertex i.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """Malformed input file."""


class GraphBoundsError(IndexError):
    """Vertex ID outside [0, num_vertices)."""


class DimensionError(ValueError):
    pass


class ValidationError(ValueError):
    pass


def build_csr(num_vertices: int, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group edges by ``src``; edges of one source keep their input order."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    counts = np.bincount(src, minlength=num_vertices) if src.size else np.zeros(num_vertices, np.int64)
    offsets = np.zeros(num_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    order = np.argsort(src, kind="stable")
    return offsets, dst[order]


@dataclass(frozen=True, eq=False)
class Graph:
    num_vertices: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    csc_offsets: np.ndarray
    csc_sources: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    train_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None

    @classmethod
    def from_edges(cls, num_vertices: int, src, dst) -> "Graph":
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if src.shape != dst.shape:
            raise DimensionError("src and dst must have the same length")
        for name, arr in (("source", src), ("target", dst)):
            bad = np.flatnonzero((arr < 0) | (arr >= num_vertices))
            if bad.size:
                raise GraphBoundsError(
                    f"{name} ID {arr[bad[0]]} of edge {bad[0]} outside [0, {num_vertices})"
                )
        csr_off, csr_tgt = build_csr(num_vertices, src, dst)
        csc_off, csc_src = build_csr(num_vertices, dst, src)
        for a in (csr_off, csr_tgt, csc_off, csc_src):
            a.setflags(write=False)
        return cls(num_vertices, csr_off, csr_tgt, csc_off, csc_src)

    @property
    def num_edges(self) -> int:
        return int(self.csr_targets.size)

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    def out_degree(self, v=None) -> np.ndarray:
        deg = np.diff(self.csr_offsets)
        return deg if v is None else deg[v]

    def in_degree(self, v=None) -> np.ndarray:
        deg = np.diff(self.csc_offsets)
        return deg if v is None else deg[v]

    def out_neighbors(self, v: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[v]:self.csr_offsets[v + 1]]

    def in_neighbors(self, v: int) -> np.ndarray:
        return self.csc_sources[self.csc_offsets[v]:self.csc_offsets[v + 1]]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) arrays in CSR order."""
        src = np.repeat(np.arange(self.num_vertices, dtype=np.int64), self.out_degree())
        return src, self.csr_targets.copy()


def load_edge_list(path, num_vertices: int) -> Graph:
    src: list[int] = []
    dst: list[int] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'src dst', got {s!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer vertex ID in {s!r}") from None
            if not (0 <= u < num_vertices and 0 <= v < num_vertices):
                raise GraphBoundsError(f"{path}:{lineno}: edge ({u}, {v}) outside [0, {num_vertices})")
            src.append(u)
            dst.append(v)
    return Graph.from_edges(num_vertices, src, dst)


def write_edge_list(path, g: Graph) -> None:
    src, dst = g.edges()
    with open(path, "w") as fh:
        fh.writelines(f"{u} {v}\n" for u, v in zip(src.tolist(), dst.tolist()))


def make_undirected(g: Graph) -> Graph:
    """Add the reverse of every edge. Duplicates and self-loops are kept."""
    src, dst = g.edges()
    out = Graph.from_edges(g.num_vertices, np.concatenate([src, dst]), np.concatenate([dst, src]))
    return replace(
        out,
        features=g.features,
        labels=g.labels,
        train_mask=g.train_mask,
        test_mask=g.test_mask,
    )


def attach_features(g: Graph, features, labels, train_mask, test_mask) -> Graph:
    features = np.asarray(features)
    if features.ndim != 2:
        raise DimensionError(f"features must be 2-D, got shape {features.shape}")
    if features.shape[0] != g.num_vertices:
        raise DimensionError(f"{features.shape[0]} feature rows for {g.num_vertices} vertices")
    labels = np.asarray(labels, dtype=np.int64)
    train_mask = np.asarray(train_mask, dtype=bool)
    test_mask = np.asarray(test_mask, dtype=bool)
    for name, arr in (("labels", labels), ("train_mask", train_mask), ("test_mask", test_mask)):
        if arr.shape != (g.num_vertices,):
            raise DimensionError(f"{name} has shape {arr.shape}, expected ({g.num_vertices},)")
    overlap = np.flatnonzero(train_mask & test_mask)
    if overlap.size:
        raise ValidationError(f"vertex {overlap[0]} is in both train and test masks")
    return replace(g, features=features, labels=labels, train_mask=train_mask, test_mask=test_mask)


_HDR = struct.Struct("<II")


def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    rows, cols = features.shape
    with open(path, "wb") as fh:
        fh.write(_HDR.pack(rows, cols))
        fh.write(features.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HDR.size:
        raise GraphFormatError(f"{path}: truncated header")
    rows, cols = _HDR.unpack_from(data)
    body = np.frombuffer(data, dtype="<f4", offset=_HDR.size)
    if body.size != rows * cols:
        raise GraphFormatError(f"{path}: header says {rows}x{cols}, found {body.size} values")
    return body.reshape(rows, cols).astype(np.float32)


def write_labels(path, labels, train_mask, test_mask) -> None:
    labels = np.asarray(labels, dtype="<i4")
    split = np.zeros(labels.size, dtype=np.uint8)
    split[np.asarray(train_mask, bool)] = 1
    split[np.asarray(test_mask, bool)] = 2
    with open(path, "wb") as fh:
        fh.write(_HDR.pack(labels.size, 0))
        fh.write(labels.tobytes())
        fh.write(split.tobytes())


def read_labels(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    rows, _ = _HDR.unpack_from(data)
    if len(data) != _HDR.size + 5 * rows:
        raise GraphFormatError(f"{path}: expected {rows} labels and split codes")
    labels = np.frombuffer(data, dtype="<i4", count=rows, offset=_HDR.size).astype(np.int64)
    split = np.frombuffer(data, dtype=np.uint8, count=rows, offset=_HDR.size + 4 * rows)
    return labels, split == 1, split == 2


def load_graph(edges_path, num_vertices: int, features_path=None, labels_path=None, undirected=False) -> Graph:
    g = load_edge_list(edges_path, num_vertices)
    if undirected:
        g = make_undirected(g)
    if features_path is not None:
        feats = read_features(features_path)
        labels, train, test = read_labels(labels_path)
        g = attach_features(g, feats, labels, train, test)
    return g


def export_subgraph_coo(sg, path) -> None:
    """Write a sampled subgraph as text COO (see module docstring)."""
    lines = []
    total = 0
    for k, layer in enumerate(sg.layers):
        src = np.repeat(np.arange(layer.num_src, dtype=np.int64), np.diff(layer.csr_offsets))
        lines.extend(f"{u} {v} {k}\n" for u, v in zip(src.tolist(), layer.csr_targets.tolist()))
        total += layer.num_edges
    with open(path, "w") as fh:
        fh.write(f"{sg.num_vertices} {total} {sg.layer_count}\n")
        fh.writelines(lines)
        fh.writelines(f"{gid}\n" for gid in sg.global_ids.tolist())


def read_subgraph_coo(path) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Return (num_layers, num_local, edges[n, 3] as (src, dst, layer), global_ids)."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 3:
            raise GraphFormatError(f"{path}: bad header")
        n, m, layers = (int(x) for x in head)
        edges = np.array([[int(x) for x in fh.readline().split()] for _ in range(m)], dtype=np.int64).reshape(m, 3)
        gids = np.array([int(fh.readline()) for _ in range(n)], dtype=np.int64)
    return layers, n, edges, gids
