"""Native GNN layers with hand-written backward passes.

Each layer keeps grow-only scratch buffers and reuses them for every call, so
steady-state training does no per-step allocation of large tensors. The price
is a strict forward -> backward alternation: a second forward before backward
would overwrite the activations the backward pass needs.

Graph inputs come as a :class:`~macrognn.sampler.LayerBlock` (one sampling
layer, destinations are a prefix of sources). ``h`` holds one row per source;
outputs hold one row per destination.
"""

from __future__ import annotations

import numpy as np

from .. import rng
from .functional import segment_sum


class PhaseError(RuntimeError):
    """forward/backward called out of order."""


class LayerConfigError(ValueError):
    pass


class Scratch:
    """Named grow-only buffers. With ``reuse=False`` every request allocates."""

    def __init__(self, reuse: bool = True):
        self.reuse = reuse
        self._bufs: dict[str, np.ndarray] = {}

    def get(self, name: str, shape, dtype, zero: bool = False) -> np.ndarray:
        n = int(np.prod(shape))
        if not self.reuse:
            return np.zeros(shape, dtype) if zero else np.empty(shape, dtype)
        buf = self._bufs.get(name)
        if buf is None or buf.size < n or buf.dtype != dtype:
            buf = np.empty(max(n, 1), dtype)
            self._bufs[name] = buf
        view = buf[:n].reshape(shape)
        if zero:
            view[...] = 0
        return view

    @property
    def nbytes(self) -> int:
        return sum(b.nbytes for b in self._bufs.values())


class Layer:
    def __init__(self, reuse_buffers: bool = True):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.scratch = Scratch(reuse_buffers)
        self.phase = "idle"

    def _begin_forward(self, train: bool) -> None:
        if self.phase != "idle":
            raise PhaseError(f"{type(self).__name__}: forward called twice without backward")
        if train:
            self.phase = "forwarded"

    def _begin_backward(self) -> None:
        if self.phase != "forwarded":
            raise PhaseError(f"{type(self).__name__}: backward called without a preceding training forward")
        self.phase = "idle"

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def reset(self) -> None:
        self.phase = "idle"

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def _mm(self, name, a, b):
        out = self.scratch.get(name, (a.shape[0], b.shape[1]), np.result_type(a, b))
        return np.matmul(a, b, out=out)


def _check_rows(h: np.ndarray, rows: int, what: str) -> None:
    if h.ndim != 2 or h.shape[0] < rows:
        raise LayerConfigError(f"{what}: need at least {rows} input rows, got shape {h.shape}")


class SAGEConv(Layer):
    """out[v] = h[v] W_self + mean_{u in sampled N(v)} h[u] W_neigh (empty mean = 0)."""

    def __init__(self, in_dim: int, out_dim: int, key: int = 0, dtype=np.float32, reuse_buffers: bool = True):
        super().__init__(reuse_buffers)
        self.in_dim, self.out_dim = in_dim, out_dim
        self._add_param("W_self", rng.glorot_uniform(rng.key_scalar(key, 0), in_dim, out_dim, (in_dim, out_dim), dtype))
        self._add_param("W_neigh", rng.glorot_uniform(rng.key_scalar(key, 1), in_dim, out_dim, (in_dim, out_dim), dtype))

    def forward(self, block, h: np.ndarray, cached: np.ndarray | None = None, train: bool = True, **_) -> np.ndarray:
        self._begin_forward(train)
        W_self, W_neigh = self.params["W_self"], self.params["W_neigh"]
        if h.shape[1] != self.in_dim:
            raise LayerConfigError(f"SAGEConv expects {self.in_dim} input columns, got {h.shape[1]}")
        if cached is not None:
            n_dst = cached.shape[0]
            _check_rows(h, n_dst, "SAGEConv")
            agg = cached
            inv = None
        else:
            n_dst = block.num_dst
            _check_rows(h, block.num_src, "SAGEConv")
            gathered = self.scratch.get("gathered", (block.num_edges, self.in_dim), h.dtype)
            np.take(h, block.csc_sources, axis=0, out=gathered)
            agg = segment_sum(gathered, block.csc_offsets, self.scratch.get("agg", (n_dst, self.in_dim), h.dtype))
            inv = (1.0 / np.maximum(block.dest_in_degree, 1)).astype(h.dtype)
            agg *= inv[:, None]
        h_dst = h[:n_dst]
        out = self._mm("out", h_dst, W_self)
        out += self._mm("tmp", agg, W_neigh)
        self._saved = (block, h, h_dst, agg, inv, cached is not None)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self._begin_backward()
        block, h, h_dst, agg, inv, use_cache = self._saved
        self._saved = None
        W_self, W_neigh = self.params["W_self"], self.params["W_neigh"]
        self.grads["W_self"] += h_dst.T @ grad_out
        self.grads["W_neigh"] += agg.T @ grad_out
        n_dst = h_dst.shape[0]
        rows = n_dst if use_cache else h.shape[0]
        grad_in = self.scratch.get("grad_in", (rows, self.in_dim), grad_out.dtype, zero=not use_cache)
        if use_cache:
            np.matmul(grad_out, W_self.T, out=grad_in)
            return grad_in
        g_agg = self._mm("g_agg", grad_out, W_neigh.T)
        g_agg *= inv[:, None]
        spread = self.scratch.get("spread", (block.num_edges, self.in_dim), grad_out.dtype)
        np.take(g_agg, block.csr_targets, axis=0, out=spread)
        contrib = segment_sum(spread, block.csr_offsets, self.scratch.get("contrib", (block.num_src, self.in_dim), grad_out.dtype))
        grad_in[:block.num_src] += contrib
        grad_in[:n_dst] += self._mm("g_self", grad_out, W_self.T)
        return grad_in


class GCNConv(Layer):
    """Symmetric-normalized sum with an implicit self term, then one linear map.

    Sampled path: c_uv = 1/sqrt((din_v+1)(deg_u+1)), c_vv = 1/(din_v+1) where
    din_v is the sampled in-degree and deg_u the global degree. Cached path:
    a_v = cached[v] + h[v]/(deg_v+1) with global degrees throughout.
    """

    def __init__(self, in_dim: int, out_dim: int, key: int = 0, dtype=np.float32, reuse_buffers: bool = True):
        super().__init__(reuse_buffers)
        self.in_dim, self.out_dim = in_dim, out_dim
        self._add_param("W", rng.glorot_uniform(rng.key_scalar(key, 0), in_dim, out_dim, (in_dim, out_dim), dtype))

    @staticmethod
    def edge_coefficients(block, src_degree: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(CSC-order, CSR-order) edge coefficients."""
        din = block.dest_in_degree.astype(np.float64)
        dst_csc = np.repeat(np.arange(block.num_dst), np.diff(block.csc_offsets))
        c_csc = 1.0 / np.sqrt((din[dst_csc] + 1.0) * (src_degree[block.csc_sources] + 1.0))
        src_csr = np.repeat(np.arange(block.num_src), np.diff(block.csr_offsets))
        c_csr = 1.0 / np.sqrt((din[block.csr_targets] + 1.0) * (src_degree[src_csr] + 1.0))
        return c_csc, c_csr

    def forward(self, block, h, cached=None, train=True, src_degree=None, **_):
        self._begin_forward(train)
        if h.shape[1] != self.in_dim:
            raise LayerConfigError(f"GCNConv expects {self.in_dim} input columns, got {h.shape[1]}")
        if src_degree is None:
            raise LayerConfigError("GCNConv needs global degrees of the source vertices")
        deg = np.asarray(src_degree, dtype=np.float64)
        if cached is not None:
            n_dst = cached.shape[0]
            _check_rows(h, n_dst, "GCNConv")
            self_coef = (1.0 / (deg[:n_dst] + 1.0)).astype(h.dtype)
            a = self.scratch.get("a", (n_dst, self.in_dim), h.dtype)
            np.multiply(h[:n_dst], self_coef[:, None], out=a)
            a += cached
            c_csr = None
        else:
            n_dst = block.num_dst
            _check_rows(h, block.num_src, "GCNConv")
            c_csc, c_csr = self.edge_coefficients(block, deg)
            c_csc, c_csr = c_csc.astype(h.dtype), c_csr.astype(h.dtype)
            self_coef = (1.0 / (block.dest_in_degree + 1.0)).astype(h.dtype)
            gathered = self.scratch.get("gathered", (block.num_edges, self.in_dim), h.dtype)
            np.take(h, block.csc_sources, axis=0, out=gathered)
            gathered *= c_csc[:, None]
            a = segment_sum(gathered, block.csc_offsets, self.scratch.get("a", (n_dst, self.in_dim), h.dtype))
            a += h[:n_dst] * self_coef[:, None]
        out = self._mm("out", a, self.params["W"])
        self._saved = (block, h.shape[0], n_dst, a, self_coef, c_csr, cached is not None)
        return out

    def backward(self, grad_out):
        self._begin_backward()
        block, rows, n_dst, a, self_coef, c_csr, use_cache = self._saved
        self._saved = None
        W = self.params["W"]
        self.grads["W"] += a.T @ grad_out
        g_a = self._mm("g_a", grad_out, W.T)
        out_rows = n_dst if use_cache else rows
        grad_in = self.scratch.get("grad_in", (out_rows, self.in_dim), grad_out.dtype, zero=True)
        if not use_cache:
            spread = self.scratch.get("spread", (block.num_edges, self.in_dim), grad_out.dtype)
            np.take(g_a, block.csr_targets, axis=0, out=spread)
            spread *= c_csr[:, None]
            contrib = segment_sum(spread, block.csr_offsets, self.scratch.get("contrib", (block.num_src, self.in_dim), grad_out.dtype))
            grad_in[:block.num_src] += contrib
        grad_in[:n_dst] += g_a * self_coef[:, None]
        return grad_in


class BatchNorm(Layer):
    """Batch normalization over rows with affine scale/shift."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32, reuse_buffers: bool = True):
        super().__init__(reuse_buffers)
        self.dim, self.momentum, self.eps = dim, momentum, eps
        self._add_param("gamma", np.ones(dim, dtype))
        self._add_param("beta", np.zeros(dim, dtype))
        self.buffers["running_mean"] = np.zeros(dim, dtype)
        self.buffers["running_var"] = np.ones(dim, dtype)

    def forward(self, x, train=True):
        n = x.shape[0]
        if train and n < 2:
            raise LayerConfigError("batch normalization needs at least 2 rows in training mode")
        self._begin_forward(train)
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - m
            rm += m * mu
            rv *= 1 - m
            rv += m * var * (n / (n - 1))
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = self.scratch.get("xhat", x.shape, x.dtype)
        np.subtract(x, mu, out=xhat)
        xhat *= inv_std
        out = self.scratch.get("out", x.shape, x.dtype)
        np.multiply(xhat, self.params["gamma"], out=out)
        out += self.params["beta"]
        self._saved = (xhat, inv_std)
        return out

    def backward(self, dy):
        self._begin_backward()
        xhat, inv_std = self._saved
        self._saved = None
        n = dy.shape[0]
        self.grads["gamma"] += (dy * xhat).sum(axis=0)
        self.grads["beta"] += dy.sum(axis=0)
        dxhat = dy * self.params["gamma"]
        dx = self.scratch.get("dx", dy.shape, dy.dtype)
        dx[...] = n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        dx *= inv_std / n
        return dx


class GINConv(Layer):
    """0-epsilon GIN: a = h[v] + sum of sampled neighbors, then
    Linear -> BN -> ReLU -> Linear (-> BN -> ReLU unless ``final``)."""

    def __init__(self, in_dim, out_dim, hidden=None, key=0, dtype=np.float32, final=False,
                 bn_momentum=0.1, bn_eps=1e-5, reuse_buffers=True):
        super().__init__(reuse_buffers)
        hidden = hidden or out_dim
        self.in_dim, self.out_dim, self.hidden, self.final = in_dim, out_dim, hidden, final
        self._add_param("W1", rng.glorot_uniform(rng.key_scalar(key, 0), in_dim, hidden, (in_dim, hidden), dtype))
        self._add_param("b1", np.zeros(hidden, dtype))
        self._add_param("W2", rng.glorot_uniform(rng.key_scalar(key, 1), hidden, out_dim, (hidden, out_dim), dtype))
        self._add_param("b2", np.zeros(out_dim, dtype))
        self.bn1 = BatchNorm(hidden, bn_momentum, bn_eps, dtype, reuse_buffers)
        self.bn2 = None if final else BatchNorm(out_dim, bn_momentum, bn_eps, dtype, reuse_buffers)
        for name, bn in (("bn1", self.bn1), ("bn2", self.bn2)):
            if bn is None:
                continue
            for p in bn.params:
                self.params[f"{name}.{p}"] = bn.params[p]
                self.grads[f"{name}.{p}"] = bn.grads[p]
            for b in bn.buffers:
                self.buffers[f"{name}.{b}"] = bn.buffers[b]

    def reset(self):
        super().reset()
        self.bn1.reset()
        if self.bn2 is not None:
            self.bn2.reset()

    def forward(self, block, h, cached=None, train=True, **_):
        if h.shape[1] != self.in_dim:
            raise LayerConfigError(f"GINConv expects {self.in_dim} input columns, got {h.shape[1]}")
        n_rows = cached.shape[0] if cached is not None else block.num_dst
        if train and n_rows < 2:
            raise LayerConfigError("GIN batch normalization needs at least 2 destination rows in training mode")
        self._begin_forward(train)
        if cached is not None:
            n_dst = cached.shape[0]
            _check_rows(h, n_dst, "GINConv")
            a = self.scratch.get("a", (n_dst, self.in_dim), h.dtype)
            np.add(h[:n_dst], cached, out=a)
        else:
            n_dst = block.num_dst
            _check_rows(h, block.num_src, "GINConv")
            gathered = self.scratch.get("gathered", (block.num_edges, self.in_dim), h.dtype)
            np.take(h, block.csc_sources, axis=0, out=gathered)
            a = segment_sum(gathered, block.csc_offsets, self.scratch.get("a", (n_dst, self.in_dim), h.dtype))
            a += h[:n_dst]
        z1 = self._mm("z1", a, self.params["W1"])
        z1 += self.params["b1"]
        y1 = self.bn1.forward(z1, train)
        r1 = self.scratch.get("r1", y1.shape, y1.dtype)
        np.maximum(y1, 0, out=r1)
        z2 = self._mm("z2", r1, self.params["W2"])
        z2 += self.params["b2"]
        if self.final:
            out = z2
        else:
            y2 = self.bn2.forward(z2, train)
            out = self.scratch.get("out", y2.shape, y2.dtype)
            np.maximum(y2, 0, out=out)
        self._saved = (block, h.shape[0], n_dst, a, y1, r1, out, cached is not None)
        return out

    def backward(self, grad_out):
        self._begin_backward()
        block, rows, n_dst, a, y1, r1, out, use_cache = self._saved
        self._saved = None
        if self.final:
            g_z2 = grad_out
        else:
            g_y2 = grad_out * (out > 0)
            g_z2 = self.bn2.backward(g_y2)
        self.grads["W2"] += r1.T @ g_z2
        self.grads["b2"] += g_z2.sum(axis=0)
        g_r1 = self._mm("g_r1", g_z2, self.params["W2"].T)
        g_r1 *= y1 > 0
        g_z1 = self.bn1.backward(g_r1)
        self.grads["W1"] += a.T @ g_z1
        self.grads["b1"] += g_z1.sum(axis=0)
        g_a = self._mm("g_a", g_z1, self.params["W1"].T)
        out_rows = n_dst if use_cache else rows
        grad_in = self.scratch.get("grad_in", (out_rows, self.in_dim), grad_out.dtype, zero=True)
        if not use_cache:
            spread = self.scratch.get("spread", (block.num_edges, self.in_dim), grad_out.dtype)
            np.take(g_a, block.csr_targets, axis=0, out=spread)
            grad_in[:block.num_src] += segment_sum(
                spread, block.csr_offsets, self.scratch.get("contrib", (block.num_src, self.in_dim), grad_out.dtype))
        grad_in[:n_dst] += g_a
        return grad_in


class ReLU(Layer):
    def forward(self, x, train=True):
        self._begin_forward(train)
        out = self.scratch.get("out", x.shape, x.dtype)
        np.maximum(x, 0, out=out)
        self._saved = out
        return out

    def backward(self, dy):
        self._begin_backward()
        out, self._saved = self._saved, None
        dx = self.scratch.get("dx", dy.shape, dy.dtype)
        np.multiply(dy, out > 0, out=dx)
        return dx


def dropout_mask(key: int, shape, p: float) -> np.ndarray:
    """Keep-mask from the keyed stream: element i is kept iff u_i >= p."""
    n = int(np.prod(shape))
    u = rng.uniform(rng.stream(np.uint64(key), n)) if n else np.zeros(0)
    return (u >= p).reshape(shape)


class Dropout(Layer):
    """Inverted dropout. The mask is a pure function of the key passed to forward."""

    def __init__(self, p: float = 0.5, reuse_buffers: bool = True):
        if not 0.0 <= p < 1.0:
            raise LayerConfigError(f"dropout probability must be in [0, 1), got {p}")
        super().__init__(reuse_buffers)
        self.p = p

    def forward(self, x, train=True, key: int = 0):
        self._begin_forward(train)
        if not train or self.p == 0.0:
            self._saved = None
            return x
        scale = x.dtype.type(1.0 / (1.0 - self.p))
        keep = dropout_mask(key, x.shape, self.p)
        out = self.scratch.get("out", x.shape, x.dtype)
        np.multiply(x, keep, out=out)
        out *= scale
        self._saved = (keep, scale)
        return out

    def backward(self, dy):
        self._begin_backward()
        saved, self._saved = self._saved, None
        if saved is None:
            return dy
        keep, scale = saved
        dx = self.scratch.get("dx", dy.shape, dy.dtype)
        np.multiply(dy, keep, out=dx)
        dx *= scale
        return dx
