"""Stacked GNN model over a sampled subgraph, plus checkpoint I/O.

Checkpoint layout (little-endian): magic ``b"MGCK"``, u32 version (1), u32
tensor count; then per tensor: u16 name length, UTF-8 name, u8 dtype code
(0 = float32, 1 = float64), u8 ndim, ``ndim`` u32 dims, raw row-major data.
Parameters come first in :meth:`GNNModel.named_parameters` order, then
buffers (batch-norm running statistics).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import rng
from .functional import softmax_xent
from .layers import Dropout, GCNConv, GINConv, LayerConfigError, ReLU, SAGEConv
from .optim import Adam

LAYER_TYPES = ("sage", "gcn", "gin")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "sage"
    in_dim: int = 0
    hidden: int = 256
    num_classes: int = 2
    num_layers: int = 3
    dropout: float = 0.5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in LAYER_TYPES:
            raise LayerConfigError(f"layer type must be one of {LAYER_TYPES}, got {self.kind!r}")
        if self.num_layers < 1:
            raise LayerConfigError("num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise LayerConfigError(f"dropout must be in [0, 1), got {self.dropout}")


class GNNModel:
    def __init__(self, cfg: ModelConfig, rng_root: int = 0, dtype=np.float32, reuse_buffers: bool = True):
        self.cfg = cfg
        self.rng_root = rng_root
        self.dtype = np.dtype(dtype)
        L = cfg.num_layers
        dims = [cfg.in_dim] + [cfg.hidden] * (L - 1) + [cfg.num_classes]
        self.convs = []
        self.acts: list[tuple[ReLU, Dropout] | None] = []
        for l in range(L):
            key = rng.key_scalar(rng_root, rng.DOMAIN_INIT, l)
            last = l == L - 1
            if cfg.kind == "sage":
                conv = SAGEConv(dims[l], dims[l + 1], key, dtype, reuse_buffers)
            elif cfg.kind == "gcn":
                conv = GCNConv(dims[l], dims[l + 1], key, dtype, reuse_buffers)
            else:
                conv = GINConv(dims[l], dims[l + 1], cfg.hidden, key, dtype, final=last,
                               bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps, reuse_buffers=reuse_buffers)
            self.convs.append(conv)
            if cfg.kind != "gin" and not last:
                self.acts.append((ReLU(reuse_buffers), Dropout(cfg.dropout, reuse_buffers)))
            else:
                self.acts.append(None)
        self.optimizer = Adam([p for _, p in self.named_parameters()], cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    # -- parameters ------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"conv{l}.{n}", p) for l, c in enumerate(self.convs) for n, p in c.params.items()]

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        return [(f"conv{l}.{n}", g) for l, c in enumerate(self.convs) for n, g in c.grads.items()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"conv{l}.{n}", b) for l, c in enumerate(self.convs) for n, b in c.buffers.items()]

    def zero_grad(self) -> None:
        for c in self.convs:
            c.zero_grad()

    def flat_grads(self) -> np.ndarray:
        gs = [g.ravel() for _, g in self.named_grads()]
        return np.concatenate(gs) if gs else np.zeros(0, self.dtype)

    def set_flat_grads(self, flat: np.ndarray) -> None:
        i = 0
        for _, g in self.named_grads():
            g[...] = flat[i:i + g.size].reshape(g.shape)
            i += g.size

    def flat_buffers(self) -> np.ndarray:
        bs = [b.ravel() for _, b in self.named_buffers()]
        return np.concatenate(bs) if bs else np.zeros(0, self.dtype)

    def set_flat_buffers(self, flat: np.ndarray) -> None:
        i = 0
        for _, b in self.named_buffers():
            b[...] = flat[i:i + b.size].reshape(b.shape)
            i += b.size

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def step(self) -> None:
        self.optimizer.step([g for _, g in self.named_grads()])

    def reset(self) -> None:
        for c, act in zip(self.convs, self.acts):
            c.reset()
            if act:
                for a in act:
                    a.reset()

    # -- compute ---------------------------------------------------------------

    def forward(self, sg, train: bool = True, epoch: int = 0) -> np.ndarray:
        """Logits for the seed vertices of ``sg``.

        If ``sg.cached`` is set, the first layer aggregates from the cache and
        ``sg.layers`` holds one block fewer than the model depth.
        """
        L = self.cfg.num_layers
        use_cache = sg.cached is not None
        expected = L - 1 if use_cache else L
        if sg.layer_count != expected:
            raise LayerConfigError(f"{L}-layer model got a subgraph with {sg.layer_count} sampled layers"
                                   f" ({'with' if use_cache else 'without'} cache)")
        h = sg.features.astype(self.dtype, copy=False)
        for l, (conv, act) in enumerate(zip(self.convs, self.acts)):
            k = L - 1 - l
            if use_cache and l == 0:
                h = conv.forward(None, h, cached=sg.cached.astype(self.dtype, copy=False), train=train,
                                 src_degree=sg.global_degree)
            else:
                block = sg.layers[k]
                h = conv.forward(block, h, train=train, src_degree=sg.global_degree[:block.num_src])
            if act is not None:
                relu, drop = act
                h = relu.forward(h, train)
                key = rng.key_scalar(self.rng_root, rng.DOMAIN_DROPOUT, epoch, sg.minibatch_id, l)
                h = drop.forward(h, train, key=key)
        return h

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = grad_logits
        for conv, act in zip(reversed(self.convs), reversed(self.acts)):
            if act is not None:
                relu, drop = act
                g = drop.backward(g)
                g = relu.backward(g)
            g = conv.backward(g)
        return g

    def loss_and_backward(self, sg, epoch: int = 0) -> float:
        """Forward in train mode, softmax cross-entropy over seeds, backward."""
        logits = self.forward(sg, train=True, epoch=epoch)
        loss, grad = softmax_xent(logits, sg.labels)
        self.backward(grad)
        return loss

    def predict(self, sg) -> np.ndarray:
        if sg.num_seeds == 0:
            return np.zeros(0, dtype=np.int64)
        return self.forward(sg, train=False).argmax(axis=1)


_CK = struct.Struct("<4sII")
_DT = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DT_INV = {v: k for k, v in _DT.items()}


def save_checkpoint(path, model: GNNModel) -> None:
    tensors = model.named_parameters() + model.named_buffers()
    with open(path, "wb") as fh:
        fh.write(_CK.pack(b"MGCK", 1, len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", _DT[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    magic, version, count = _CK.unpack_from(data)
    if magic != b"MGCK" or version != 1:
        raise ValueError(f"{path}: not a version-1 checkpoint")
    off = _CK.size
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _DT_INV[code].newbyteorder("<")
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += size
    return out


def load_checkpoint(path, model: GNNModel) -> None:
    tensors = read_checkpoint(path)
    for name, arr in model.named_parameters() + model.named_buffers():
        if name not in tensors or tensors[name].shape != arr.shape:
            raise ValueError(f"checkpoint missing or mis-shaped tensor {name}")
        arr[...] = tensors[name]
