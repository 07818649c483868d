from __future__ import annotations

import numpy as np


def segment_sum(values: np.ndarray, offsets: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Sum rows of ``values`` over the segments [offsets[i], offsets[i+1]).

    Empty segments produce zero rows. ``offsets[-1]`` must equal ``len(values)``.
    """
    n = offsets.size - 1
    shape = (n,) + values.shape[1:]
    if out is None:
        out = np.zeros(shape, dtype=values.dtype)
    else:
        out[...] = 0
    starts = offsets[:-1]
    nonempty = starts < offsets[1:]
    if values.shape[0] and nonempty.any():
        out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
