from dataclasses import replace

import numpy as np
import pytest

from macrognn.nn import LayerConfigError, softmax_xent
from macrognn.nn.model import GNNModel, ModelConfig, load_checkpoint, read_checkpoint, save_checkpoint

from conftest import random_graph, sample_subgraphs
from gradcheck import numeric_grad, rel_error


def _subgraph(kind, fans, cache_kind=None, seed=4, dim=5):
    g = random_graph(24, 50, seed=seed, dim=dim)
    sg = sample_subgraphs(g, fans, minibatch_size=3, cache_kind=cache_kind)[0]
    cached = None if sg.cached is None else sg.cached.astype(np.float64)
    return replace(sg, features=sg.features.astype(np.float64), cached=cached)


def model_gradcheck(model: GNNModel, sg, epoch=1):
    def loss():
        model.reset()
        return softmax_xent(model.forward(sg, train=True, epoch=epoch), sg.labels)[0]

    model.zero_grad()
    logits = model.forward(sg, train=True, epoch=epoch)
    _, grad = softmax_xent(logits, sg.labels)
    dx = model.backward(grad).copy()
    full = np.zeros_like(sg.features)
    full[: dx.shape[0]] = dx
    errs = {"input": rel_error(full, numeric_grad(loss, sg.features))}
    for (name, p), (_, g) in zip(model.named_parameters(), model.named_grads()):
        analytic = g.copy()
        numeric = numeric_grad(loss, p)
        if np.abs(numeric).max(initial=0.0) < 1e-8:
            errs[name] = float(np.abs(analytic - numeric).max(initial=0.0))
        else:
            errs[name] = rel_error(analytic, numeric)
    return errs


@pytest.mark.parametrize("kind", ["sage", "gcn"])
def test_full_model_gradients_with_dropout(kind):
    sg = _subgraph(kind, (3, 2, 2))
    cfg = ModelConfig(kind=kind, in_dim=5, hidden=6, num_classes=3, num_layers=3, dropout=0.3)
    model = GNNModel(cfg, rng_root=9, dtype=np.float64)
    errs = model_gradcheck(model, sg)
    assert max(errs.values()) < 1e-6, errs


def test_full_gin_model_gradients():
    sg = _subgraph("gin", (3, 3))
    cfg = ModelConfig(kind="gin", in_dim=5, hidden=4, num_classes=2, num_layers=2, dropout=0.0)
    errs = model_gradcheck(GNNModel(cfg, rng_root=2, dtype=np.float64), sg)
    assert max(errs.values()) < 1e-5, errs


def test_cached_model_gradients():
    sg = _subgraph("sage", (4, 3), cache_kind="mean")
    assert sg.cached is not None and sg.layer_count == 1
    cfg = ModelConfig(kind="sage", in_dim=5, hidden=4, num_classes=2, num_layers=2, dropout=0.2)
    errs = model_gradcheck(GNNModel(cfg, rng_root=1, dtype=np.float64), sg)
    assert max(errs.values()) < 1e-6, errs


def test_layer_count_mismatch_is_rejected():
    sg = _subgraph("sage", (3, 2))
    model = GNNModel(ModelConfig(in_dim=5, hidden=4, num_layers=3), dtype=np.float64)
    with pytest.raises(LayerConfigError):
        model.forward(sg)


@pytest.mark.parametrize("bad", [dict(kind="gat"), dict(num_layers=0), dict(dropout=1.0)])
def test_model_config_errors(bad):
    with pytest.raises(LayerConfigError):
        ModelConfig(**bad)


def test_init_is_keyed_by_rng_root():
    cfg = ModelConfig(in_dim=5, hidden=8)
    assert GNNModel(cfg, 3).param_hash() == GNNModel(cfg, 3).param_hash()
    assert GNNModel(cfg, 3).param_hash() != GNNModel(cfg, 4).param_hash()


@pytest.mark.parametrize("kind", ["sage", "gin"])
def test_checkpoint_roundtrip(tmp_path, kind):
    cfg = ModelConfig(kind=kind, in_dim=5, hidden=8, num_layers=2)
    a, b = GNNModel(cfg, 1), GNNModel(cfg, 2)
    for _, buf in a.named_buffers():
        buf[...] = np.arange(buf.size).reshape(buf.shape)
    save_checkpoint(tmp_path / "ck.bin", a)
    load_checkpoint(tmp_path / "ck.bin", b)
    assert a.param_hash() == b.param_hash()
    for (_, x), (_, y) in zip(a.named_buffers(), b.named_buffers()):
        assert np.array_equal(x, y)
    assert set(read_checkpoint(tmp_path / "ck.bin")) == {n for n, _ in a.named_parameters() + a.named_buffers()}


def test_checkpoint_rejects_wrong_shape_and_magic(tmp_path):
    save_checkpoint(tmp_path / "ck.bin", GNNModel(ModelConfig(in_dim=5, hidden=8), 0))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck.bin", GNNModel(ModelConfig(in_dim=5, hidden=16), 0))
    (tmp_path / "junk.bin").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "junk.bin")
