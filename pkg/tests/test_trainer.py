import numpy as np
import pytest

from macrognn.graph_store import Graph, attach_features
from macrognn.netsim import Fabric, run_ranks
from macrognn.nn.model import GNNModel, ModelConfig, save_checkpoint
from macrognn.sbm import SBMSpec, generate_sbm
from macrognn.trainer import ConfigError, TrainConfig, evaluate, evaluate_distributed, setup, train_distributed


def _cfg(g, **kw):
    model = kw.pop("model", {})
    fans = kw.pop("fans", (5, 5))
    model = {"hidden": 16, **model}
    m = ModelConfig(in_dim=g.feature_dim, num_classes=int(g.labels.max()) + 1, num_layers=len(fans), **model)
    return TrainConfig(fans=fans, model=m, **{"epochs": 1, "minibatch_size": 8, **kw})


def test_one_rank_b1_matches_b_all(small_sbm):
    hashes = {}
    for B in (1, None):
        res = train_distributed(small_sbm, 1, _cfg(small_sbm, epochs=2, macrobatch_size=B))
        hashes[B] = [r.param_hash for r in res.reports[0]]
    assert hashes[1] == hashes[None]


def test_zero_learning_rate_leaves_parameters(small_sbm):
    cfg = _cfg(small_sbm, epochs=2, model=dict(lr=0.0))
    start = GNNModel(cfg.model, cfg.rng_root).param_hash()
    res = train_distributed(small_sbm, 4, cfg)
    assert all(r.param_hash == start for reps in res.reports for r in reps)


def test_hashes_agree_across_ranks_after_every_step(small_sbm):
    seen: dict[int, list[str]] = {}

    def hook(rank, sg, local, avg, model):
        seen.setdefault(rank, []).append(model.param_hash())

    train_distributed(small_sbm, 3, _cfg(small_sbm, macrobatch_size=2), on_step=hook)
    assert len({len(v) for v in seen.values()}) == 1 and seen[0]
    for step in zip(*seen.values()):
        assert len(set(step)) == 1


def test_gradient_average_is_scale_free(small_sbm):
    """Averaging identical gradients from n ranks returns the gradient itself."""
    model = GNNModel(ModelConfig(in_dim=small_sbm.feature_dim, hidden=4, num_layers=1), 0)
    fab = Fabric(4)
    g = np.arange(5, dtype=np.float32)
    out = run_ranks(fab, lambda r: fab.allreduce_mean(r, g.copy(), tag="grad"))
    assert all(np.array_equal(o, g) for o in out)
    assert model.flat_grads().size > 0


def test_counters_are_deterministic(small_sbm):
    def run():
        res = train_distributed(small_sbm, 2, _cfg(small_sbm, epochs=2, macrobatch_size=3, feature_round=2))
        return [(r.counters.to_lines(), r.param_hash, r.loss) for reps in res.reports for r in reps]

    assert run() == run()


def test_epoch_report_fields(small_sbm):
    res = train_distributed(small_sbm, 2, _cfg(small_sbm, epochs=2))
    for reps in res.reports:
        assert [r.epoch for r in reps] == [0, 1]
        assert set(reps[0].seconds) == {"topo", "feat", "export", "forward", "backward"}
        assert reps[0].test_accuracy is None and reps[1].test_accuracy is not None
        assert reps[1].counters.relays_by_tag.get("grad", 0) > 0
    assert res.final_accuracy == res.reports[1][-1].test_accuracy


def test_untrained_accuracy_is_near_chance():
    g = generate_sbm(SBMSpec(sizes=(100, 100), seed=1))
    accs = []
    for root in range(10):
        cfg = _cfg(g, rng_root=root)
        parts, models = setup(g, 1, cfg)
        fab = Fabric(1)
        accs.append(run_ranks(fab, lambda r: evaluate(fab, parts[r], models[r], cfg))[0])
    assert abs(np.mean(accs) - 0.5) <= 0.1, accs


def test_overfits_a_ten_vertex_graph():
    # Train and test masks must be disjoint, so the test set is an exact copy
    # of the 10-vertex training ring: memorizing one means classifying the other.
    r = np.random.default_rng(0)
    src = np.arange(10)
    dst = (src + 1) % 10
    src, dst = np.concatenate([src, src + 10]), np.concatenate([dst, dst + 10])
    g = Graph.from_edges(20, np.concatenate([src, dst]), np.concatenate([dst, src]))
    labels = np.tile([0, 1] * 5, 2)
    feats = np.tile(r.standard_normal((10, 4)).astype(np.float32), (2, 1))
    train = np.arange(20) < 10
    g = attach_features(g, feats, labels, train, ~train)
    cfg = _cfg(g, epochs=150, minibatch_size=10, fans=(2, 2), test_fans=(2, 2),
               model=dict(dropout=0.0, lr=0.02, hidden=32))
    res = train_distributed(g, 1, cfg)
    assert res.final_accuracy == 1.0


def test_evaluate_without_test_vertices_warns(small_sbm):
    g = attach_features(small_sbm, small_sbm.features, small_sbm.labels,
                        np.ones(small_sbm.num_vertices, bool), np.zeros(small_sbm.num_vertices, bool))
    with pytest.warns(RuntimeWarning):
        res = train_distributed(g, 2, _cfg(g))
    assert res.final_accuracy == 0.0


def test_evaluate_checkpoint_is_deterministic(small_sbm, tmp_path):
    cfg = _cfg(small_sbm)
    res = train_distributed(small_sbm, 2, cfg)
    save_checkpoint(tmp_path / "ck.bin", res.models[0])
    a = evaluate_distributed(small_sbm, 2, cfg, tmp_path / "ck.bin")
    b = evaluate_distributed(small_sbm, 2, cfg, tmp_path / "ck.bin")
    assert a == b == res.final_accuracy


def test_cache_training_runs_for_every_native_layer(small_sbm):
    for kind in ("sage", "gcn", "gin"):
        res = train_distributed(small_sbm, 2, _cfg(small_sbm, use_cache=True, model=dict(kind=kind)))
        rep = res.reports[0][0]
        assert rep.terms.use_cache and rep.counters.relays_by_tag.get("topo1", 0) == 0
        assert res.caches[0] is not None


@pytest.mark.parametrize("bad", [
    dict(fans=(5, 5, 5)),
    dict(macrobatch_size=0),
    dict(macrobatch_size=2, feature_round=3),
    dict(feature_round=0),
    dict(minibatch_size=0),
    dict(test_fans=(3,)),
])
def test_train_config_errors(small_sbm, bad):
    model = ModelConfig(in_dim=small_sbm.feature_dim, hidden=8, num_layers=2)
    with pytest.raises(ConfigError):
        TrainConfig(model=model, **{"fans": (5, 5), **bad})


def test_setup_checks_feature_dim(small_sbm):
    cfg = TrainConfig(fans=(5,), model=ModelConfig(in_dim=small_sbm.feature_dim + 1, num_layers=1))
    with pytest.raises(ConfigError):
        setup(small_sbm, 1, cfg)


def test_eval_defaults():
    sage = TrainConfig(fans=(5, 5), model=ModelConfig(num_layers=2))
    gin = TrainConfig(fans=(5, 5), use_cache=True, model=ModelConfig(kind="gin", num_layers=2))
    assert sage.eval_fans() == (20, 20) and gin.eval_fans() == (5, 5)
    assert not sage.eval_uses_cache() and gin.eval_uses_cache()
