"""Flat ``key=value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Recognised keys:

graph input (exactly one source)
    graph_dir                 directory written by ``macrognn generate``
    edges, num_vertices, features, labels, undirected
    sbm.sizes (comma list), sbm.p_intra, sbm.p_inter, sbm.seed,
    sbm.feature_dim, sbm.noise, sbm.train_frac
partitioning
    num_ranks, policy (hash|modulo), partition_seed, sampling_direction (out|in)
training
    epochs, minibatch_size, fans, test_fans, macrobatch_size (int|all),
    feature_round (int|all), use_cache, cache_at_eval, eval_minibatch_size,
    eval_every, rng_root
model
    layer (sage|gcn|gin), hidden, num_classes, dropout, bn_momentum, bn_eps,
    lr, beta1, beta2, adam_eps
output
    out_dir
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .graph_store import Graph, load_graph
from .nn.model import LAYER_TYPES, ModelConfig
from .sbm import SBMSpec, generate_sbm
from .trainer import ConfigError, TrainConfig

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}

KNOWN_KEYS = {
    "graph_dir", "edges", "num_vertices", "features", "labels", "undirected",
    "sbm.sizes", "sbm.p_intra", "sbm.p_inter", "sbm.seed", "sbm.feature_dim", "sbm.noise", "sbm.train_frac",
    "num_ranks", "policy", "partition_seed", "sampling_direction",
    "epochs", "minibatch_size", "fans", "test_fans", "macrobatch_size", "feature_round", "use_cache",
    "cache_at_eval", "eval_minibatch_size", "eval_every", "rng_root",
    "layer", "hidden", "num_classes", "dropout", "bn_momentum", "bn_eps", "lr", "beta1", "beta2", "adam_eps",
    "out_dir",
}


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(" ", "").split(",") if x)


def _bool(v: str) -> bool:
    try:
        return _BOOL[v.lower()]
    except KeyError:
        raise ConfigError(f"not a boolean: {v!r}") from None


def _opt_int(v: str | None) -> int | None:
    if v is None or v.lower() in ("all", "none", ""):
        return None
    return int(v)


@dataclass
class RunConfig:
    values: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        vals = parse_kv(Path(path).read_text()) if path else {}
        vals.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = sorted(set(vals) - KNOWN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(vals)

    def get(self, key, default=None):
        return self.values.get(key, default)

    # -- graph ---------------------------------------------------------------

    def sbm_spec(self) -> SBMSpec | None:
        if not any(k.startswith("sbm.") for k in self.values):
            return None
        v = self.values
        try:
            return SBMSpec(
                sizes=_ints(v.get("sbm.sizes", "500,500")),
                p_intra=float(v.get("sbm.p_intra", 0.02)),
                p_inter=float(v.get("sbm.p_inter", 0.002)),
                seed=int(v.get("sbm.seed", 0)),
                feature_dim=_opt_int(v.get("sbm.feature_dim")),
                noise=float(v.get("sbm.noise", 1.0)),
                train_frac=float(v.get("sbm.train_frac", 0.8)),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def load_graph(self) -> Graph:
        spec = self.sbm_spec()
        file_input = "graph_dir" in self.values or "edges" in self.values
        if (spec is not None) == file_input:
            raise ConfigError("give exactly one graph source: graph_dir/edges files or sbm.* generator keys")
        if spec is not None:
            return generate_sbm(spec)
        if "graph_dir" in self.values:
            d = Path(self.values["graph_dir"])
            meta = parse_kv((d / "meta.txt").read_text())
            return load_graph(d / "edges.txt", int(meta["num_vertices"]), d / "features.bin", d / "labels.bin")
        if "num_vertices" not in self.values:
            raise ConfigError("edges input needs num_vertices")
        return load_graph(
            self.values["edges"],
            int(self.values["num_vertices"]),
            self.values.get("features"),
            self.values.get("labels"),
            undirected=_bool(self.values.get("undirected", "false")),
        )

    # -- run -----------------------------------------------------------------

    @property
    def num_ranks(self) -> int:
        return int(self.get("num_ranks", 1))

    @property
    def policy(self) -> str:
        return self.get("policy", "hash")

    @property
    def partition_seed(self) -> int:
        return int(self.get("partition_seed", 0))

    @property
    def direction(self) -> str:
        return self.get("sampling_direction", "out")

    @property
    def out_dir(self) -> Path:
        return Path(self.get("out_dir", "run"))

    def train_config(self, g: Graph) -> TrainConfig:
        v = self.values
        layer = v.get("layer", "sage")
        use_cache = _bool(v.get("use_cache", "false"))
        if use_cache and layer not in LAYER_TYPES:
            raise ConfigError(f"use_cache requires a native layer type {LAYER_TYPES}, got {layer!r}")
        fans = _ints(v.get("fans", "15,10,5"))
        num_classes = int(v["num_classes"]) if "num_classes" in v else int(g.labels.max()) + 1
        model = ModelConfig(
            kind=layer,
            in_dim=g.feature_dim,
            hidden=int(v.get("hidden", 256)),
            num_classes=num_classes,
            num_layers=len(fans),
            dropout=float(v.get("dropout", 0.5)),
            bn_momentum=float(v.get("bn_momentum", 0.1)),
            bn_eps=float(v.get("bn_eps", 1e-5)),
            lr=float(v.get("lr", 0.003)),
            beta1=float(v.get("beta1", 0.9)),
            beta2=float(v.get("beta2", 0.999)),
            adam_eps=float(v.get("adam_eps", 1e-8)),
        )
        B = _opt_int(v.get("macrobatch_size"))
        F = _opt_int(v.get("feature_round"))
        return TrainConfig(
            epochs=int(v.get("epochs", 3)),
            minibatch_size=int(v.get("minibatch_size", 1024)),
            fans=fans,
            test_fans=_ints(v["test_fans"]) if "test_fans" in v else None,
            macrobatch_size=B,
            feature_round=F,
            use_cache=use_cache,
            cache_at_eval=_bool(v["cache_at_eval"]) if "cache_at_eval" in v else None,
            eval_minibatch_size=_opt_int(v.get("eval_minibatch_size")),
            eval_every=int(v.get("eval_every", 0)),
            rng_root=int(v.get("rng_root", 0)),
            model=model,
        )
