"""Run configuration: built-in defaults, a JSON file, then CLI overrides.

Keys are addressed by dotted path (``model.hidden_dim``). Unknown sections
or keys are rejected wherever they come from. Override values given on the
command line are parsed as JSON when possible, so ``--set train.epochs=5``
yields an int and ``--set anomaly.target=db`` a string.
"""

from __future__ import annotations

import copy
import dataclasses
import json

from .detector import TrainConfig
from .errors import ConfigError
from .evaluation import (
    DEFAULT_SCALING_GRID,
    DEFAULT_SEEDS,
    DEFAULT_WD_GRID,
    BenchmarkSpec,
    derive_seed,
)
from .graphs import WindowConfig
from .model import ModelConfig
from .synth import AnomalySpec, ScalingSpec, TopologySpec


def _fields(cls, skip=()):
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in skip}


_BENCH = BenchmarkSpec()

# seeds left as None follow the global --seed
DEFAULTS = {
    "seed": 0,
    "window": _fields(WindowConfig),
    "model": {**_fields(ModelConfig, skip=("history_T",)), "seed": None},
    "train": {**_fields(TrainConfig), "seed": None},
    "topology": {**_fields(TopologySpec), "seed": None},
    "anomaly": {
        "kind": "latency_spike",
        "target": "",
        "magnitude": 8.0,
        "cascade_depth": 0,
        "affected_windows": [],
        "seed": None,
    },
    "scaling": {**_fields(ScalingSpec), "seed": None},
    "synth": {"rate": 200.0, "n_windows": 60},
    "detect": {"n_train": None, "threshold_q": 0.99, "top_k": 10},
    "benchmark": {
        "n_train": _BENCH.n_train,
        "n_val": _BENCH.n_val,
        "n_test": _BENCH.n_test,
        "anomaly_fraction": _BENCH.anomaly_fraction,
        "anomaly_kind": _BENCH.anomaly_kind,
        "magnitude": _BENCH.magnitude,
        "threshold_q": _BENCH.threshold_q,
        "epochs": _BENCH.train.epochs,
        "learning_rate": _BENCH.train.learning_rate,
        "weight_decay": _BENCH.train.weight_decay,
    },
    "eval": {
        "wd_grid": list(DEFAULT_WD_GRID),
        "scaling_grid": list(DEFAULT_SCALING_GRID),
        "seeds": list(DEFAULT_SEEDS),
    },
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig:
    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS if values is None else values)
        self._explicit = set()

    # -- construction ------------------------------------------------------

    @classmethod
    def load(cls, path=None, overrides=(), seed=None):
        """Defaults, then ``path`` (JSON), then ``overrides``, then ``seed``."""
        cfg = cls()
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
            cfg.merge(doc, source=str(path))
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            cfg.set(key.strip(), _parse_value(value))
        if seed is not None:
            cfg.set("seed", seed)
        return cfg

    def merge(self, doc, source="config"):
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        for key, value in doc.items():
            if isinstance(value, dict):
                if not isinstance(self.values.get(key), dict):
                    raise ConfigError(f"{source}: unknown section {key!r}")
                for sub, v in value.items():
                    self.set(f"{key}.{sub}", v, source)
            else:
                self.set(key, value, source)

    def set(self, dotted, value, source="override"):
        parts = dotted.split(".")
        node = self.values
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"{source}: unknown config key {dotted!r}")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node or isinstance(node[leaf], dict):
            raise ConfigError(f"{source}: unknown config key {dotted!r}")
        node[leaf] = value
        self._explicit.add(dotted)

    def explicit(self, dotted):
        """True when ``dotted`` was set by a file or override rather than defaulted."""
        return dotted in self._explicit

    def get(self, dotted):
        node = self.values
        for p in dotted.split("."):
            node = node[p]
        return node

    def to_dict(self):
        return copy.deepcopy(self.values)

    # -- typed views -------------------------------------------------------

    @property
    def seed(self):
        return self._int("seed", self.values["seed"])

    def _int(self, key, value):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value

    def _seed(self, section, tag):
        s = self.values[section]["seed"]
        return derive_seed(self.seed, tag) if s is None else self._int(f"{section}.seed", s)

    def _build(self, cls, section, **extra):
        kw = dict(self.values[section])
        kw.update(extra)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"{section}: {exc}") from None

    def window(self):
        return self._build(WindowConfig, "window")

    def model(self):
        s = self.values["model"]["seed"]
        seed = self.seed if s is None else self._int("model.seed", s)
        return self._build(ModelConfig, "model", seed=seed, history_T=self.values["window"]["history_T"])

    def train(self):
        s = self.values["train"]["seed"]
        return self._build(TrainConfig, "train", seed=self.seed if s is None else s)

    def topology(self):
        return self._build(TopologySpec, "topology", seed=self._seed("topology", 1))

    def trace_seed(self):
        return derive_seed(self.seed, 2)

    def anomaly(self):
        a = self.values["anomaly"]
        if not a["target"]:
            return None
        return self._build(
            AnomalySpec, "anomaly", affected_windows=frozenset(a["affected_windows"]), seed=self._seed("anomaly", 4)
        )

    def scaling(self):
        return self._build(ScalingSpec, "scaling", seed=self._seed("scaling", 5))

    def benchmark(self):
        b = self.values["benchmark"]
        topo = self.values["topology"]
        try:
            train = TrainConfig(b["epochs"], b["learning_rate"], b["weight_decay"])
            return BenchmarkSpec(
                n_services=topo["n_services"],
                edge_density=topo["edge_density"],
                max_depth=topo["max_depth"],
                n_train=b["n_train"],
                n_val=b["n_val"],
                n_test=b["n_test"],
                rate=self.values["synth"]["rate"],
                window_length=self.values["window"]["window_length"],
                anomaly_fraction=b["anomaly_fraction"],
                anomaly_kind=b["anomaly_kind"],
                magnitude=b["magnitude"],
                threshold_q=b["threshold_q"],
                model=self.model(),
                train=train,
                # per-run scaling seeds are derived inside the benchmark
                scaling=dataclasses.replace(self.scaling(), seed=0),
            )
        except TypeError as exc:
            raise ConfigError(f"benchmark: {exc}") from None
