"""Detection metrics and the synthetic benchmark harness.

Labels live at node-window granularity: a service in a window is anomalous
iff a fault was injected on it there. The benchmark trains on the first
``n_train`` windows, picks the alert threshold on the next ``n_val`` (clean)
windows and reports metrics on the last ``n_test`` windows, where a
fraction of the (window, service) cells carry a latency spike.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import _io, kernels
from .detector import TrainConfig, score_windows, select_threshold, train
from .errors import ConfigError, TraceGraphError
from .graphs import WindowConfig, attach_histories, build_graphs, standardize_features
from .model import ModelConfig
from .spans import build_trees
from .synth import (
    AnomalySpec,
    ScalingSpec,
    TopologySpec,
    apply_scaling,
    generate_topology,
    generate_traces,
    inject_anomaly,
)

# ---------------------------------------------------------------------------
# metrics


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise TraceGraphError(f"{scores.size} scores for {labels.size} labels")
    return scores, labels


def auc(scores, labels):
    """Area under the ROC curve from average ranks (ties count one half)."""
    scores, labels = _split(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise TraceGraphError("AUC needs both anomalous and normal samples")
    ranks = kernels.average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(scores, labels, threshold):
    """Predict anomalous iff ``score > threshold``."""
    scores, labels = _split(scores, labels)
    pred = scores > threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "acc": (tp + tn) / total if total else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
    }


@dataclass(frozen=True)
class LabeledScore:
    window_index: int
    service: str
    score: float
    label: bool


def write_labeled_scores(path, rows):
    _io.write_csv(
        path,
        ["window_index", "service", "score", "label"],
        [(r.window_index, r.service, r.score, "anomalous" if r.label else "normal") for r in rows],
    )


_LABELS = {"anomalous": True, "normal": False, "1": True, "0": False, "true": True, "false": False}


def read_labeled_scores(path):
    """Rows of ``window_index,service,score,label``; label is anomalous/normal or 1/0."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["window_index", "service", "score", "label"]:
            raise TraceGraphError(f"{path}: expected header window_index,service,score,label")
        for parts in reader:
            if not parts:
                continue
            line_no = reader.line_num
            if len(parts) != 4 or parts[3].strip().lower() not in _LABELS:
                raise TraceGraphError(f"{path}:{line_no}: malformed row")
            try:
                rows.append(LabeledScore(int(parts[0]), parts[1], float(parts[2]), _LABELS[parts[3].strip().lower()]))
            except ValueError:
                raise TraceGraphError(f"{path}:{line_no}: malformed number") from None
    return rows


# ---------------------------------------------------------------------------
# benchmark


def derive_seed(seed, *tags):
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass(frozen=True)
class BenchmarkSpec:
    n_services: int = 30
    edge_density: float = 0.1
    max_depth: int = 4
    n_train: int = 40
    n_val: int = 5
    n_test: int = 15
    rate: float = 200.0
    window_length: int = 60_000_000
    anomaly_fraction: float = 0.1
    anomaly_kind: str = "latency_spike"
    magnitude: float = 8.0
    threshold_q: float = 0.99
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100, learning_rate=0.1))
    scaling: ScalingSpec = field(default_factory=ScalingSpec)

    @property
    def n_windows(self):
        return self.n_train + self.n_val + self.n_test

    @property
    def test_windows(self):
        return range(self.n_train + self.n_val, self.n_windows)

    def window_config(self):
        return WindowConfig(self.window_length, self.model.history_T, "zscore")


@dataclass
class Corpus:
    topology: object
    spans: list
    labels: list


def make_corpus(spec, seed):
    """Clean traces for every window plus faults on test-window cells."""
    topo = generate_topology(
        TopologySpec(spec.n_services, spec.edge_density, spec.max_depth, derive_seed(seed, 1))
    )
    spans = generate_traces(topo, spec.rate, spec.n_windows, derive_seed(seed, 2), spec.window_length)
    present = sorted(_present_cells(spans, spec.window_length))
    test = set(spec.test_windows)
    cells = [c for c in present if c[0] in test]
    n_anom = int(round(spec.anomaly_fraction * spec.n_test * spec.n_services))
    n_anom = min(n_anom, len(cells))
    rng = np.random.default_rng(derive_seed(seed, 3))
    chosen = sorted(cells[k] for k in rng.choice(len(cells), size=n_anom, replace=False))
    labels = []
    for k, (w, service) in enumerate(chosen):
        anomaly = AnomalySpec(
            spec.anomaly_kind, service, spec.magnitude, {w}, seed=derive_seed(seed, 4, k)
        )
        spans, lab = inject_anomaly(spans, topo, anomaly, spec.window_length)
        labels.extend(lab)
    return Corpus(topo, spans, sorted(set(labels)))


def _present_cells(spans, window_length):
    root_ts = {s.trace_id: s.start_ts for s in spans if s.parent_span_id is None}
    return {(root_ts[s.trace_id] // window_length, s.service_name) for s in spans}


def prepare_graphs(spec, spans):
    """Raw spans -> standardised graphs with histories, train stats only."""
    trees, failures = build_trees(spans)
    if failures:
        raise TraceGraphError(f"{len(failures)} malformed traces, first: {failures[0][1]}")
    wcfg = spec.window_config()
    raw = build_graphs(trees, wcfg, (0, spec.n_windows - 1))
    _, stats = standardize_features(raw[: spec.n_train])
    std, _ = standardize_features(raw, stats)
    return attach_histories(std, spec.model.history_T), trees


@dataclass
class FittedDetector:
    result: object
    threshold: float


def fit_detector(spec, graphs, train_cfg):
    result = train(graphs[: spec.n_train], spec.model, train_cfg)
    val = graphs[spec.n_train : spec.n_train + spec.n_val]
    reports = score_windows(val, result.params, result.centroid, 0.0)
    val_scores = [v for r in reports for v in r.node_scores.values()]
    return FittedDetector(result, select_threshold(val_scores, spec.threshold_q))


def evaluate_test(spec, graphs, labels, fitted):
    test = graphs[spec.n_train + spec.n_val :]
    reports = score_windows(test, fitted.result.params, fitted.result.centroid, fitted.threshold)
    anomalous = {(w, s) for w, s, _ in labels}
    rows = [
        LabeledScore(r.window_index, s, v, (r.window_index, s) in anomalous)
        for r in reports
        for s, v in r.node_scores.items()
    ]
    scores = [r.score for r in rows]
    flags = [r.label for r in rows]
    metrics = classification_metrics(scores, flags, fitted.threshold)
    metrics["auc"] = auc(scores, flags)
    return metrics, rows


def run_benchmark(spec, seed, weight_decay=None, scaling_frequency=0.0):
    """One end-to-end run. Returns ``(metrics, labelled score rows)``."""
    corpus = make_corpus(spec, seed)
    spans = corpus.spans
    if scaling_frequency:
        spans, _ = _disturb(spec, corpus, seed, scaling_frequency)
    graphs, _ = prepare_graphs(spec, spans)
    tcfg = spec.train if weight_decay is None else dataclasses.replace(spec.train, weight_decay=weight_decay)
    fitted = fit_detector(spec, graphs, tcfg)
    return evaluate_test(spec, graphs, corpus.labels, fitted)


def _disturb(spec, corpus, seed, frequency):
    scaling = dataclasses.replace(spec.scaling, frequency=frequency, seed=derive_seed(seed, 5))
    test = spec.test_windows
    return apply_scaling(corpus.spans, corpus.topology, scaling, spec.window_length, (test[0], test[-1]))


# ---------------------------------------------------------------------------
# sweeps

DEFAULT_WD_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_SCALING_GRID = (0.0, 2.0, 8.0, 32.0)
DEFAULT_SEEDS = (0, 1, 2)


@dataclass
class SweepResult:
    parameter: str
    grid: list
    seeds: list
    rows: list  # dicts: param_value, seed, auc, acc, recall, f1

    def values(self, metric, param_value):
        return [r[metric] for r in self.rows if r["param_value"] == param_value]

    def mean(self, metric, param_value):
        return float(np.mean(self.values(metric, param_value)))

    def std(self, metric, param_value):
        return float(np.std(self.values(metric, param_value)))

    def summary(self):
        return [
            {
                "param_value": v,
                "mean_auc": self.mean("auc", v),
                "std_auc": self.std("auc", v),
                "mean_f1": self.mean("f1", v),
                "std_f1": self.std("f1", v),
            }
            for v in self.grid
        ]

    def write_csv(self, path):
        _io.write_csv(
            path,
            ["param_value", "seed", "auc", "acc", "recall", "f1"],
            [
                (float(r["param_value"]), r["seed"], r["auc"], r["acc"], r["recall"], r["f1"])
                for r in self.rows
            ],
        )

    def write_summary_csv(self, path):
        cols = ["param_value", "mean_auc", "std_auc", "mean_f1", "std_f1"]
        _io.write_csv(path, cols, [tuple(float(s[c]) for c in cols) for s in self.summary()])


def _check_sweep(grid, seeds):
    grid = sorted(float(v) for v in grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    return grid, [int(s) for s in seeds]


def _row(value, seed, metrics):
    return {
        "param_value": value,
        "seed": seed,
        "auc": metrics["auc"],
        "acc": metrics["acc"],
        "recall": metrics["recall"],
        "f1": metrics["f1"],
    }


def run_weight_decay_sweep(spec, grid=DEFAULT_WD_GRID, seeds=DEFAULT_SEEDS, progress=None):
    """F1 against weight decay; one corpus per seed, one training per point."""
    grid, seeds = _check_sweep(grid, seeds)
    rows = []
    for seed in seeds:
        corpus = make_corpus(spec, seed)
        graphs, _ = prepare_graphs(spec, corpus.spans)
        for value in grid:
            fitted = fit_detector(spec, graphs, dataclasses.replace(spec.train, weight_decay=value))
            metrics, _ = evaluate_test(spec, graphs, corpus.labels, fitted)
            rows.append(_row(value, seed, metrics))
            if progress:
                progress(rows[-1])
    rows.sort(key=lambda r: (r["param_value"], r["seed"]))
    return SweepResult("weight_decay", grid, seeds, rows)


def run_scaling_sweep(spec, grid=DEFAULT_SCALING_GRID, seeds=DEFAULT_SEEDS, progress=None):
    """F1 against elastic-scaling frequency (events per simulated hour).

    Scaling only touches test windows, so one detector per seed serves the
    whole grid.
    """
    grid, seeds = _check_sweep(grid, seeds)
    rows = []
    for seed in seeds:
        corpus = make_corpus(spec, seed)
        graphs, _ = prepare_graphs(spec, corpus.spans)
        fitted = fit_detector(spec, graphs, spec.train)
        for value in grid:
            spans = _disturb(spec, corpus, seed, value)[0] if value else corpus.spans
            disturbed = graphs if not value else prepare_graphs(spec, spans)[0]
            metrics, _ = evaluate_test(spec, disturbed, corpus.labels, fitted)
            rows.append(_row(value, seed, metrics))
            if progress:
                progress(rows[-1])
    rows.sort(key=lambda r: (r["param_value"], r["seed"]))
    return SweepResult("scaling_frequency", grid, seeds, rows)
