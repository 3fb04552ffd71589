"""Windowed service graphs built from call trees.

Each window yields a :class:`ServiceGraph`: services sorted by name, a node
feature matrix ``X`` (one row per service), the directed call-count matrix
``A`` and, per observed edge, a short history of edge feature vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _io, kernels
from .errors import ShapeError, WindowError

NODE_FEATURES = (
    "mean_latency_us",
    "p95_latency_us",
    "error_rate",
    "throughput_rps",
    "fan_in_degree",
    "fan_out_degree",
)
EDGE_FEATURES = ("call_count", "mean_edge_latency_us", "retry_count", "timeout_count")
NODE_DIM = len(NODE_FEATURES)
EDGE_DIM = len(EDGE_FEATURES)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class WindowConfig:
    window_length: int = 60_000_000
    history_T: int = 3
    feature_standardization: str = "zscore"

    def __post_init__(self):
        if self.window_length <= 0:
            raise WindowError(f"window_length must be > 0, got {self.window_length}")
        if self.history_T < 1:
            raise WindowError(f"history_T must be >= 1, got {self.history_T}")
        if self.feature_standardization not in ("none", "zscore"):
            raise WindowError(f"unknown feature_standardization {self.feature_standardization!r}")


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ServiceGraph:
    window_index: int
    services: tuple
    X: np.ndarray
    A: np.ndarray
    edge_series: dict = field(default_factory=dict)  # (i, j) -> (T, EDGE_DIM) array

    def __post_init__(self):
        n = len(self.services)
        X = np.asarray(self.X, dtype=np.float64)
        if n == 0 and X.ndim != 2:
            X = X.reshape(0, NODE_DIM)
        X = _frozen(X)
        A = _frozen(np.asarray(self.A, dtype=np.float64).reshape(n, n))
        if X.shape[0] != n:
            raise ShapeError(f"X has {X.shape[0]} rows for {n} services")
        if np.any(A < 0):
            raise ShapeError("adjacency has negative entries")
        series = {}
        for key in sorted(self.edge_series):
            i, j = key
            if not (0 <= i < n and 0 <= j < n):
                raise ShapeError(f"edge ({i}, {j}) out of range for {n} services")
            series[(int(i), int(j))] = _frozen(np.asarray(self.edge_series[key], dtype=np.float64))
        object.__setattr__(self, "services", tuple(self.services))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "edge_series", series)

    @property
    def n_nodes(self):
        return len(self.services)

    @property
    def history_length(self):
        lengths = {s.shape[0] for s in self.edge_series.values()}
        if len(lengths) > 1:
            raise ShapeError(f"ragged edge histories: lengths {sorted(lengths)}")
        return lengths.pop() if lengths else 0

    def index(self):
        return {s: i for i, s in enumerate(self.services)}

    def replace(self, **changes):
        kw = dict(
            window_index=self.window_index,
            services=self.services,
            X=self.X,
            A=self.A,
            edge_series=self.edge_series,
        )
        kw.update(changes)
        return ServiceGraph(**kw)

    def __eq__(self, other):
        if not isinstance(other, ServiceGraph):
            return NotImplemented
        return (
            self.window_index == other.window_index
            and self.services == other.services
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.A, other.A)
            and self.edge_series.keys() == other.edge_series.keys()
            and all(np.array_equal(v, other.edge_series[k]) for k, v in self.edge_series.items())
        )


def empty_graph(window_index):
    return ServiceGraph(window_index, (), np.zeros((0, NODE_DIM)), np.zeros((0, 0)), {})


# ---------------------------------------------------------------------------
# aggregation


def aggregate_window(trees, window_index, cfg=None):
    """Aggregate every span of ``trees`` into one :class:`ServiceGraph`.

    The caller is responsible for picking the trees whose root falls in the
    window. Edge series hold only the current window (length 1).
    """
    cfg = cfg or WindowConfig()
    spans = [s for tree in trees for s, _ in tree.walk()]
    if not spans:
        return empty_graph(window_index)

    services = tuple(sorted({s.service_name for s in spans}))
    n = len(services)
    code_of = {name: i for i, name in enumerate(services)}
    codes = np.fromiter((code_of[s.service_name] for s in spans), dtype=np.int64, count=len(spans))
    durations = np.fromiter((s.duration for s in spans), dtype=np.int64, count=len(spans))
    errors = np.fromiter((s.is_error for s in spans), dtype=np.float64, count=len(spans))

    counts, means, p95 = kernels.group_latency_stats(codes, durations, n)
    error_rate = np.bincount(codes, weights=errors, minlength=n) / counts
    throughput = counts / (cfg.window_length / 1e6)

    # parent -> child pairs
    pair_flat, pair_vals = [], []
    for tree in trees:
        for s, _ in tree.walk():
            if s.parent_span_id is None:
                continue
            parent = code_of[tree.spans[s.parent_span_id].service_name]
            pair_flat.append(parent * n + code_of[s.service_name])
            pair_vals.append((1.0, float(s.duration), float(s.retry_count), float(s.is_timeout)))

    A = np.zeros((n, n))
    edge_series = {}
    if pair_flat:
        flat = np.asarray(pair_flat, dtype=np.int64)
        keys, inverse = np.unique(flat, return_inverse=True)
        sums = kernels.scatter_add_rows(inverse.astype(np.int64), np.asarray(pair_vals), len(keys))
        for k, key in enumerate(keys):
            i, j = divmod(int(key), n)
            cnt = sums[k, 0]
            A[i, j] = cnt
            edge_series[(i, j)] = np.array([[cnt, sums[k, 1] / cnt, sums[k, 2], sums[k, 3]]])

    present = A > 0
    fan_in = present.sum(axis=0).astype(np.float64)
    fan_out = present.sum(axis=1).astype(np.float64)
    X = np.column_stack([means, p95, error_rate, throughput, fan_in, fan_out])
    return ServiceGraph(window_index, services, X, A, edge_series)


def assign_windows(trees, window_length):
    """Map window index -> trees, by root start timestamp."""
    out = {}
    for tree in trees:
        out.setdefault(tree.root.start_ts // window_length, []).append(tree)
    return out


def build_graphs(trees, cfg=None, window_range=None):
    """One raw graph per window over a contiguous window range.

    ``window_range`` is ``(first, last)`` inclusive; by default it spans the
    windows that contain any root span. Empty windows yield empty graphs.
    """
    cfg = cfg or WindowConfig()
    by_window = assign_windows(trees, cfg.window_length)
    if window_range is None:
        if not by_window:
            return []
        window_range = (min(by_window), max(by_window))
    first, last = window_range
    return [aggregate_window(by_window.get(w, []), w, cfg) for w in range(first, last + 1)]


# ---------------------------------------------------------------------------
# normalisation and standardisation


def normalize_adjacency(A):
    """Symmetric normalised operator with self loops.

    ``A`` is binarised, self loops are added, the result is symmetrised with
    an elementwise max against its transpose, then scaled by the inverse
    square root of the degrees on both sides.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {A.shape}")
    n = A.shape[0]
    a_tilde = (A > 0).astype(np.float64) + np.eye(n)
    a_tilde = np.maximum(a_tilde, a_tilde.T)
    deg = a_tilde.sum(axis=1)
    return a_tilde / np.sqrt(np.outer(deg, deg))


@dataclass(frozen=True, eq=False)
class FeatureStats:
    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("node_mean", "node_std", "edge_mean", "edge_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("node_mean", "node_std", "edge_mean", "edge_std")))

    def __eq__(self, other):
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("node_mean", "node_std", "edge_mean", "edge_std")
        )


def _column_stats(rows, dim):
    if rows.shape[0] == 0:
        return np.zeros(dim), np.ones(dim)
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    const = rows.min(axis=0) == rows.max(axis=0)
    mean = np.where(const, rows[0], mean)
    return mean, np.maximum(std, STD_FLOOR)


def fit_feature_stats(graphs):
    node_rows = [g.X for g in graphs if g.n_nodes]
    edge_rows = []
    for g in graphs:
        for series in g.edge_series.values():
            if series.shape[0] != 1:
                raise ShapeError("standardize graphs before attaching edge histories")
            edge_rows.append(series[0])
    nodes = np.vstack(node_rows) if node_rows else np.zeros((0, NODE_DIM))
    edges = np.vstack(edge_rows) if edge_rows else np.zeros((0, EDGE_DIM))
    return FeatureStats(*_column_stats(nodes, NODE_DIM), *_column_stats(edges, EDGE_DIM))


def standardize_features(graphs, stats=None):
    """Z-score node and edge features. Returns ``(graphs, stats)``.

    Stats are fitted on ``graphs`` when not given; pass the training stats
    back in for validation and test windows.
    """
    graphs = list(graphs)
    if stats is None:
        stats = fit_feature_stats(graphs)
    if stats.node_mean.shape != (NODE_DIM,) or stats.node_std.shape != (NODE_DIM,):
        raise ShapeError(f"node stats have dimension {stats.node_mean.shape}, expected ({NODE_DIM},)")
    if stats.edge_mean.shape != (EDGE_DIM,) or stats.edge_std.shape != (EDGE_DIM,):
        raise ShapeError(f"edge stats have dimension {stats.edge_mean.shape}, expected ({EDGE_DIM},)")
    out = []
    for g in graphs:
        if g.X.shape[1] != NODE_DIM:
            raise ShapeError(f"graph has {g.X.shape[1]} node features, expected {NODE_DIM}")
        series = {}
        for key, s in g.edge_series.items():
            if s.shape[0] != 1:
                raise ShapeError("standardize graphs before attaching edge histories")
            series[key] = (s - stats.edge_mean) / stats.edge_std
        X = (g.X - stats.node_mean) / stats.node_std if g.n_nodes else g.X
        out.append(g.replace(X=X, edge_series=series))
    return out, stats


# ---------------------------------------------------------------------------
# edge histories


def build_edge_history(graphs, history_T=None):
    """Edge feature sequences for the last graph of ``graphs``.

    ``graphs`` are consecutive windows ending at the target window. Keys are
    node indices of the last graph; an edge contributes a zero vector in
    windows where it is absent. When ``history_T`` exceeds ``len(graphs)``
    the missing leading windows are zero as well.
    """
    graphs = list(graphs)
    if not graphs:
        raise WindowError("no graphs")
    for prev, cur in zip(graphs, graphs[1:]):
        if cur.window_index != prev.window_index + 1:
            raise WindowError(
                f"windows not contiguous: {prev.window_index} followed by {cur.window_index}"
            )
    T = len(graphs) if history_T is None else history_T
    if len(graphs) > T:
        raise WindowError(f"{len(graphs)} graphs given for history of length {T}")
    latest = graphs[-1].index()
    offset = T - len(graphs)
    series = {}
    for k, g in enumerate(graphs):
        names = g.services
        for (a, b), s in g.edge_series.items():
            i, j = latest.get(names[a]), latest.get(names[b])
            if i is None or j is None:
                continue
            if (i, j) not in series:
                series[(i, j)] = np.zeros((T, EDGE_DIM))
            series[(i, j)][offset + k] = s[-1]
    return dict(sorted(series.items()))


def attach_histories(graphs, history_T):
    """Attach length-``history_T`` edge histories to every graph of a
    contiguous window sequence."""
    graphs = list(graphs)
    out = []
    for t, g in enumerate(graphs):
        window = graphs[max(0, t - history_T + 1) : t + 1]
        out.append(g.replace(edge_series=build_edge_history(window, history_T)))
    return out


# ---------------------------------------------------------------------------
# JSON


def graph_to_dict(g):
    return {
        "window_index": g.window_index,
        "services": list(g.services),
        "X": g.X.tolist(),
        "A": g.A.tolist(),
        "edge_series": [
            {"i": i, "j": j, "vectors": s.tolist()} for (i, j), s in g.edge_series.items()
        ],
    }


def graph_from_dict(d):
    n = len(d["services"])
    X = np.asarray(d["X"], dtype=np.float64).reshape(n, -1) if n else np.zeros((0, NODE_DIM))
    A = np.asarray(d["A"], dtype=np.float64).reshape(n, n)
    series = {
        (int(e["i"]), int(e["j"])): np.asarray(e["vectors"], dtype=np.float64)
        for e in d["edge_series"]
    }
    return ServiceGraph(int(d["window_index"]), tuple(d["services"]), X, A, series)


def write_graphs(path, graphs, window_length=None):
    doc = {"graphs": [graph_to_dict(g) for g in graphs]}
    if window_length is not None:
        doc["window_length"] = int(window_length)
    _io.write_json(path, doc)


def read_graphs(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return [graph_from_dict(d) for d in doc["graphs"]], doc.get("window_length")
