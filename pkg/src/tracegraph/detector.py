"""One-class training, node/path scoring and root-cause path ranking.

Node score is the squared distance of a node embedding to a centroid fixed
from the untrained encoder on the training windows. Training pulls normal
embeddings toward that centroid by full-batch gradient descent on

    mean_i ||u_i - mu||^2 + weight_decay * sum_W ||W||_F^2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _io
from .autodiff import Tape
from .errors import ConfigError, NumericError, ShapeError, TraceGraphError
from .model import (
    GraphBatch,
    ModelParams,
    NodeEmbeddings,
    check_compatible,
    forward_many,
    tape_embed,
    tape_params,
)
from .spans import extract_call_paths


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch != "full":
            raise ConfigError(f"train.batch must be 'full', got {self.batch!r}")


@dataclass(frozen=True, eq=False)
class Centroid:
    mu: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).ravel()
        if not np.all(np.isfinite(mu)):
            raise NumericError("centroid has non-finite entries")
        mu.setflags(write=not self.frozen)
        object.__setattr__(self, "mu", mu)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    mean_score: float
    weight_norm: float


@dataclass
class TrainResult:
    params: ModelParams
    centroid: Centroid
    trace: list = field(default_factory=list)


def compute_centroid(embeddings):
    """Mean over every node row of every training window."""
    rows = [np.asarray(U, dtype=np.float64) for U in embeddings if len(U)]
    if not rows:
        raise TraceGraphError("cannot compute a centroid: every training window is empty")
    return Centroid(np.vstack(rows).mean(axis=0), frozen=True)


def node_score(u, centroid):
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.shape != centroid.mu.shape:
        raise ShapeError(f"embedding has dimension {u.shape[0]}, centroid {centroid.mu.shape[0]}")
    d = u - centroid.mu
    return float(d @ d)


def node_scores(U, centroid):
    U = np.asarray(U, dtype=np.float64)
    if U.shape[0] and U.shape[1] != centroid.mu.shape[0]:
        raise ShapeError(f"embeddings have dimension {U.shape[1]}, centroid {centroid.mu.shape[0]}")
    d = U - centroid.mu
    return np.einsum("ij,ij->i", d, d)


def path_score(path, scores):
    """Mean node score along ``path``; repeated services count each time."""
    try:
        vals = [scores[s] for s in path.services]
    except KeyError as exc:
        raise TraceGraphError(f"service {exc.args[0]!r} on path has no score in this window") from None
    return sum(vals) / len(vals)


def select_threshold(scores, q=0.99):
    """Nearest-rank ``q`` quantile."""
    scores = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if scores.size == 0:
        raise TraceGraphError("cannot select a threshold from zero scores")
    if not 0 < q < 1:
        raise TraceGraphError(f"quantile must be in (0, 1), got {q}")
    rank = max(1, math.ceil(round(q * scores.size, 9)))
    return float(scores[rank - 1])


# ---------------------------------------------------------------------------
# training


def _objective(tape, batch, P, cfg, mu_rows, decay_names, weight_decay):
    _, _, U = tape_embed(tape, batch, P, cfg)
    diff = tape.sub(U, tape.constant(mu_rows))
    mean_score = tape.scalar_mul(tape.sum_sq(diff), 1.0 / batch.n_nodes)
    loss = mean_score
    if weight_decay:
        penalty = tape.sum_sq(P[decay_names[0]])
        for k in decay_names[1:]:
            penalty = tape.add(penalty, tape.sum_sq(P[k]))
        loss = tape.add(loss, tape.scalar_mul(penalty, weight_decay))
    return loss, mean_score


def train(graphs, model_cfg, train_cfg, params=None):
    """Fit the encoder on normal windows.

    ``graphs`` must be standardised and carry edge histories. ``trace[e]``
    holds the objective after ``e`` updates, so ``epochs`` updates give
    ``epochs + 1`` rows.
    """
    params = ModelParams.init(model_cfg) if params is None else params.copy()
    batch = GraphBatch(graphs, model_cfg.history_T)
    if batch.n_nodes == 0:
        raise TraceGraphError("cannot compute a centroid: every training window is empty")
    check_compatible(batch, params)

    init_U = [e.U for e in _embed_batch(batch, params)]
    centroid = compute_centroid(init_U)
    mu_rows = np.tile(centroid.mu, (batch.n_nodes, 1))
    decay = params.decay_names()
    lr = train_cfg.learning_rate

    trace = []
    for epoch in range(train_cfg.epochs + 1):
        tape = Tape()
        P = tape_params(tape, params)
        try:
            loss, mean_score = _objective(
                tape, batch, P, model_cfg, mu_rows, decay, train_cfg.weight_decay
            )
        except NumericError as exc:
            raise NumericError(f"training diverged at epoch {epoch}: {exc}") from None
        trace.append(
            EpochStats(epoch, float(loss.value[0, 0]), float(mean_score.value[0, 0]), params.weight_norm())
        )
        if epoch == train_cfg.epochs:
            break
        grads = tape.backward(loss)
        for k, g in grads.items():
            params.tensors[k] = params.tensors[k] - lr * g
        if not all(np.all(np.isfinite(v)) for v in params.tensors.values()):
            raise NumericError(f"training diverged at epoch {epoch + 1}: non-finite parameters")
    return TrainResult(params, centroid, trace)


def _embed_batch(batch, params):
    tape = Tape()
    P = tape_params(tape, params)
    Hs, Ht, _ = tape_embed(tape, batch, P, params.config)
    return [
        NodeEmbeddings(Hs.value[batch.node_slice(k)], Ht.value[batch.node_slice(k)])
        for k in range(len(batch.graphs))
    ]


def write_trace_csv(path, trace):
    _io.write_csv(
        path,
        ["epoch", "loss", "mean_score", "weight_norm"],
        [(r.epoch, r.loss, r.mean_score, r.weight_norm) for r in trace],
    )


# ---------------------------------------------------------------------------
# scoring and ranking


@dataclass
class ScoreReport:
    window_index: int
    node_scores: dict
    threshold: float
    flagged_nodes: list
    ranked_paths: list = field(default_factory=list)  # [(CallPath, score)]

    def to_dict(self):
        return {
            "window_index": self.window_index,
            "node_scores": dict(self.node_scores),
            "threshold": self.threshold,
            "flagged_nodes": list(self.flagged_nodes),
            "ranked_paths": [
                {"services": list(p.services), "span_ids": list(p.span_ids), "score": s}
                for p, s in self.ranked_paths
            ],
        }


def score_windows(graphs, params, centroid, threshold):
    """Score every node of every window. Returns one report per window."""
    embeddings = forward_many(graphs, params)
    reports = []
    for g, emb in zip(graphs, embeddings):
        s = node_scores(emb.U, centroid) if g.n_nodes else np.zeros(0)
        scores = {name: float(v) for name, v in zip(g.services, s)}
        flagged = [name for name in g.services if scores[name] > threshold]
        reports.append(ScoreReport(g.window_index, scores, float(threshold), flagged))
    return reports


def rank_paths(paths, scores, top_k=None):
    """Deduplicate by service sequence, score, sort.

    Order: score descending, then shorter path, then lexicographic services.
    """
    seen = {}
    for p in paths:
        seen.setdefault(p.services, p)
    scored = [(p, path_score(p, scores)) for p in seen.values()]
    scored.sort(key=lambda ps: (-ps[1], len(ps[0].services), ps[0].services))
    return scored if top_k is None else scored[:top_k]


def trace_root_cause(graph, trees, params, centroid, threshold, top_k=10):
    """Node scores, flagged nodes and the top-k scoring call paths of a window."""
    report = score_windows([graph], params, centroid, threshold)[0]
    paths = [p for tree in trees for p in extract_call_paths(tree, graph.window_index)]
    report.ranked_paths = rank_paths(paths, report.node_scores, top_k) if top_k else []
    return report
