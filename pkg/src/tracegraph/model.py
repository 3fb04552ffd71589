"""Graph-convolution + GRU node encoder.

Structural branch: project node features to ``hidden_dim``, then stack
graph-convolution layers ``act(LN(A_hat @ H @ W)) + H``. Temporal branch: a
GRU runs over each edge's feature history; a node's temporal embedding is
the mean final state of its incident edges (in and out). The two are
concatenated column-wise.

Everything is evaluated on a :class:`~tracegraph.autodiff.Tape`, so the
same code serves inference and training. Several windows are encoded at
once by stacking them into a block-diagonal :class:`GraphBatch`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import _io
from .autodiff import Tape
from .errors import ConfigError, ShapeError
from .graphs import EDGE_DIM, NODE_DIM, normalize_adjacency

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class ModelConfig:
    gcn_layers: int = 2
    hidden_dim: int = 32
    activation: str = "relu"
    use_residual: bool = True
    use_layer_norm: bool = True
    gru_hidden: int = 16
    history_T: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("gcn_layers", "hidden_dim", "gru_hidden", "history_T"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"model.activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def embed_dim(self):
        return self.hidden_dim + self.gru_hidden


GRU_GATES = ("r", "z", "h")


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class ModelParams:
    """Named parameter matrices plus the config that shaped them."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = {k: np.array(v, dtype=np.float64) for k, v in tensors.items()}
        self.validate()

    @classmethod
    def init(cls, config, node_dim=NODE_DIM, edge_dim=EDGE_DIM):
        rng = np.random.default_rng(config.seed)
        H, G = config.hidden_dim, config.gru_hidden
        t = {"input_proj": _glorot(rng, node_dim, H)}
        for l in range(config.gcn_layers):
            t[f"gcn_W_{l}"] = _glorot(rng, H, H)
        for l in range(config.gcn_layers):
            t[f"ln_gain_{l}"] = np.ones((1, H))
            t[f"ln_bias_{l}"] = np.zeros((1, H))
        for g in GRU_GATES:
            t[f"W_{g}"] = _glorot(rng, edge_dim, G)
        for g in GRU_GATES:
            t[f"U_{g}"] = _glorot(rng, G, G)
        for g in GRU_GATES:
            t[f"b_{g}"] = np.zeros((1, G))
        return cls(config, t)

    @property
    def node_dim(self):
        return self.tensors["input_proj"].shape[0]

    @property
    def edge_dim(self):
        return self.tensors["W_r"].shape[0]

    def decay_names(self):
        """Matrices under the L2 penalty: projection, GCN and GRU weights."""
        return [k for k in self.tensors if k == "input_proj" or k.startswith(("gcn_W_", "W_", "U_"))]

    def weight_norm(self):
        return float(np.sqrt(sum(np.sum(self.tensors[k] ** 2) for k in self.decay_names())))

    def validate(self):
        cfg = self.config
        H, G = cfg.hidden_dim, cfg.gru_hidden
        t = self.tensors
        need = ["input_proj"] + [f"gcn_W_{l}" for l in range(cfg.gcn_layers)]
        need += [f"ln_gain_{l}" for l in range(cfg.gcn_layers)]
        need += [f"ln_bias_{l}" for l in range(cfg.gcn_layers)]
        need += [f"{p}_{g}" for p in ("W", "U", "b") for g in GRU_GATES]
        missing = [k for k in need if k not in t]
        if missing:
            raise ShapeError(f"model is missing tensors {missing}")
        extra = sorted(set(t) - set(need))
        if extra:
            raise ShapeError(f"model has unexpected tensors {extra}")
        d, de = t["input_proj"].shape[0], t["W_r"].shape[0]
        expected = {"input_proj": (d, H)}
        for l in range(cfg.gcn_layers):
            expected[f"gcn_W_{l}"] = (H, H)
            expected[f"ln_gain_{l}"] = (1, H)
            expected[f"ln_bias_{l}"] = (1, H)
        for g in GRU_GATES:
            expected[f"W_{g}"] = (de, G)
            expected[f"U_{g}"] = (G, G)
            expected[f"b_{g}"] = (1, G)
        for k, shape in expected.items():
            if t[k].shape != shape:
                raise ShapeError(
                    f"tensor {k} has shape {t[k].shape}, config expects {shape} "
                    f"(hidden_dim={H}, gru_hidden={G})"
                )
            if not np.all(np.isfinite(t[k])):
                raise ShapeError(f"tensor {k} has non-finite entries")

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def to_dict(self):
        return {
            "config": asdict(self.config),
            "tensors": {
                k: {"rows": v.shape[0], "cols": v.shape[1], "data": v.ravel().tolist()}
                for k, v in self.tensors.items()
            },
        }

    @classmethod
    def from_dict(cls, d):
        try:
            config = ModelConfig(**d["config"])
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None
        tensors = {}
        for k, v in d["tensors"].items():
            data = np.asarray(v["data"], dtype=np.float64)
            if data.size != v["rows"] * v["cols"]:
                raise ShapeError(f"tensor {k}: {data.size} values for {v['rows']}x{v['cols']}")
            tensors[k] = data.reshape(v["rows"], v["cols"])
        return cls(config, tensors)

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.config == other.config
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())
        )

    def save(self, path):
        _io.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class NodeEmbeddings:
    H_struct: np.ndarray
    H_temp: np.ndarray

    @property
    def U(self):
        return fuse(self.H_struct, self.H_temp)


# ---------------------------------------------------------------------------
# batching


class GraphBatch:
    """Several windows stacked into one block-diagonal graph."""

    def __init__(self, graphs, history_T):
        graphs = list(graphs)
        self.graphs = graphs
        sizes = [g.n_nodes for g in graphs]
        self.offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
        n = int(self.offsets[-1])
        self.n_nodes = n
        self.A_hat = np.zeros((n, n))
        xs = []
        edges, seqs = [], []
        for g, off in zip(graphs, self.offsets):
            if g.n_nodes == 0:
                continue
            self.A_hat[off : off + g.n_nodes, off : off + g.n_nodes] = normalize_adjacency(g.A)
            xs.append(g.X)
            for (i, j), s in g.edge_series.items():
                if s.shape[0] != history_T:
                    raise ShapeError(
                        f"window {g.window_index}: edge ({i}, {j}) history has length "
                        f"{s.shape[0]}, expected {history_T}"
                    )
                edges.append((off + i, off + j))
                seqs.append(s)
        dims = {x.shape[1] for x in xs}
        if len(dims) > 1:
            raise ShapeError(f"graphs disagree on node feature dimension: {sorted(dims)}")
        self.node_dim = dims.pop() if dims else NODE_DIM
        self.X = np.vstack(xs) if xs else np.zeros((0, self.node_dim))
        self.history_T = history_T
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if seqs:
            self.edge_dim = seqs[0].shape[1]
            # (T, E, d_e)
            self.edge_seq = np.stack(seqs, axis=1)
        else:
            self.edge_dim = EDGE_DIM
            self.edge_seq = np.zeros((history_T, 0, EDGE_DIM))
        self.incidence = incidence_mean_matrix(self.edges, n)

    def node_slice(self, k):
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))


def incidence_mean_matrix(edges, n_nodes):
    """``M`` with ``(M @ H_edges)[i]`` the mean over edges touching node i."""
    M = np.zeros((n_nodes, len(edges)))
    for e, (i, j) in enumerate(edges):
        M[i, e] = 1.0
        M[j, e] = 1.0
    deg = M.sum(axis=1, keepdims=True)
    np.divide(M, deg, out=M, where=deg > 0)
    return M


# ---------------------------------------------------------------------------
# tape-level building blocks


def _activate(tape, node, name):
    if name == "relu":
        return tape.relu(node)
    if name == "tanh":
        return tape.tanh(node)
    return node


def tape_gcn(tape, A_hat, X, P, cfg):
    H = tape.matmul(X, P["input_proj"])
    for l in range(cfg.gcn_layers):
        Z = tape.matmul(tape.matmul(A_hat, H), P[f"gcn_W_{l}"])
        if cfg.use_layer_norm:
            Z = tape.layer_norm_row(Z, P[f"ln_gain_{l}"], P[f"ln_bias_{l}"])
        out = _activate(tape, Z, cfg.activation)
        H = tape.add(out, H) if cfg.use_residual else out
    return H


def tape_gru_step(tape, z, h_prev, P, ones):
    """One GRU step for a batch of rows. ``ones`` is an ``E x 1`` constant."""

    def gate(g, h_in):
        pre = tape.add(tape.matmul(z, P[f"W_{g}"]), tape.matmul(h_in, P[f"U_{g}"]))
        return tape.add(pre, tape.matmul(ones, P[f"b_{g}"]))

    r = tape.sigmoid(gate("r", h_prev))
    u = tape.sigmoid(gate("z", h_prev))
    cand = tape.tanh(gate("h", tape.hadamard(r, h_prev)))
    keep_new = tape.sub(tape.constant(np.ones(u.shape)), u)
    return tape.add(tape.hadamard(keep_new, cand), tape.hadamard(u, h_prev))


def tape_temporal(tape, batch, P, cfg):
    E = batch.edges.shape[0]
    if E == 0:
        return tape.constant(np.zeros((batch.n_nodes, cfg.gru_hidden)))
    ones = tape.constant(np.ones((E, 1)))
    h = tape.constant(np.zeros((E, cfg.gru_hidden)))
    for t in range(batch.history_T):
        h = tape_gru_step(tape, tape.constant(batch.edge_seq[t]), h, P, ones)
    return tape.matmul(tape.constant(batch.incidence), h)


def tape_params(tape, params):
    return {k: tape.leaf(v, name=k) for k, v in params.tensors.items()}


def check_compatible(batch, params):
    if batch.n_nodes and batch.node_dim != params.node_dim:
        raise ShapeError(
            f"model expects node feature dimension {params.node_dim}, graphs have {batch.node_dim}"
        )
    if batch.edges.shape[0] and batch.edge_dim != params.edge_dim:
        raise ShapeError(
            f"model expects edge feature dimension {params.edge_dim}, graphs have {batch.edge_dim}"
        )
    if batch.history_T != params.config.history_T:
        raise ShapeError(
            f"model history_T {params.config.history_T} does not match edge history {batch.history_T}"
        )


def tape_embed(tape, batch, P, cfg):
    """Returns ``(H_struct, H_temp, U)`` nodes for a batch."""
    A_hat = tape.constant(batch.A_hat)
    X = tape.constant(batch.X)
    Hs = tape_gcn(tape, A_hat, X, P, cfg)
    Ht = tape_temporal(tape, batch, P, cfg)
    return Hs, Ht, tape.concat_cols(Hs, Ht)


# ---------------------------------------------------------------------------
# plain-array API


def gcn_forward(A_hat, X, params, cfg=None):
    cfg = cfg or params.config
    A_hat = np.asarray(A_hat, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if A_hat.shape != (X.shape[0], X.shape[0]):
        raise ShapeError(f"A_hat {A_hat.shape} does not match {X.shape[0]} nodes")
    if X.shape[1] != params.node_dim:
        raise ShapeError(f"X has {X.shape[1]} features, model expects {params.node_dim}")
    tape = Tape()
    P = tape_params(tape, params)
    return tape_gcn(tape, tape.constant(A_hat), tape.constant(X), P, cfg).value


def gru_step(z, h_prev, params):
    """Single GRU step on 1-D vectors (or row batches)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h_prev, dtype=np.float64))
    if z.shape[1] != params.edge_dim or h.shape[1] != params.config.gru_hidden:
        raise ShapeError(
            f"gru_step: z has {z.shape[1]} features (expected {params.edge_dim}), "
            f"h has {h.shape[1]} (expected {params.config.gru_hidden})"
        )
    if z.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_step: {z.shape[0]} inputs for {h.shape[0]} states")
    tape = Tape()
    P = tape_params(tape, params)
    ones = tape.constant(np.ones((z.shape[0], 1)))
    out = tape_gru_step(tape, tape.constant(z), tape.constant(h), P, ones)
    return out.value[0] if np.ndim(h_prev) == 1 else out.value


def encode_temporal(edge_series, n_nodes, params, cfg=None):
    cfg = cfg or params.config
    edges = sorted(edge_series)
    lengths = {edge_series[e].shape[0] for e in edges}
    if len(lengths) > 1:
        raise ShapeError(f"ragged edge histories: lengths {sorted(lengths)}")
    if not edges:
        return np.zeros((n_nodes, cfg.gru_hidden))
    tape = Tape()
    P = tape_params(tape, params)
    ones = tape.constant(np.ones((len(edges), 1)))
    h = tape.constant(np.zeros((len(edges), cfg.gru_hidden)))
    for t in range(lengths.pop()):
        z = tape.constant(np.stack([edge_series[e][t] for e in edges]))
        h = tape_gru_step(tape, z, h, P, ones)
    return incidence_mean_matrix(edges, n_nodes) @ h.value


def fuse(H_struct, H_temp):
    if H_struct.shape[0] != H_temp.shape[0]:
        raise ShapeError(f"fuse: {H_struct.shape[0]} structural rows vs {H_temp.shape[0]} temporal rows")
    return np.concatenate([H_struct, H_temp], axis=1)


def forward(graph, params, cfg=None):
    """Embed one window (with edge histories attached)."""
    cfg = cfg or params.config
    return forward_many([graph], params, cfg)[0]


def forward_many(graphs, params, cfg=None):
    cfg = cfg or params.config
    batch = GraphBatch(graphs, cfg.history_T)
    check_compatible(batch, params)
    tape = Tape()
    P = tape_params(tape, params)
    Hs, Ht, _ = tape_embed(tape, batch, P, cfg)
    out = []
    for k in range(len(graphs)):
        sl = batch.node_slice(k)
        out.append(NodeEmbeddings(Hs.value[sl], Ht.value[sl]))
    return out
