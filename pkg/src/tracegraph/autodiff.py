"""Reverse-mode differentiation over dense float64 matrices.

A :class:`Tape` records every operation as it is evaluated. Nodes are
appended in evaluation order, so the inputs of node ``k`` always have ids
below ``k`` and the reverse pass is a plain backwards loop. A tape is
single-shot: build it, call :meth:`Tape.backward` once, throw it away.

All values are 2-D. Vectors are ``1 x n`` rows and scalars ``1 x 1``.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError, TapeError

LN_VAR_FLOOR = 1e-8

OPS = (
    "leaf",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scalar_mul",
    "sigmoid",
    "tanh",
    "relu",
    "concat_cols",
    "row_mean",
    "sum_sq",
    "layer_norm_row",
)


def as_matrix(value, name="value", copy=True):
    """Validate ``value`` as a finite 2-D float64 array (copied by default)."""
    arr = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite entries")
    return arr


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Node:
    __slots__ = ("id", "op", "inputs", "value", "grad", "name", "cache", "needs_grad")

    def __init__(self, id, op, inputs, value, name=None, cache=None, needs_grad=True):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.name = name
        self.cache = cache
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} {self.value.shape}>"


class Tape:
    """Append-only computation graph."""

    def __init__(self):
        self.nodes = []
        self._spent = False

    def _push(self, op, inputs, value, name=None, cache=None, needs_grad=None):
        if self._spent:
            raise TapeError("tape already differentiated; build a new one")
        if not np.all(np.isfinite(value)):
            shapes = " ".join(str(self.nodes[i].shape) for i in inputs)
            raise NumericError(f"{op}: non-finite result (input shapes {shapes})")
        if needs_grad is None:
            needs_grad = any(self.nodes[i].needs_grad for i in inputs)
        node = Node(len(self.nodes), op, tuple(inputs), value, name, cache, needs_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None):
        """A differentiable input."""
        return self._push("leaf", (), as_matrix(value, name or "leaf"), name=name, needs_grad=True)

    def constant(self, value, name=None):
        """An input that receives no gradient (its ``grad`` ends up zero)."""
        arr = as_matrix(value, name or "constant", copy=False)
        return self._push("leaf", (), arr, name=name, needs_grad=False)

    def apply(self, op, *inputs, **attrs):
        """Generic entry point: ``tape.apply("matmul", a, b)``."""
        if op not in OPS or op == "leaf":
            raise TapeError(f"unknown op {op!r}")
        return getattr(self, op)(*inputs, **attrs)

    # -- binary ------------------------------------------------------------

    def matmul(self, a, b):
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        return self._push("matmul", (a.id, b.id), a.value @ b.value)

    def _elementwise(self, op, a, b, value_fn):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
        # overflow is caught as non-finite by _push, no warning needed
        with np.errstate(over="ignore", invalid="ignore"):
            value = value_fn(a.value, b.value)
        return self._push(op, (a.id, b.id), value)

    def add(self, a, b):
        return self._elementwise("add", a, b, np.add)

    def sub(self, a, b):
        return self._elementwise("sub", a, b, np.subtract)

    def hadamard(self, a, b):
        return self._elementwise("hadamard", a, b, np.multiply)

    def concat_cols(self, *parts):
        if not parts:
            raise ShapeError("concat_cols: no inputs")
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
        value = np.concatenate([p.value for p in parts], axis=1)
        return self._push("concat_cols", tuple(p.id for p in parts), value)

    # -- unary -------------------------------------------------------------

    def scalar_mul(self, a, c):
        c = float(c)
        return self._push("scalar_mul", (a.id,), a.value * c, cache=c)

    def sigmoid(self, a):
        return self._push("sigmoid", (a.id,), _sigmoid(a.value))

    def tanh(self, a):
        return self._push("tanh", (a.id,), np.tanh(a.value))

    def relu(self, a):
        return self._push("relu", (a.id,), np.maximum(a.value, 0.0))

    def row_mean(self, a):
        """Mean over rows: ``n x m`` to ``1 x m``."""
        if a.shape[0] == 0:
            raise ShapeError("row_mean: no rows")
        return self._push("row_mean", (a.id,), a.value.mean(axis=0, keepdims=True))

    def sum_sq(self, a):
        v = a.value.ravel()
        # overflow is caught as non-finite by _push, no warning needed
        with np.errstate(over="ignore"):
            total = float(v @ v)
        return self._push("sum_sq", (a.id,), np.array([[total]]))

    def layer_norm_row(self, x, gain, bias):
        m = x.shape[1]
        if gain.shape != (1, m) or bias.shape != (1, m):
            raise ShapeError(
                f"layer_norm_row: gain {gain.shape} / bias {bias.shape} do not match {x.shape}"
            )
        y, xhat, inv_std, floored = kernels.layer_norm_forward(
            x.value, gain.value, bias.value, LN_VAR_FLOOR
        )
        return self._push(
            "layer_norm_row", (x.id, gain.id, bias.id), y, cache=(xhat, inv_std, floored)
        )

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss):
        """Accumulate d(loss)/d(node) into ``node.grad`` for every node.

        Returns ``{leaf name: gradient}`` for the named leaves.
        """
        if self._spent:
            raise TapeError("backward already called on this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
        self._spent = True
        nodes = self.nodes
        for node in nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))

        def acc(idx, g):
            n = nodes[idx]
            if n.needs_grad:
                n.grad = g if n.grad is None else n.grad + g

        for node in reversed(nodes[: loss.id + 1]):
            g = node.grad
            if g is None or node.op == "leaf" or not node.needs_grad:
                continue
            ins = node.inputs
            op = node.op
            if op == "matmul":
                na, nb = nodes[ins[0]], nodes[ins[1]]
                if na.needs_grad:
                    acc(ins[0], g @ nb.value.T)
                if nb.needs_grad:
                    acc(ins[1], na.value.T @ g)
            elif op == "add":
                acc(ins[0], g)
                acc(ins[1], g)
            elif op == "sub":
                acc(ins[0], g)
                acc(ins[1], -g)
            elif op == "hadamard":
                acc(ins[0], g * nodes[ins[1]].value)
                acc(ins[1], g * nodes[ins[0]].value)
            elif op == "scalar_mul":
                acc(ins[0], g * node.cache)
            elif op == "sigmoid":
                y = node.value
                acc(ins[0], g * y * (1.0 - y))
            elif op == "tanh":
                y = node.value
                acc(ins[0], g * (1.0 - y * y))
            elif op == "relu":
                acc(ins[0], g * (nodes[ins[0]].value > 0.0))
            elif op == "concat_cols":
                start = 0
                for idx in ins:
                    width = nodes[idx].shape[1]
                    acc(idx, g[:, start : start + width])
                    start += width
            elif op == "row_mean":
                n_rows = nodes[ins[0]].shape[0]
                acc(ins[0], np.repeat(g / n_rows, n_rows, axis=0))
            elif op == "sum_sq":
                acc(ins[0], 2.0 * g[0, 0] * nodes[ins[0]].value)
            elif op == "layer_norm_row":
                xhat, inv_std, floored = node.cache
                dx, dgain, dbias = kernels.layer_norm_backward(
                    g, xhat, inv_std, floored, nodes[ins[1]].value
                )
                acc(ins[0], dx)
                acc(ins[1], dgain)
                acc(ins[2], dbias)
            else:  # pragma: no cover
                raise TapeError(f"no gradient rule for {op}")

        for node in nodes:
            if node.grad is None and node.op == "leaf":
                node.grad = np.zeros_like(node.value)
        return {
            n.name: n.grad for n in nodes if n.op == "leaf" and n.needs_grad and n.name is not None
        }
