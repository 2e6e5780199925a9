"""Minimal reverse-mode differentiation over dense float64 matrices.

Everything trainable in this package runs on this engine: values are 2-D
numpy arrays recorded on a ``Tape``, and one ``backward`` pass fills the
gradients of every ``Parameter`` bound to that tape. The op vocabulary is
deliberately small; it covers exactly what the fusion model needs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "NondeterministicFunctionError",
    "Parameter",
    "Node",
    "Tape",
    "backward",
    "finite_diff_check",
    "GradientDescent",
    "AdamW",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending dims."""


class NondeterministicFunctionError(RuntimeError):
    """Raised when a function handed to finite_diff_check is not deterministic."""


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of ndim {a.ndim}")
    return a


class Parameter:
    """A named trainable matrix with a persistent gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = _as_matrix(value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Node:
    """One recorded value on a tape."""

    __slots__ = ("nid", "value", "grad", "op", "parents", "bwd", "param", "flag")

    def __init__(self, nid, value, op, parents, bwd, param=None):
        self.nid = nid
        self.value = value
        self.grad = None
        self.op = op
        self.parents = parents
        self.bwd = bwd
        self.param = param
        self.flag = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


def _dims(a: np.ndarray) -> str:
    return f"{a.shape[0]}x{a.shape[1]}"


class Tape:
    """Append-only record of operations; creation order is topological order.

    A tape is owned by exactly one forward/backward cycle: build the graph,
    call :meth:`backward` once, then discard before parameters are mutated.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._param_leaves: dict[int, tuple[Parameter, Node]] = {}

    # -- node creation -------------------------------------------------

    def _push(self, value, op, parents, bwd, param=None) -> Node:
        node = Node(len(self.nodes), value, op, parents, bwd, param)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        """A leaf that never receives a gradient."""
        return self._push(_as_matrix(value), "constant", (), None)

    def leaf(self, param: Parameter) -> Node:
        """Bind a Parameter to this tape; repeated binds return the same node."""
        key = id(param)
        cached = self._param_leaves.get(key)
        if cached is not None:
            return cached[1]
        node = self._push(param.value, "leaf", (), None, param=param)
        self._param_leaves[key] = (param, node)
        return node

    def _resolve(self, x) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, int):
            return self.nodes[x]
        raise TypeError(f"expected Node or node id, got {type(x).__name__}")

    def value(self, x) -> np.ndarray:
        return self._resolve(x).value

    # -- ops -----------------------------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self._resolve(a), self._resolve(b)
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(
                f"matmul: inner dims differ ({_dims(av)} @ {_dims(bv)})"
            )
        out = av @ bv

        def bwd(g):
            return (g @ bv.T, av.T @ g)

        return self._push(out, "matmul", (a, b), bwd)

    def add(self, a, b) -> Node:
        a, b = self._resolve(a), self._resolve(b)
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            def bwd(g):
                return (g, g)
        elif bv.shape == (1, av.shape[1]):  # bias row broadcast over rows
            def bwd(g):
                return (g, g.sum(axis=0, keepdims=True))
        elif bv.shape == (1, 1):
            def bwd(g):
                return (g, g.sum().reshape(1, 1))
        elif av.shape == (1, bv.shape[1]):
            def bwd(g):
                return (g.sum(axis=0, keepdims=True), g)
        elif av.shape == (1, 1):
            def bwd(g):
                return (g.sum().reshape(1, 1), g)
        else:
            raise ShapeError(f"add: shapes {_dims(av)} and {_dims(bv)} incompatible")
        return self._push(av + bv, "add", (a, b), bwd)

    def scalar_mul(self, a, c: float) -> Node:
        a = self._resolve(a)
        c = float(c)
        av = a.value

        def bwd(g):
            return (g * c,)

        return self._push(av * c, "scalar-mul", (a,), bwd)

    def mul(self, a, b) -> Node:
        """Elementwise product; one operand may be 1x1."""
        a, b = self._resolve(a), self._resolve(b)
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            def bwd(g):
                return (g * bv, g * av)
        elif bv.shape == (1, 1):
            def bwd(g):
                return (g * bv, (g * av).sum().reshape(1, 1))
        elif av.shape == (1, 1):
            def bwd(g):
                return ((g * bv).sum().reshape(1, 1), g * av)
        else:
            raise ShapeError(f"mul: shapes {_dims(av)} and {_dims(bv)} incompatible")
        return self._push(av * bv, "mul", (a, b), bwd)

    def concat_rows(self, parts: Sequence) -> Node:
        parts = [self._resolve(p) for p in parts]
        if not parts:
            raise ShapeError("concat-rows: no inputs")
        cols = parts[0].value.shape[1]
        for p in parts:
            if p.value.shape[1] != cols:
                raise ShapeError(
                    f"concat-rows: column counts differ ({p.value.shape[1]} vs {cols})"
                )
        out = np.concatenate([p.value for p in parts], axis=0)
        extents = [p.value.shape[0] for p in parts]

        def bwd(g):
            grads, row = [], 0
            for n in extents:
                grads.append(g[row:row + n])
                row += n
            return tuple(grads)

        return self._push(out, "concat-rows", tuple(parts), bwd)

    def row_softmax(self, a) -> Node:
        a = self._resolve(a)
        shifted = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)

        def bwd(g):
            inner = (g * y).sum(axis=1, keepdims=True)
            return (y * (g - inner),)

        return self._push(y, "row-softmax", (a,), bwd)

    def col_softmax(self, a) -> Node:
        a = self._resolve(a)
        shifted = a.value - a.value.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=0, keepdims=True)

        def bwd(g):
            inner = (g * y).sum(axis=0, keepdims=True)
            return (y * (g - inner),)

        return self._push(y, "col-softmax", (a,), bwd)

    def unit_row_normalize(self, a) -> Node:
        a = self._resolve(a)
        av = a.value
        norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
        zero_rows = norms[:, 0] == 0.0
        safe = np.where(norms == 0.0, 1.0, norms)
        y = av / safe
        if zero_rows.any():
            y[zero_rows] = 1.0 / math.sqrt(av.shape[1])

        def bwd(g):
            inner = (g * y).sum(axis=1, keepdims=True)
            out = (g - y * inner) / safe
            if zero_rows.any():
                out[zero_rows] = 0.0  # guarded rows are constant
            return (out,)

        node = self._push(y, "unit-row-normalize", (a,), bwd)
        if zero_rows.any():
            node.flag = "zero-row-guard"
        return node

    def relu(self, a) -> Node:
        a = self._resolve(a)
        mask = a.value > 0.0

        def bwd(g):
            return (g * mask,)

        return self._push(a.value * mask, "relu", (a,), bwd)

    def gelu(self, a) -> Node:
        a = self._resolve(a)
        x = a.value
        phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = x * phi

        def bwd(g):
            d = phi + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
            return (g * d,)

        return self._push(out, "gelu", (a,), bwd)

    def log(self, a, eps: float = 0.0) -> Node:
        a = self._resolve(a)
        shifted = a.value + eps
        if (shifted <= 0.0).any():
            raise ValueError("log: non-positive input (after epsilon shift)")

        def bwd(g):
            return (g / shifted,)

        return self._push(np.log(shifted), "log", (a,), bwd)

    def exp(self, a) -> Node:
        a = self._resolve(a)
        out = np.exp(a.value)

        def bwd(g):
            return (g * out,)

        return self._push(out, "exp", (a,), bwd)

    def pow_const(self, a, c: float) -> Node:
        """Elementwise x**c for constant c >= 0; x must be non-negative."""
        a = self._resolve(a)
        c = float(c)
        x = a.value
        if c < 0.0:
            raise ValueError("pow-const: exponent must be non-negative")
        if (x < 0.0).any():
            raise ValueError("pow-const: negative base")
        out = x ** c

        def bwd(g):
            if c == 0.0:
                return (np.zeros_like(x),)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(x > 0.0, c * x ** (c - 1.0), 1.0 if c == 1.0 else 0.0)
            return (g * d,)

        return self._push(out, "pow-const", (a,), bwd)

    def sum(self, a) -> Node:
        a = self._resolve(a)
        shape = a.value.shape

        def bwd(g):
            return (np.full(shape, g[0, 0]),)

        return self._push(np.array([[a.value.sum()]]), "sum", (a,), bwd)

    def mean(self, a) -> Node:
        a = self._resolve(a)
        shape = a.value.shape
        size = shape[0] * shape[1]

        def bwd(g):
            return (np.full(shape, g[0, 0] / size),)

        return self._push(np.array([[a.value.mean()]]), "mean", (a,), bwd)

    def slice_rows(self, a, start: int, stop: int) -> Node:
        a = self._resolve(a)
        av = a.value
        if not (0 <= start < stop <= av.shape[0]):
            raise ShapeError(
                f"slice-rows: [{start}:{stop}] out of range for {_dims(av)}"
            )

        def bwd(g):
            full = np.zeros_like(av)
            full[start:stop] = g
            return (full,)

        return self._push(av[start:stop].copy(), "slice-rows", (a,), bwd)

    def transpose(self, a) -> Node:
        a = self._resolve(a)

        def bwd(g):
            return (g.T,)

        return self._push(a.value.T.copy(), "transpose", (a,), bwd)

    # -- generic recording (spec surface) -------------------------------

    def record_forward(self, op_kind: str, inputs: Sequence, **kwargs) -> int:
        """Record one op by name; returns the new node id."""
        try:
            fn = _OP_DISPATCH[op_kind]
        except KeyError:
            raise ValueError(f"unknown op kind {op_kind!r}") from None
        return fn(self, inputs, kwargs).nid

    # -- reverse pass ----------------------------------------------------

    def backward(self, loss) -> None:
        """Reverse sweep from a scalar loss node.

        Gradients of every bound Parameter are accumulated into
        ``param.grad``; parameters not reachable from the loss keep their
        current (typically zero) gradient.
        """
        loss = self._resolve(loss)
        if loss.value.shape != (1, 1):
            raise ShapeError(
                f"backward: loss must be 1x1, got {_dims(loss.value)}"
            )
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or node.bwd is None:
                continue
            for parent, g in zip(node.parents, node.bwd(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for param, leafnode in self._param_leaves.values():
            if leafnode.grad is not None:
                param.grad += leafnode.grad


def _op_entry(name):
    def wrap(tape, inputs, kwargs):
        if name == "concat-rows":
            return tape.concat_rows(inputs)
        method = getattr(tape, name.replace("-", "_"))
        return method(*inputs, **kwargs)
    return wrap


_OP_DISPATCH = {
    name: _op_entry(name)
    for name in (
        "matmul", "add", "scalar-mul", "mul", "concat-rows", "row-softmax",
        "col-softmax", "unit-row-normalize", "relu", "gelu", "log", "exp",
        "pow-const", "sum", "mean", "slice-rows", "transpose",
    )
}


def backward(tape: Tape, loss) -> None:
    tape.backward(loss)


def finite_diff_check(
    fn: Callable[[], tuple[Tape, Node]],
    params: Iterable[Parameter],
    h: float = 1e-4,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn`` must be a deterministic zero-argument callable that rebuilds the
    graph from the current parameter values and returns ``(tape, loss_node)``.
    Returns the worst relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0.0:
        raise ValueError("finite_diff_check: h must be positive")
    params = list(params)

    def loss_value() -> float:
        _, node = fn()
        return float(node.value[0, 0])

    v1, v2 = loss_value(), loss_value()
    if math.isnan(v1) or math.isnan(v2):
        raise NondeterministicFunctionError("fn returned NaN")
    if v1 != v2:
        raise NondeterministicFunctionError(
            f"fn is not deterministic ({v1!r} vs {v2!r})"
        )

    for p in params:
        p.zero_grad()
    tape, loss = fn()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    worst = 0.0
    for p in params:
        ana = analytic[p.name]
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = loss_value()
            p.value[idx] = orig - h
            fm = loss_value()
            p.value[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(ana[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana[idx] - numeric) / denom)
    return worst


class GradientDescent:
    """Plain gradient descent: theta <- theta - lr * grad."""

    def __init__(self, lr: float) -> None:
        if lr <= 0.0:
            raise ValueError("lr must be positive")
        self.lr = lr

    def step(self, params: Iterable[Parameter]) -> None:
        for p in params:
            p.value -= self.lr * p.grad

    def state_dict(self) -> dict:
        return {"kind": "gd"}

    def load_state_dict(self, state: dict) -> None:
        if state.get("kind") != "gd":
            raise ValueError("optimizer state mismatch: expected gd")


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0) -> None:
        if lr <= 0.0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: Iterable[Parameter]) -> None:
        for p in params:
            m = self._m.get(p.name)
            if m is None:
                m = self._m[p.name] = np.zeros_like(p.value)
                self._v[p.name] = np.zeros_like(p.value)
                self._t[p.name] = 0
            v = self._v[p.name]
            self._t[p.name] += 1
            t = self._t[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.value -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                  + self.weight_decay * p.value)

    def state_dict(self) -> dict:
        return {
            "kind": "adamw",
            "m": {k: v.copy() for k, v in self._m.items()},
            "v": {k: v.copy() for k, v in self._v.items()},
            "t": dict(self._t),
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("kind") != "adamw":
            raise ValueError("optimizer state mismatch: expected adamw")
        self._m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self._v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}
        self._t = {k: int(v) for k, v in state["t"].items()}
