"""Define-then-run reverse-mode differentiation over a fixed op set.

A :class:`Tape` records a DAG of ops. ``forward`` evaluates it in creation
order against a dict of bindings (parameters and inputs by name); ``backward``
walks the nodes once in reverse order and returns a :class:`GradientMap` with
one gradient per parameter. All arithmetic runs in float64.

Only parameters receive gradients. Inputs (Gumbel noise, temperature, noise
scale, calibration activations) and constants are treated as fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class TapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Node:
    tape: "Tape"
    id: int

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.hadamard(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


@dataclass
class _Op:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)


class GradientMap(dict):
    """Parameter name -> gradient array, same shape as the parameter."""

    def names(self):
        return sorted(self)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _expand_groups(s: np.ndarray, cols: int, group_size: int) -> np.ndarray:
    return np.repeat(s, group_size, axis=1)[:, :cols]


def _group_sum(a: np.ndarray, ngroups: int, group_size: int) -> np.ndarray:
    rows, cols = a.shape
    pad = ngroups * group_size - cols
    if pad:
        a = np.concatenate([a, np.zeros((rows, pad), dtype=a.dtype)], axis=1)
    return a.reshape(rows, ngroups, group_size).sum(axis=2)


# forward: (input values, attrs) -> output value
# backward: (upstream grad, input values, output value, attrs) -> grad per input (None = no grad)
def _fwd_matmul(v, a):
    x, y = v
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise TapeError(f"matmul shape mismatch {x.shape} x {y.shape}")
    return x @ y


def _bwd_matmul(g, v, out, a):
    x, y = v
    return [g @ y.T, x.T @ g]


def _check_broadcast(kind, x, y):
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise TapeError(f"{kind} shape mismatch {x.shape} vs {y.shape}") from None


def _fwd_add(v, a):
    _check_broadcast("add", *v)
    return v[0] + v[1]


def _bwd_add(g, v, out, a):
    return [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]


def _fwd_sub(v, a):
    _check_broadcast("sub", *v)
    return v[0] - v[1]


def _bwd_sub(g, v, out, a):
    return [_unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)]


def _fwd_hadamard(v, a):
    _check_broadcast("hadamard", *v)
    return v[0] * v[1]


def _bwd_hadamard(g, v, out, a):
    return [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)]


def _fwd_softmax_t(v, a):
    logits, noise, tau, kappa = v
    if logits.shape != noise.shape:
        raise TapeError(f"softmax noise shape {noise.shape} != logits shape {logits.shape}")
    z = (float(kappa) * logits + noise) / float(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _bwd_softmax_t(g, v, p, a):
    _, _, tau, kappa = v
    dz = p * (g - np.sum(g * p, axis=-1, keepdims=True))
    return [dz * (float(kappa) / float(tau)), None, None, None]


def _fwd_binary_gumbel(v, a):
    logit, g0, g1, tau, kappa = v
    if not (logit.shape == g0.shape == g1.shape):
        raise TapeError("binary_gumbel noise shape mismatch")
    return _sigmoid((2.0 * float(kappa) * logit + g1 - g0) / float(tau))


def _bwd_binary_gumbel(g, v, p, a):
    _, _, _, tau, kappa = v
    return [g * p * (1.0 - p) * (2.0 * float(kappa) / float(tau)), None, None, None, None]


def _fwd_weighted_sum(v, a):
    p, values = v
    _check_broadcast("weighted_sum", p, values)
    return np.sum(p * values, axis=-1)


def _bwd_weighted_sum(g, v, out, a):
    p, values = v
    return [np.broadcast_to(g[..., None] * values, p.shape).copy(), None]


def _fwd_group_scale(v, a):
    s, q = v
    gs = a["group_size"]
    ngroups = -(-q.shape[1] // gs)
    if s.shape != (q.shape[0], ngroups):
        raise TapeError(f"group_scale: scales {s.shape} do not match weights {q.shape} / {gs}")
    return _expand_groups(s, q.shape[1], gs) * q


def _bwd_group_scale(g, v, out, a):
    s, q = v
    gs = a["group_size"]
    return [_group_sum(g * q, s.shape[1], gs), g * _expand_groups(s, q.shape[1], gs)]


def _bwd_silu(g, v, out, a):
    x = v[0]
    sg = _sigmoid(x)
    return [g * sg * (1.0 + x * (1.0 - sg))]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "transpose": (lambda v, a: v[0].T, lambda g, v, o, a: [g.T]),
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "hadamard": (_fwd_hadamard, _bwd_hadamard),
    "scale": (lambda v, a: v[0] * a["c"], lambda g, v, o, a: [g * a["c"]]),
    "exp": (lambda v, a: np.exp(v[0]), lambda g, v, o, a: [g * o]),
    "softmax_t": (_fwd_softmax_t, _bwd_softmax_t),
    "binary_gumbel": (_fwd_binary_gumbel, _bwd_binary_gumbel),
    "weighted_sum": (_fwd_weighted_sum, _bwd_weighted_sum),
    "group_scale": (_fwd_group_scale, _bwd_group_scale),
    "silu": (lambda v, a: v[0] * _sigmoid(v[0]), _bwd_silu),
    "frobenius_sq": (lambda v, a: np.asarray(np.sum(v[0] * v[0])), lambda g, v, o, a: [2.0 * g * v[0]]),
}

_LEAVES = ("param", "input", "const")


class Tape:
    def __init__(self):
        self._ops: list[_Op] = []
        self._values: list[np.ndarray] | None = None
        self._params: dict[str, int] = {}
        self._inputs: dict[str, int] = {}

    def __len__(self):
        return len(self._ops)

    def _push(self, kind, inputs=(), **attrs) -> Node:
        ids = []
        for x in inputs:
            if not isinstance(x, Node):
                x = self.const(x)
            if x.tape is not self:
                raise TapeError("node belongs to a different tape")
            ids.append(x.id)
        self._ops.append(_Op(kind, tuple(ids), attrs))
        self._values = None
        return Node(self, len(self._ops) - 1)

    # leaves
    def param(self, name: str) -> Node:
        if name in self._params or name in self._inputs:
            raise TapeError(f"duplicate leaf name {name!r}")
        node = self._push("param", name=name)
        self._params[name] = node.id
        return node

    def input(self, name: str) -> Node:
        if name in self._params or name in self._inputs:
            raise TapeError(f"duplicate leaf name {name!r}")
        node = self._push("input", name=name)
        self._inputs[name] = node.id
        return node

    def const(self, value) -> Node:
        return self._push("const", value=np.asarray(value, dtype=np.float64))

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    @property
    def input_names(self) -> list[str]:
        return list(self._inputs)

    # ops
    def matmul(self, a, b):
        return self._push("matmul", (a, b))

    def transpose(self, a):
        return self._push("transpose", (a,))

    def add(self, a, b):
        return self._push("add", (a, b))

    def sub(self, a, b):
        return self._push("sub", (a, b))

    def hadamard(self, a, b):
        return self._push("hadamard", (a, b))

    def scale(self, a, c: float):
        return self._push("scale", (a,), c=float(c))

    def exp(self, a):
        return self._push("exp", (a,))

    def softmax_t(self, logits, noise, tau, kappa):
        """``softmax((kappa * logits + noise) / tau)`` over the last axis."""
        return self._push("softmax_t", (logits, noise, tau, kappa))

    def binary_gumbel(self, logit, g0, g1, tau, kappa):
        """Probability of the positive element of the pair with logits ``(-l, +l)``."""
        return self._push("binary_gumbel", (logit, g0, g1, tau, kappa))

    def weighted_sum(self, p, values):
        """``sum_k p[..., k] * values[..., k]``; ``values`` gets no gradient."""
        return self._push("weighted_sum", (p, values))

    def group_scale(self, scales, q, group_size: int):
        """Multiply each row-wise group of ``group_size`` entries of ``q`` by its scale."""
        return self._push("group_scale", (scales, q), group_size=int(group_size))

    def silu(self, a):
        return self._push("silu", (a,))

    def frobenius_sq(self, a):
        return self._push("frobenius_sq", (a,))

    # evaluation
    def forward(self, bindings: dict[str, Any], output: Node | None = None) -> float | np.ndarray:
        """Evaluate every node; return the value of ``output`` (default: last node)."""
        if not self._ops:
            raise TapeError("empty tape")
        values: list[np.ndarray] = []
        for i, op in enumerate(self._ops):
            if op.kind in ("param", "input"):
                name = op.attrs["name"]
                if name not in bindings:
                    raise TapeError(f"unbound {op.kind} {name!r}")
                val = np.asarray(bindings[name], dtype=np.float64)
            elif op.kind == "const":
                val = op.attrs["value"]
            else:
                fwd = _OPS[op.kind][0]
                with np.errstate(over="ignore", invalid="ignore"):
                    val = fwd([values[j] for j in op.inputs], op.attrs)
            if not np.all(np.isfinite(val)):
                label = op.attrs.get("name", op.kind)
                raise TapeError(f"non-finite value at node {i} ({label})")
            values.append(val)
        self._values = values
        out = values[-1 if output is None else output.id]
        return float(out) if out.ndim == 0 else out

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise TapeError("forward has not been run")
        return self._values[node.id]

    def backward(self, loss: Node) -> GradientMap:
        """Gradients of scalar ``loss`` with respect to every parameter leaf."""
        if self._values is None:
            raise TapeError("backward called before forward")
        values = self._values
        if values[loss.id].ndim != 0:
            raise TapeError("backward requires a scalar loss node")
        needs = self._requires_grad()
        grads: list[np.ndarray | None] = [None] * len(self._ops)
        grads[loss.id] = np.asarray(1.0)
        for i in range(loss.id, -1, -1):
            g = grads[i]
            op = self._ops[i]
            if g is None or op.kind in _LEAVES:
                continue
            bwd = _OPS[op.kind][1]
            in_grads = bwd(g, [values[j] for j in op.inputs], values[i], op.attrs)
            for j, gj in zip(op.inputs, in_grads):
                if gj is None or not needs[j]:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = GradientMap()
        for name, idx in self._params.items():
            g = grads[idx]
            out[name] = np.zeros_like(values[idx]) if g is None else np.asarray(g, dtype=np.float64)
        return out

    def _requires_grad(self) -> list[bool]:
        needs = []
        for op in self._ops:
            needs.append(op.kind == "param" or any(needs[j] for j in op.inputs))
        return needs
