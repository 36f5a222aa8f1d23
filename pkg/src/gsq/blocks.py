"""Small module compositions whose output reconstruction the trainer optimizes.

Every model is written once against an ``ops`` backend, so the same code
evaluates plain numpy arrays or records onto a :class:`~gsq.autodiff.Tape`.
Weights are ``(out_features, in_features)``; activations are ``(samples, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gsq.autodiff import Tape


def _silu(x):
    return x / (1.0 + np.exp(-x))


class NumpyOps:
    def linear(self, x, w):
        return np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T

    def mul(self, a, b):
        return a * b

    def act(self, name, x):
        return _silu(x) if name == "silu" else x


class TapeOps:
    def __init__(self, tape: Tape):
        self.tape = tape

    def linear(self, x, w):
        return self.tape.matmul(x, self.tape.transpose(w))

    def mul(self, a, b):
        return self.tape.hadamard(a, b)

    def act(self, name, x):
        return self.tape.silu(x) if name == "silu" else x


NUMPY = NumpyOps()


@dataclass(frozen=True)
class Linear:
    name: str = "w"

    @property
    def layer_names(self) -> tuple[str, ...]:
        return (self.name,)

    def apply(self, ops, x, w):
        return ops.linear(x, w[self.name])

    def layer_inputs(self, x, w) -> dict:
        return {self.name: np.asarray(x, dtype=np.float64)}


@dataclass(frozen=True)
class MLPBlock:
    """Gated MLP: ``down(act(gate(x)) * up(x))``."""

    activation: str = "silu"

    @property
    def layer_names(self):
        return ("gate", "up", "down")

    def apply(self, ops, x, w):
        h = ops.mul(ops.act(self.activation, ops.linear(x, w["gate"])), ops.linear(x, w["up"]))
        return ops.linear(h, w["down"])

    def layer_inputs(self, x, w):
        x = np.asarray(x, dtype=np.float64)
        h = NUMPY.act(self.activation, NUMPY.linear(x, w["gate"]))
        return {"gate": x, "up": x, "down": h * NUMPY.linear(x, w["up"])}


@dataclass(frozen=True)
class Chain:
    """Linear layers in sequence with an activation between consecutive layers."""

    names: tuple[str, ...] = ("fc1", "fc2")
    activation: str = "silu"

    @property
    def layer_names(self):
        return tuple(self.names)

    def apply(self, ops, x, w):
        for i, name in enumerate(self.names):
            if i:
                x = ops.act(self.activation, x)
            x = ops.linear(x, w[name])
        return x

    def layer_inputs(self, x, w):
        out = {}
        x = np.asarray(x, dtype=np.float64)
        for i, name in enumerate(self.names):
            if i:
                x = NUMPY.act(self.activation, x)
            out[name] = x
            x = NUMPY.linear(x, w[name])
        return out


def forward(model, x, weights) -> np.ndarray:
    return model.apply(NUMPY, x, weights)


def reconstruction_mse(model, x, weights, reference) -> float:
    """Mean squared output error against ``reference`` outputs."""
    y = forward(model, x, weights)
    d = y - np.asarray(reference, dtype=np.float64)
    return float(np.mean(d * d))
