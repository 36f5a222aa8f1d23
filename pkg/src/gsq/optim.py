"""Lion with decoupled weight decay, micro-batch gradient averaging, logit-gradient clamping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from gsq.autodiff import GradientMap

LOGITS = "logits"
SCALES = "scales"


def param_class(name: str) -> str:
    """Parameters named ``...scales`` are group scales; everything else is a logit tensor."""
    return SCALES if name.endswith("scales") else LOGITS


@dataclass
class LionHyper:
    lr: float
    weight_decay: float = 0.0


@dataclass
class LionState:
    """Hyperparameters per parameter class plus per-parameter momentum."""

    hyper: dict[str, LionHyper]
    betas: tuple[float, float] = (0.9, 0.95)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def default(cls, lr_logits=1e-4, lr_scales=5e-5, weight_decay=1.0, betas=(0.9, 0.95)) -> LionState:
        return cls(
            {LOGITS: LionHyper(lr_logits, weight_decay), SCALES: LionHyper(lr_scales, weight_decay)},
            tuple(betas),
        )


def lion_step(state: LionState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict:
    """One Lion update; returns new float32 parameter arrays and updates ``state.momentum``.

    ``u = sign(b1*m + (1-b1)*g)``, ``p <- p - lr*(u + wd*p)``, ``m <- b2*m + (1-b2)*g``.
    Parameters without a gradient entry are returned unchanged.
    """
    b1, b2 = state.betas
    out = {}
    for name, p in params.items():
        if name not in grads:
            out[name] = p
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        h = state.hyper[param_class(name)]
        m = state.momentum.get(name)
        if m is None:
            m = np.zeros(g.shape, dtype=np.float64)
        p64 = np.asarray(p, dtype=np.float64)
        u = np.sign(b1 * m + (1.0 - b1) * g)
        with np.errstate(over="ignore", invalid="ignore"):
            new = (p64 - h.lr * (u + h.weight_decay * p64)).astype(np.float32)
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"update overflowed parameter {name!r}")
        out[name] = new
        state.momentum[name] = b2 * m + (1.0 - b2) * g
    return out


def accumulate(maps: Sequence[Mapping[str, np.ndarray]]) -> GradientMap:
    """Arithmetic mean of gradient maps, summed in the given order."""
    if not maps:
        raise ValueError("nothing to accumulate")
    names = set(maps[0])
    for m in maps[1:]:
        if set(m) != names:
            raise ValueError(f"gradient maps disagree on parameters: {sorted(names ^ set(m))}")
    out = GradientMap()
    for name in sorted(names):
        total = np.zeros(np.shape(maps[0][name]), dtype=np.float64)
        for m in maps:
            if np.shape(m[name]) != total.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            total += m[name]
        out[name] = total / len(maps)
    return out


@dataclass(frozen=True)
class ClipPolicy:
    applies_to: str = "none"  # "logits" | "all" | "none"
    threshold: float = float("inf")

    def __post_init__(self):
        if self.applies_to not in ("logits", "all", "none"):
            raise ValueError(f"unknown clip target {self.applies_to!r}")


def clip_logit_grads(grads: Mapping[str, np.ndarray], policy: ClipPolicy) -> GradientMap:
    """Elementwise clamp to ``[-threshold, threshold]`` for the classes the policy covers."""
    out = GradientMap()
    for name, g in grads.items():
        hit = policy.applies_to == "all" or (policy.applies_to == "logits" and param_class(name) == LOGITS)
        out[name] = np.clip(g, -policy.threshold, policy.threshold) if hit else g
    return out
