"""Gumbel-Softmax soft sampling, its binary sigmoid form, and linear schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_temps(tau: float, kappa: float) -> None:
    if not tau > 0 or not kappa > 0:
        raise ValueError(f"temperature and noise scale must be positive (tau={tau}, kappa={kappa})")


def gumbel_probs(logits, noise, tau: float, kappa: float) -> np.ndarray:
    """Softmax of ``(kappa * logits + noise) / tau`` over the last axis."""
    _check_temps(tau, kappa)
    logits = np.asarray(logits, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if logits.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} does not match logits shape {logits.shape}")
    if logits.shape[-1] < 2:
        raise ValueError("need at least two candidates")
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(noise))):
        raise ValueError("non-finite logits or noise")
    z = (kappa * logits + noise) / tau
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_softmax(candidates, logits, noise, tau: float, kappa: float):
    """Soft sample ``sum_i p_i d_i`` of the candidate set; returns ``(sample, probs)``.

    ``candidates`` broadcasts against ``logits`` along the last axis, so one
    call can relax many coordinates at once.
    """
    p = gumbel_probs(logits, noise, tau, kappa)
    d = np.asarray(candidates, dtype=np.float64)
    return np.sum(p * d, axis=-1), p


def binary_gumbel(logit, g0, g1, tau: float, kappa: float):
    """Probability of the positive element of a pair with logits ``(-logit, +logit)``.

    Equals the two-candidate softmax, i.e. ``sigmoid((2*kappa*logit + g1 - g0) / tau)``.
    """
    _check_temps(tau, kappa)
    with np.errstate(over="ignore"):
        z = (2.0 * kappa * np.asarray(logit, dtype=np.float64) + np.asarray(g1) - np.asarray(g0)) / tau
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class LinearSchedule:
    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def value(self, t: int) -> float:
        if t < 0 or t > self.total_steps:
            raise ValueError(f"step {t} outside [0, {self.total_steps}]")
        if self.total_steps == 0:
            return float(self.start)
        f = t / self.total_steps
        # convex form hits both endpoints exactly in floating point
        return float((1.0 - f) * self.start + f * self.end)


def schedule_value(schedule: LinearSchedule, t: int) -> float:
    return schedule.value(t)


def hard_argmax(logits) -> np.ndarray:
    """Noise-free selection over the last axis; ties resolve to the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)
