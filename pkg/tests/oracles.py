"""Independent float64 reference formulas used by the tests.

These are written from the math directly and share no code with ``gsq``.
"""

import itertools
import math

import numpy as np


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_probs(logits, noise, tau, kappa):
    return softmax_rows((kappa * np.asarray(logits, np.float64) + noise) / tau)


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def expand_scales(scales, cols, group_size):
    return np.repeat(np.asarray(scales, np.float64), group_size, axis=1)[:, :cols]


def soft_ternary(lm, lb, s, gm0, gm1, gb0, gb1, tau, kappa, group_size):
    pm = 1.0 / (1.0 + np.exp(-(2 * kappa * lm + gm1 - gm0) / tau))
    pb = 1.0 / (1.0 + np.exp(-(2 * kappa * lb + gb1 - gb0) / tau))
    return expand_scales(s, lm.shape[1], group_size) * pm * (2 * pb - 1)


def soft_categorical(logits, noise, candidates, s, tau, kappa, group_size):
    p = gumbel_probs(logits, noise, tau, kappa)
    q = np.sum(p * candidates, axis=-1)
    return expand_scales(s, logits.shape[1], group_size) * q


def nearest_level(x, levels):
    """Nearest grid level; ties toward the lower level."""
    levels = list(levels)
    best = levels[0]
    for v in levels[1:]:
        if abs(x - v) < abs(x - best):
            best = v
    return best


def brute_force_row(w, x, levels, s):
    """Exhaustive best assignment of one row under ``||x (w - s q)||^2``."""
    best, best_q = math.inf, None
    for q in itertools.product(levels, repeat=len(w)):
        d = x @ (np.asarray(w, np.float64) - s * np.asarray(q, np.float64))
        err = float(d @ d)
        if err < best:
            best, best_q = err, q
    return best, best_q


def trit_byte(offsets):
    return sum(d * 3**k for k, d in enumerate(offsets))
