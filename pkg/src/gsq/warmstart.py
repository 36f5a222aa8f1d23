"""Round-to-nearest and GPTQ baselines, and logit initialization from a baseline.

Scales are symmetric max-abs fits per row-wise group: ``s = max|w| / max|level|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from gsq.quantizer import (
    FullGridParams,
    Grid,
    GroupScales,
    QuantizedWeights,
    ShiftParams,
    TernaryParams,
    num_groups,
)
from gsq.tensor import RngStream, as_matrix

ZERO_GROUP_SCALE = 1e-8

# a baseline is just a hard assignment
BaselineSolution = QuantizedWeights


class GPTQError(RuntimeError):
    pass


@dataclass
class CalibSet:
    """Calibration activations ``X`` (samples x in-features) and the Hessian proxy ``X^T X``."""

    activations: np.ndarray | None = None
    hessian: np.ndarray | None = None
    damp: float = 0.01

    def __post_init__(self):
        if self.activations is None and self.hessian is None:
            raise ValueError("need activations or an explicit hessian")
        if self.activations is not None:
            self.activations = as_matrix(self.activations, "calibration activations")
            if self.activations.shape[0] == 0:
                raise ValueError("empty calibration set")

    @property
    def H(self) -> np.ndarray:
        if self.hessian is not None:
            return np.asarray(self.hessian, dtype=np.float64)
        x = self.activations.astype(np.float64)
        return x.T @ x

    @property
    def in_features(self) -> int:
        return self.H.shape[0]


def _group_scale(block: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-row max-abs scale for one column block; all-zero rows get a tiny scale."""
    s = np.abs(block).max(axis=1) / grid.max_abs
    return np.where(s > 0, s, ZERO_GROUP_SCALE).astype(np.float32)


def _round(col: np.ndarray, s: np.ndarray, grid: Grid) -> np.ndarray:
    return grid.nearest(col / s.astype(np.float64))


def rtn(w, grid: Grid, group_size: int = 128) -> BaselineSolution:
    w = as_matrix(w, "weights").astype(np.float64)
    rows, cols = w.shape
    ng = num_groups(cols, group_size)
    scales = np.empty((rows, ng), dtype=np.float32)
    idx = np.empty((rows, cols), dtype=np.int64)
    for g in range(ng):
        sl = slice(g * group_size, min(cols, (g + 1) * group_size))
        s = _group_scale(w[:, sl], grid)
        scales[:, g] = s
        idx[:, sl] = grid.nearest(w[:, sl] / s.astype(np.float64)[:, None])
    return BaselineSolution(idx, GroupScales(scales, group_size), grid)


def gptq(w, calib: CalibSet, grid: Grid, group_size: int = 128) -> BaselineSolution:
    """Greedy column-by-column rounding with inverse-Hessian error feedback.

    Columns are processed in natural order. Each group's scale is fitted to
    the error-compensated weights when the group is reached.
    """
    W = as_matrix(w, "weights").astype(np.float64).copy()
    rows, cols = W.shape
    H = calib.H.copy()
    if H.shape != (cols, cols):
        raise ValueError(f"hessian is {H.shape}, layer has {cols} input features")
    dead = np.diag(H) == 0
    H[dead, dead] = 1.0
    lam = calib.damp * float(np.mean(np.diag(H)))
    H[np.diag_indices(cols)] += lam
    try:
        L = np.linalg.cholesky(H)
        Hinv = scipy.linalg.cho_solve((L, True), np.eye(cols))
        U = np.linalg.cholesky(Hinv).T
    except np.linalg.LinAlgError:
        raise GPTQError(
            f"Cholesky factorization failed with damping {calib.damp}; increase the damping"
        ) from None

    ng = num_groups(cols, group_size)
    scales = np.empty((rows, ng), dtype=np.float32)
    idx = np.empty((rows, cols), dtype=np.int64)
    levels = np.asarray(grid.levels, dtype=np.float64)
    for i in range(cols):
        if i % group_size == 0:
            g = i // group_size
            s = _group_scale(W[:, i : i + group_size], grid)
            scales[:, g] = s
            s64 = s.astype(np.float64)
        q = _round(W[:, i], s64, grid)
        idx[:, i] = q
        err = (W[:, i] - s64 * levels[q]) / U[i, i]
        W[:, i + 1 :] -= np.outer(err, U[i, i + 1 :])
    return BaselineSolution(idx, GroupScales(scales, group_size), grid)


def _noise(rng: RngStream | None, shape) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=np.float64)
    return rng.gaussian(shape).astype(np.float64)


def init_ternary_logits(
    base: BaselineSolution, alpha: float = 3.0, sigma_init: float = 0.01, rng: RngStream | None = None
) -> TernaryParams:
    """Mask/sign logits ``sigma_init * (eps + alpha * l_base)``; ``rng=None`` means ``eps = 0``."""
    if not base.grid.ternary:
        raise ValueError("ternary initialization needs a ternary baseline")
    codes = base.codes
    mask = np.where(codes != 0, 1.0, -1.0)
    sign = codes.astype(np.float64)
    lm = sigma_init * (_noise(rng, codes.shape) + alpha * mask)
    lb = sigma_init * (_noise(rng, codes.shape) + alpha * sign)
    return TernaryParams(lm, lb, base.scales.copy())


def gaussian_prior_logits(candidates, mu) -> np.ndarray:
    """``-(c_k - mu)^2 / 2`` per coordinate, centered to zero mean over candidates."""
    c = np.asarray(candidates, dtype=np.float64)
    raw = -((c - np.asarray(mu, dtype=np.float64)[..., None]) ** 2) / 2.0
    return raw - raw.mean(axis=-1, keepdims=True)


def init_grid_logits(
    base: BaselineSolution,
    alpha: float = 6.0,
    sigma_init: float = 0.01,
    rng: RngStream | None = None,
    halfwidth: int = 2,
    parameterization: str = "auto",
) -> FullGridParams | ShiftParams:
    """Warm-start logits concentrated on the baseline assignment.

    ``auto`` uses one logit per level for grids of at most four levels and
    the local-shift window otherwise.
    """
    grid = base.grid
    if grid.ternary:
        raise ValueError("use init_ternary_logits for ternary baselines")
    if parameterization == "auto":
        parameterization = "full" if grid.size <= 4 else "shift"
    if parameterization == "full":
        prior = gaussian_prior_logits(grid.levels, grid.values(base.indices))
        logits = sigma_init * (_noise(rng, prior.shape) + alpha * prior)
        return FullGridParams(logits, base.scales.copy(), grid)
    if parameterization == "shift":
        shifts = np.arange(-halfwidth, halfwidth + 1)
        prior = gaussian_prior_logits(shifts, np.zeros(base.indices.shape))
        logits = sigma_init * (_noise(rng, prior.shape) + alpha * prior)
        return ShiftParams(base.indices, logits, base.scales.copy(), grid, halfwidth)
    raise ValueError(f"unknown parameterization {parameterization!r}")
