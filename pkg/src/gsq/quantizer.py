"""Ternary, full-grid and local-shift relaxations of a group-wise symmetric quantizer.

Each parameter set builds a differentiable soft weight on a :class:`~gsq.autodiff.Tape`
and finalizes to hard grid indices. Grid indices are 0-based throughout; for
the default integer grids the stored index equals ``code + 2**(b-1)`` (and
``code + 1`` for ternary), which is also the unsigned value the packer writes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from gsq import gumbel
from gsq.autodiff import Node, Tape

LOG2_3 = math.log2(3)


@dataclass(frozen=True)
class Grid:
    levels: tuple[int, ...]
    ternary: bool = False

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("grid needs at least two levels")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("grid levels must be strictly increasing")

    @classmethod
    def for_bits(cls, bits: int) -> Grid:
        if not 1 <= bits <= 8:
            raise ValueError(f"unsupported bit-width {bits}")
        half = 1 << (bits - 1)
        return cls(tuple(range(-half, half)))

    @classmethod
    def make_ternary(cls) -> Grid:
        return cls((-1, 0, 1), ternary=True)

    @classmethod
    def from_mode(cls, mode: int) -> Grid:
        """``0`` is ternary, anything else is the default ``mode``-bit grid."""
        return cls.make_ternary() if mode == 0 else cls.for_bits(mode)

    @property
    def size(self) -> int:
        return len(self.levels)

    @property
    def mode(self) -> int:
        if self.ternary:
            return 0
        bits = self.size.bit_length() - 1
        if 1 << bits != self.size or self != Grid.for_bits(bits):
            raise ValueError("custom grids have no packing mode")
        return bits

    @property
    def code_bits(self) -> float:
        return LOG2_3 if self.ternary else math.log2(self.size)

    @property
    def max_abs(self) -> int:
        return max(abs(v) for v in self.levels)

    @property
    def zero_index(self) -> int:
        return self.levels.index(0) if 0 in self.levels else int(np.argmin(np.abs(self.levels)))

    def values(self, indices) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float64)[np.asarray(indices)]

    def nearest(self, x) -> np.ndarray:
        """Index of the nearest level; exact ties go to the lower index."""
        x = np.asarray(x, dtype=np.float64)
        lv = np.asarray(self.levels, dtype=np.float64)
        return np.argmin(np.abs(x[..., None] - lv), axis=-1)


def num_groups(cols: int, group_size: int) -> int:
    return -(-cols // group_size)


@dataclass
class GroupScales:
    """One scale per (row, group); groups are consecutive runs of ``group_size`` columns."""

    values: np.ndarray
    group_size: int = 128

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("scales must be (rows, groups)")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")

    def expand(self, cols: int) -> np.ndarray:
        if num_groups(cols, self.group_size) != self.values.shape[1]:
            raise ValueError(f"{self.values.shape[1]} groups cannot cover {cols} columns")
        return np.repeat(self.values, self.group_size, axis=1)[:, :cols]

    def copy(self) -> GroupScales:
        return GroupScales(self.values.copy(), self.group_size)


@dataclass
class QuantizedWeights:
    """Hard assignment: grid indices plus group scales."""

    indices: np.ndarray
    scales: GroupScales
    grid: Grid

    @property
    def codes(self) -> np.ndarray:
        return np.asarray(self.grid.levels, dtype=np.int64)[self.indices]

    @property
    def weights(self) -> np.ndarray:
        q = self.grid.values(self.indices)
        return (self.scales.expand(self.indices.shape[1]).astype(np.float64) * q).astype(np.float32)


def _check_noise(noise: dict, shapes: dict) -> None:
    for name, shape in shapes.items():
        if name not in noise:
            raise ValueError(f"missing noise {name!r}")
        if np.shape(noise[name]) != tuple(shape):
            raise ValueError(f"noise {name!r} has shape {np.shape(noise[name])}, expected {shape}")


class _Relaxation:
    """Shared plumbing: named logit arrays plus group scales."""

    scales: GroupScales
    grid: Grid

    def logit_arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def noise_shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def _soft(self, tape: Tape, leaf, tau: Node, kappa: Node) -> Node:
        raise NotImplementedError

    @property
    def shape(self) -> tuple[int, int]:
        raise NotImplementedError

    @property
    def n_logits(self) -> int:
        return sum(a.size for a in self.logit_arrays().values())

    def trainables(self) -> dict[str, np.ndarray]:
        out = {f"logits.{k}": v for k, v in self.logit_arrays().items()}
        out["scales"] = self.scales.values
        return out

    def set_trainable(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float32)
        if name == "scales":
            self.scales.values = value
        else:
            setattr(self, self._logit_attr[name.split(".", 1)[1]], value)

    def sample_noise(self, rng) -> dict[str, np.ndarray]:
        return {k: rng.gumbel(s) for k, s in self.noise_shapes().items()}

    def zero_noise(self) -> dict[str, np.ndarray]:
        return {k: np.zeros(s, dtype=np.float32) for k, s in self.noise_shapes().items()}

    def build(self, tape: Tape, tau: Node, kappa: Node, prefix: str = "") -> Node:
        """Register parameters and noise inputs under ``prefix``; return the soft weight node."""

        def leaf(kind, name):
            return tape.param(prefix + name) if kind == "param" else tape.input(prefix + name)

        return self._soft(tape, leaf, tau, kappa)

    def bindings(self, noise: dict, prefix: str = "") -> dict[str, np.ndarray]:
        _check_noise(noise, self.noise_shapes())
        out = {prefix + k: v for k, v in self.trainables().items()}
        out.update({prefix + "noise." + k: v for k, v in noise.items()})
        return out

    def soft_weights(self, noise: dict, tau: float, kappa: float) -> np.ndarray:
        gumbel._check_temps(tau, kappa)
        tape = Tape()
        w = self.build(tape, tape.input("tau"), tape.input("kappa"))
        binds = self.bindings(noise)
        binds.update(tau=tau, kappa=kappa)
        return tape.forward(binds, output=w)

    def finalize(self) -> QuantizedWeights:
        raise NotImplementedError


class TernaryParams(_Relaxation):
    """Mask and sign logits per coordinate; soft weight ``s * m * b``."""

    _logit_attr = {"mask": "mask_logits", "sign": "sign_logits"}

    def __init__(self, mask_logits, sign_logits, scales: GroupScales):
        self.mask_logits = np.asarray(mask_logits, dtype=np.float32)
        self.sign_logits = np.asarray(sign_logits, dtype=np.float32)
        if self.mask_logits.shape != self.sign_logits.shape or self.mask_logits.ndim != 2:
            raise ValueError("mask and sign logits must be matching 2-D arrays")
        self.scales = scales
        self.grid = Grid.make_ternary()
        scales.expand(self.mask_logits.shape[1])

    @property
    def shape(self):
        return self.mask_logits.shape

    def logit_arrays(self):
        return {"mask": self.mask_logits, "sign": self.sign_logits}

    def noise_shapes(self):
        s = self.shape
        return {"mask_g0": s, "mask_g1": s, "sign_g0": s, "sign_g1": s}

    def _soft(self, tape, leaf, tau, kappa):
        s = leaf("param", "scales")
        lm = leaf("param", "logits.mask")
        lb = leaf("param", "logits.sign")
        n = {k: leaf("input", "noise." + k) for k in self.noise_shapes()}
        # soft mask over {0, 1} is p itself; soft sign over {-1, +1} is 2p - 1
        m = tape.binary_gumbel(lm, n["mask_g0"], n["mask_g1"], tau, kappa)
        pb = tape.binary_gumbel(lb, n["sign_g0"], n["sign_g1"], tau, kappa)
        b = tape.add(tape.scale(pb, 2.0), -1.0)
        return tape.group_scale(s, tape.hadamard(m, b), self.scales.group_size)

    def finalize(self):
        m = np.where(self.mask_logits < 0, 0, 1)
        b = np.where(self.sign_logits < 0, -1, 1)
        return QuantizedWeights((m * b + 1).astype(np.int64), self.scales.copy(), self.grid)


class FullGridParams(_Relaxation):
    """One logit per grid level per coordinate (used for b = 2)."""

    _logit_attr = {"grid": "logits"}

    def __init__(self, logits, scales: GroupScales, grid: Grid):
        self.logits = np.asarray(logits, dtype=np.float32)
        if self.logits.ndim != 3 or self.logits.shape[2] != grid.size:
            raise ValueError(f"logits must be (rows, cols, {grid.size})")
        self.scales = scales
        self.grid = grid
        scales.expand(self.logits.shape[1])

    @property
    def shape(self):
        return self.logits.shape[:2]

    def logit_arrays(self):
        return {"grid": self.logits}

    def noise_shapes(self):
        return {"g": self.logits.shape}

    def _soft(self, tape, leaf, tau, kappa):
        s = leaf("param", "scales")
        lg = leaf("param", "logits.grid")
        p = tape.softmax_t(lg, leaf("input", "noise.g"), tau, kappa)
        q = tape.weighted_sum(p, np.asarray(self.grid.levels, dtype=np.float64))
        return tape.group_scale(s, q, self.scales.group_size)

    def finalize(self):
        return QuantizedWeights(gumbel.hard_argmax(self.logits).astype(np.int64), self.scales.copy(), self.grid)


class ShiftParams(_Relaxation):
    """Logits over a shift window ``-h..h`` around a base grid index per coordinate."""

    _logit_attr = {"shift": "logits"}

    def __init__(self, base_index, logits, scales: GroupScales, grid: Grid, halfwidth: int = 2):
        self.base_index = np.asarray(base_index, dtype=np.int64)
        self.logits = np.asarray(logits, dtype=np.float32)
        self.halfwidth = int(halfwidth)
        if self.logits.shape != (*self.base_index.shape, 2 * self.halfwidth + 1):
            raise ValueError("shift logits must be (rows, cols, 2*halfwidth + 1)")
        if self.base_index.min(initial=0) < 0 or self.base_index.max(initial=0) >= grid.size:
            raise ValueError(f"base grid index out of range [0, {grid.size})")
        self.scales = scales
        self.grid = grid
        scales.expand(self.base_index.shape[1])

    @property
    def shape(self):
        return self.base_index.shape

    @property
    def shifts(self) -> np.ndarray:
        return np.arange(-self.halfwidth, self.halfwidth + 1)

    def candidate_indices(self) -> np.ndarray:
        return np.clip(self.base_index[..., None] + self.shifts, 0, self.grid.size - 1)

    def candidate_values(self) -> np.ndarray:
        return self.grid.values(self.candidate_indices())

    def logit_arrays(self):
        return {"shift": self.logits}

    def noise_shapes(self):
        return {"g": self.logits.shape}

    def _soft(self, tape, leaf, tau, kappa):
        s = leaf("param", "scales")
        ls = leaf("param", "logits.shift")
        p = tape.softmax_t(ls, leaf("input", "noise.g"), tau, kappa)
        # clipping is folded into constant candidate values, outside the differentiated path
        q = tape.weighted_sum(p, self.candidate_values())
        return tape.group_scale(s, q, self.scales.group_size)

    def finalize(self):
        k = gumbel.hard_argmax(self.logits)
        idx = np.take_along_axis(self.candidate_indices(), k[..., None], axis=-1)[..., 0]
        return QuantizedWeights(idx.astype(np.int64), self.scales.copy(), self.grid)


def soft_forward_ternary(p: TernaryParams, noise, tau, kappa):
    return p.soft_weights(noise, tau, kappa)


def soft_forward_fullgrid(p: FullGridParams, noise, tau, kappa):
    return p.soft_weights(noise, tau, kappa)


def soft_forward_shift(p: ShiftParams, noise, tau, kappa):
    return p.soft_weights(noise, tau, kappa)


def finalize(params: _Relaxation) -> QuantizedWeights:
    return params.finalize()


def bits_per_param(code_bits: float, scale_bits: int = 16, group_size: int = 128) -> float:
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    return code_bits + scale_bits / group_size


def format_bpp(bpp: float) -> str:
    """Two decimals, halves rounded up (2.125 -> "2.13")."""
    return str(Decimal(repr(bpp)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))
