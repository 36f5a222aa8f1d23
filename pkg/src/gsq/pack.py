"""GSQP container: bit-packed grid codes plus float16 group scales.

Layout (little-endian)::

    magic "GSQP" | version u16 | mode u8 (0 = ternary, else bits) | rows u64 | cols u64
    | group_size u32 | scale dtype u8 (1 = float16)
    | scales f16[rows * groups]  (row-major)
    | codes payload              (each row padded to a whole byte)
    | crc32 u32 of everything above

Ternary rows hold 5 trits per byte (``sum d_k * 3**k`` with ``d = code + 1``).
b-bit rows are an LSB-first bit-stream of ``code + 2**(b-1)``. Padding is zero.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from gsq.fileio import atomic_write_bytes
from gsq.quantizer import LOG2_3, Grid, GroupScales, QuantizedWeights, num_groups

MAGIC = b"GSQP"
VERSION = 1
SCALE_F16 = 1
_HEADER = struct.Struct("<4sHBQQIB")
_CRC = struct.Struct("<I")
_TRIT_WEIGHTS = np.array([1, 3, 9, 27, 81], dtype=np.int64)
MAX_TRIT_BYTE = 242


class PackError(ValueError):
    pass


def row_bytes(mode: int, cols: int) -> int:
    if mode == 0:
        return -(-cols // 5)
    return -(-cols * mode // 8)


def _encode_rows(idx: np.ndarray, mode: int) -> bytes:
    rows, cols = idx.shape
    if rows == 0 or cols == 0:
        return b""
    if mode == 0:
        nb = row_bytes(0, cols)
        padded = np.zeros((rows, nb * 5), dtype=np.int64)
        padded[:, :cols] = idx
        return (padded.reshape(rows, nb, 5) @ _TRIT_WEIGHTS).astype(np.uint8).tobytes()
    bits = ((idx[:, :, None] >> np.arange(mode)) & 1).astype(np.uint8).reshape(rows, cols * mode)
    return np.packbits(bits, axis=1, bitorder="little").tobytes()


def _decode_rows(buf: bytes, mode: int, rows: int, cols: int) -> np.ndarray:
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols), dtype=np.int64)
    nb = row_bytes(mode, cols)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(rows, nb)
    if mode == 0:
        if raw.max() > MAX_TRIT_BYTE:
            raise PackError("ternary byte out of range")
        digits = (raw.astype(np.int64)[:, :, None] // _TRIT_WEIGHTS) % 3
        digits = digits.reshape(rows, nb * 5)
        if np.any(digits[:, cols:]):
            raise PackError("non-zero ternary padding")
        return digits[:, :cols]
    bits = np.unpackbits(raw, axis=1, bitorder="little")
    if np.any(bits[:, cols * mode :]):
        raise PackError("non-zero bit padding")
    bits = bits[:, : cols * mode].reshape(rows, cols, mode).astype(np.int64)
    return bits @ (1 << np.arange(mode))


@dataclass
class PackedTensor:
    mode: int
    rows: int
    cols: int
    group_size: int
    scales: np.ndarray  # float16, (rows, groups)
    payload: bytes

    @property
    def grid(self) -> Grid:
        return Grid.from_mode(self.mode)

    @property
    def ngroups(self) -> int:
        return num_groups(self.cols, self.group_size) if self.cols else 0

    def indices(self) -> np.ndarray:
        return _decode_rows(self.payload, self.mode, self.rows, self.cols)

    def codes(self) -> np.ndarray:
        return np.asarray(self.grid.levels, dtype=np.int64)[self.indices()]

    def quantized(self) -> QuantizedWeights:
        return QuantizedWeights(self.indices(), GroupScales(self.scales.astype(np.float32), self.group_size), self.grid)

    def dequantize(self) -> np.ndarray:
        if self.rows == 0 or self.cols == 0:
            return np.zeros((self.rows, self.cols), dtype=np.float32)
        return self.quantized().weights

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.mode, self.rows, self.cols, self.group_size, SCALE_F16)
        body = head + self.scales.astype("<f2").tobytes() + self.payload
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def from_bytes(cls, buf: bytes) -> PackedTensor:
        if len(buf) < _HEADER.size + _CRC.size:
            raise PackError("truncated GSQP header")
        magic, version, mode, rows, cols, gs, sdtype = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise PackError("bad magic")
        if version != VERSION:
            raise PackError(f"unsupported version {version}")
        if mode > 8:
            raise PackError(f"bad bit mode {mode}")
        if sdtype != SCALE_F16:
            raise PackError(f"unsupported scale dtype {sdtype}")
        if gs < 1:
            raise PackError("group size must be >= 1")
        ng = num_groups(cols, gs) if cols else 0
        n_scale = rows * ng * 2
        n_payload = rows * row_bytes(mode, cols)
        expected = _HEADER.size + n_scale + n_payload + _CRC.size
        if len(buf) != expected:
            raise PackError(f"GSQP length {len(buf)} != expected {expected}")
        (crc,) = _CRC.unpack_from(buf, len(buf) - _CRC.size)
        if crc != zlib.crc32(buf[: len(buf) - _CRC.size]):
            raise PackError("checksum mismatch")
        off = _HEADER.size
        scales = np.frombuffer(buf, dtype="<f2", count=rows * ng, offset=off).reshape(rows, ng)
        if not np.all(np.isfinite(scales)):
            raise PackError("non-finite scale")
        payload = bytes(buf[off + n_scale : off + n_scale + n_payload])
        pt = cls(mode, rows, cols, gs, scales.astype(np.float16), payload)
        pt.indices()  # validates trit range and padding
        return pt

    def report_bpp(self) -> tuple[float, float]:
        return report_bpp(self)


def pack(codes, scales, mode: int) -> PackedTensor:
    """Pack signed codes (``{-1,0,1}`` for ternary, ``[-2**(b-1), 2**(b-1))`` otherwise)."""
    if isinstance(scales, GroupScales):
        group_size, svals = scales.group_size, scales.values
    else:
        raise TypeError("scales must be GroupScales")
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise PackError("codes must be 2-D")
    if not 0 <= mode <= 8:
        raise PackError(f"bad bit mode {mode}")
    grid = Grid.from_mode(mode)
    lo, hi = grid.levels[0], grid.levels[-1]
    bad = np.argwhere((codes < lo) | (codes > hi) | (codes != np.round(codes)))
    if len(bad):
        r, c = bad[0]
        raise PackError(f"code {codes[r, c]} at ({r}, {c}) outside [{lo}, {hi}]")
    rows, cols = codes.shape
    ng = num_groups(cols, group_size) if cols else 0
    svals = np.asarray(svals, dtype=np.float32).reshape(rows, ng) if rows * ng else np.zeros((rows, ng), np.float32)
    if not np.all(np.isfinite(svals)):
        raise PackError("scales must be finite")
    with np.errstate(over="ignore"):
        s16 = svals.astype(np.float16)
    if not np.all(np.isfinite(s16)):
        raise PackError("scale overflows float16")
    idx = codes.astype(np.int64) - lo
    return PackedTensor(mode, rows, cols, group_size, s16, _encode_rows(idx, mode))


def pack_quantized(qw: QuantizedWeights) -> PackedTensor:
    return pack(qw.codes, qw.scales, qw.grid.mode)


def unpack(pt: PackedTensor) -> np.ndarray:
    return pt.codes()


def dequantize(pt: PackedTensor) -> np.ndarray:
    return pt.dequantize()


def stored_weights(qw: QuantizedWeights) -> np.ndarray:
    """Hard weights as they come back from disk (float16-rounded scales)."""
    s = GroupScales(qw.scales.values.astype(np.float16).astype(np.float32), qw.scales.group_size)
    return QuantizedWeights(qw.indices, s, qw.grid).weights


def report_bpp(pt: PackedTensor) -> tuple[float, float]:
    """(stored bits per weight, entropy-rate bits per weight); scales count 16 bits each."""
    n = pt.rows * pt.cols
    if n == 0:
        return 0.0, 0.0
    scale_bits = pt.rows * pt.ngroups * 16
    stored = (len(pt.payload) * 8 + scale_bits) / n
    code_bits = LOG2_3 if pt.mode == 0 else float(pt.mode)
    return stored, code_bits + scale_bits / n


def save_packed(path, pt: PackedTensor) -> None:
    atomic_write_bytes(path, pt.to_bytes())


def load_packed(path) -> PackedTensor:
    with open(path, "rb") as f:
        return PackedTensor.from_bytes(f.read())


def entropy_bpp(mode: int, group_size: int = 128, scale_bits: int = 16) -> float:
    return (LOG2_3 if mode == 0 else float(mode)) + scale_bits / group_size


def stored_bpp(mode: int, cols: int, group_size: int = 128, scale_bits: int = 16) -> float:
    return row_bytes(mode, cols) * 8 / cols + scale_bits * math.ceil(cols / group_size) / cols
