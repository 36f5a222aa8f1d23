"""Dense matrix helpers, counter-based random streams and the GSQT container.

Matrices are plain 2-D ``numpy.float32`` arrays. Products and norms accumulate
in float64 and are cast back to float32.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from gsq.fileio import atomic_write_bytes

GUMBEL_U_MIN = 2.0**-32
GUMBEL_U_MAX = 1.0 - 2.0**-24

_U64 = (1 << 64) - 1


class TensorError(ValueError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate ``x`` as a finite 2-D array and return it as float32."""
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 2:
        raise TensorError(f"{name}: expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise TensorError(f"{name}: contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    with np.errstate(over="ignore"):
        out = out.astype(np.float32)
    return as_matrix(out, "matmul result")


def frobenius_sq(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def _stream_id(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


@dataclass
class RngStream:
    """Counter-based random stream (Philox keyed by ``(seed, stream)``).

    Every sampling call consumes one counter value, so a stream can be
    replayed from any ``(seed, stream, counter)`` triple.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def derive(self, label: str) -> RngStream:
        """Independent child stream identified by ``label``."""
        sid = (self.stream * 0x9E3779B97F4A7C15 + _stream_id(label)) & _U64
        return RngStream(self.seed, sid, 0)

    def fork(self) -> RngStream:
        return RngStream(self.seed, self.stream, self.counter)

    def _generator(self) -> np.random.Generator:
        key = [self.seed & _U64, self.stream & _U64]
        bitgen = np.random.Philox(key=key, counter=[0, 0, 0, self.counter & _U64])
        self.counter += 1
        return np.random.Generator(bitgen)

    def uniform(self, shape) -> np.ndarray:
        return self._generator().random(shape, dtype=np.float64)

    def gaussian(self, shape) -> np.ndarray:
        return self._generator().standard_normal(shape, dtype=np.float64).astype(np.float32)

    def gumbel(self, shape) -> np.ndarray:
        return gumbel_from_uniform(self.uniform(shape)).astype(np.float32)


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_U_MIN, GUMBEL_U_MAX)
    return -np.log(-np.log(u))


def sample_gumbel(rng: RngStream, n) -> np.ndarray:
    if np.prod(n) < 1:
        raise ValueError("n must be >= 1")
    return rng.gumbel(n)


def sample_gaussian(rng: RngStream, n) -> np.ndarray:
    if np.prod(n) < 1:
        raise ValueError("n must be >= 1")
    return rng.gaussian(n)


# GSQT container: magic, version u16, dtype u8, rank u8, dims u64[rank], payload.
GSQT_MAGIC = b"GSQT"
GSQT_VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


def encode_tensor(array) -> bytes:
    a = np.array(array, dtype="<f4", order="C")
    if a.ndim > 255:
        raise TensorError("rank too large")
    head = GSQT_MAGIC + struct.pack("<HBB", GSQT_VERSION, 0, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != GSQT_MAGIC:
        raise TensorError("not a GSQT container (bad magic)")
    version, dtype_tag, rank = struct.unpack_from("<HBB", buf, 4)
    if version != GSQT_VERSION:
        raise TensorError(f"unsupported GSQT version {version}")
    if dtype_tag not in _DTYPES:
        raise TensorError(f"unsupported GSQT dtype tag {dtype_tag}")
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TensorError("truncated GSQT header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    dtype = _DTYPES[dtype_tag]
    count = 1
    for d in dims:
        count *= d
    if len(buf) - off != count * dtype.itemsize:
        raise TensorError(
            f"GSQT payload is {len(buf) - off} bytes, expected {count * dtype.itemsize}"
        )
    a = np.frombuffer(buf, dtype=dtype, offset=off, count=count).reshape(dims)
    if not np.all(np.isfinite(a)):
        raise TensorError("GSQT payload contains non-finite values")
    return a.astype(np.float32)


def write_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())
