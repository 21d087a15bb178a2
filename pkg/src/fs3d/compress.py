"""Per-atom-type binary16 compression of token payloads.

Wire layout of :meth:`QuantizedBlock.to_bytes` (little endian)::

    magic      4 bytes  b"FQ16"
    n_tokens   uint32
    width      uint32
    n_types    uint32
    types      n_types x int32     ascending type ids
    scales     n_types x float32   s_t = amax_t / 65504 (1 when amax_t = 0)
    offsets    (n_types + 1) x uint32   token offset of each type group
    body       n_tokens x width x float16, grouped by type, stable within a type
    perm       n_tokens x uint32   body row k holds original token perm[k]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FP16_MAX = 65504.0
MAGIC = b"FQ16"


class CompressionError(ValueError):
    pass


@dataclass
class QuantizedBlock:
    types: np.ndarray     # (n_types,) int
    scales: np.ndarray    # (n_types,) float32
    offsets: np.ndarray   # (n_types + 1,)
    body: np.ndarray      # (n_tokens, width) float16, type-grouped
    perm: np.ndarray      # (n_tokens,) original index of each body row
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def n_tokens(self) -> int:
        return self.body.shape[0]

    @property
    def width(self) -> int:
        return self.body.shape[1]

    @property
    def payload_bytes(self) -> int:
        return int(self.body.size * 2)

    @property
    def scale_bytes(self) -> int:
        return int(self.scales.size * 4)

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<III", self.n_tokens, self.width, len(self.types))
        return b"".join([
            head,
            np.asarray(self.types, dtype="<i4").tobytes(),
            np.asarray(self.scales, dtype="<f4").tobytes(),
            np.asarray(self.offsets, dtype="<u4").tobytes(),
            np.asarray(self.body, dtype="<f2").tobytes(),
            np.asarray(self.perm, dtype="<u4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "QuantizedBlock":
        if buf[:4] != MAGIC:
            raise CompressionError("bad magic")
        n, w, nt = struct.unpack_from("<III", buf, 4)
        pos = 16

        def take(dtype, count):
            nonlocal pos
            a = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
            pos += a.nbytes
            return a.copy()

        types = take("<i4", nt).astype(np.int64)
        scales = take("<f4", nt).astype(np.float32)
        offsets = take("<u4", nt + 1).astype(np.int64)
        body = take("<f2", n * w).astype(np.float16).reshape(n, w)
        perm = take("<u4", n).astype(np.int64)
        return cls(types, scales, offsets, body, perm)


def type_scale(amax: float) -> np.float32:
    return np.float32(1.0) if amax == 0 else np.float32(amax / FP16_MAX)


def quantize_by_type(tokens: np.ndarray, types) -> QuantizedBlock:
    """Group rows by type and store x / s_t as round-to-nearest-even binary16."""
    x = np.asarray(tokens)
    if x.ndim != 2:
        raise CompressionError("tokens must be (n, width)")
    if not np.all(np.isfinite(x)):
        raise CompressionError("non-finite token values")
    types = np.asarray(types, dtype=np.int64).reshape(-1)
    if len(types) != x.shape[0]:
        raise CompressionError("one type per token required")
    perm = np.argsort(types, kind="stable")
    uniq, counts = np.unique(types, return_counts=True)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    grouped = x[perm].astype(np.float64)
    scales = np.empty(len(uniq), dtype=np.float32)
    body = np.empty(x.shape, dtype=np.float16)
    for k in range(len(uniq)):
        lo, hi = offsets[k], offsets[k + 1]
        seg = grouped[lo:hi]
        s = type_scale(float(np.max(np.abs(seg))) if seg.size else 0.0)
        # the float32 amax / 65504 can round up past the true ratio; clip keeps the grid bounded
        y = np.clip(seg / np.float64(s), -FP16_MAX, FP16_MAX)
        body[lo:hi] = y.astype(np.float16)
        scales[k] = s
    return QuantizedBlock(uniq, scales, offsets, body, perm.astype(np.int64), x.dtype)


def dequantize(block: QuantizedBlock, dtype=None) -> np.ndarray:
    """x_hat = s_t * widen(body), rows returned in the original token order.

    The product is exact in binary64 (the default output); casting to a
    narrower ``dtype`` adds one rounding of that precision.
    """
    dtype = np.dtype(dtype or np.float64)
    grouped = block.body.astype(np.float64)
    for k in range(len(block.types)):
        lo, hi = block.offsets[k], block.offsets[k + 1]
        grouped[lo:hi] *= np.float64(block.scales[k])
    out = np.empty_like(grouped)
    out[block.perm] = grouped
    return out.astype(dtype)


def roundtrip(tokens: np.ndarray, types) -> np.ndarray:
    """Quantize and restore, returning the input's precision."""
    tokens = np.asarray(tokens)
    return dequantize(quantize_by_type(tokens, types), tokens.dtype)


def error_bound(x: np.ndarray, types, block: QuantizedBlock) -> np.ndarray:
    """Per-element bound max(2^-11 |x|, s_t 2^-25)."""
    types = np.asarray(types, dtype=np.int64)
    s_of = dict(zip(block.types.tolist(), block.scales.astype(np.float64).tolist()))
    s = np.array([s_of[t] for t in types.tolist()], dtype=np.float64)[:, None]
    return np.maximum(2.0 ** -11 * np.abs(np.asarray(x, dtype=np.float64)), s * 2.0 ** -25)
