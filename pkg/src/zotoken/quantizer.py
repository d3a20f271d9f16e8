"""Symmetric N-bit weight quantization with absmax scales.

Codes are ``clamp(round(W / s) + o, Q_N, Q_P) - o`` with round-half-to-even,
``Q_N = -2**(N-1)``, ``Q_P = 2**(N-1) - 1`` and zero point ``o = 0``.  Scales
are ``max|W| / Q_P``, per tensor or per output channel (axis 0), held as
float32 so the binary dump round-trips exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ZQT1"
_GRANULARITY = {"per-tensor": 0, "per-channel": 1}


def qbounds(bits: int) -> tuple[int, int]:
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray        # int8, same shape as the source tensor
    scale: np.ndarray        # float32, shape () or (shape[0],)
    bits: int
    granularity: str
    zero_point: int = 0
    degenerate: bool = False  # some tensor/channel was all zeros (scale forced to 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def __post_init__(self):
        lo, hi = qbounds(self.bits)
        if self.codes.size and (self.codes.min() < lo or self.codes.max() > hi):
            raise ValueError("codes outside the quantization range")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")
        self.codes.setflags(write=False)
        self.scale.setflags(write=False)

    def _broadcast_scale(self) -> np.ndarray:
        s = self.scale.astype(np.float64)
        if self.granularity == "per-channel":
            return s.reshape((-1,) + (1,) * (self.codes.ndim - 1))
        return s


def quantize(weights, bits: int = 8, granularity: str = "per-tensor", scale=None) -> QuantizedTensor:
    """Quantize a real tensor.  ``scale`` overrides absmax selection (e.g. to requantize)."""
    w = np.asarray(weights, dtype=np.float64)
    if granularity not in _GRANULARITY:
        raise ValueError(f"unknown granularity {granularity!r}")
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite weights")
    if granularity == "per-channel" and w.ndim < 2:
        raise ValueError("per-channel quantization needs at least 2 dimensions")
    lo, hi = qbounds(bits)
    degenerate = False
    if scale is None:
        if granularity == "per-channel":
            amax = np.max(np.abs(w.reshape(w.shape[0], -1)), axis=1) if w.size else np.zeros(w.shape[0])
        else:
            amax = np.asarray(np.max(np.abs(w)) if w.size else 0.0)
        zero = amax == 0
        degenerate = bool(np.any(zero))
        with np.errstate(over="ignore"):
            scale = np.where(zero, 1.0, amax / hi).astype(np.float32)
        if not np.all(np.isfinite(scale)):
            raise ValueError("weights too large for a float32 scale")
        # keep tiny but nonzero absmax representable
        scale = np.maximum(scale, np.finfo(np.float32).tiny)
    else:
        scale = np.asarray(scale, dtype=np.float32)
    s = scale.astype(np.float64)
    if granularity == "per-channel":
        s = s.reshape((-1,) + (1,) * (w.ndim - 1))
    o = 0
    # np.rint rounds half to even
    codes = np.clip(np.rint(w / s) + o, lo, hi) - o
    return QuantizedTensor(codes=codes.astype(np.int8), scale=np.array(scale, dtype=np.float32),
                           bits=bits, granularity=granularity, degenerate=degenerate)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q._broadcast_scale() * q.codes


def dump(q: QuantizedTensor, path) -> int:
    """Write the binary debug dump; returns the byte count."""
    header = MAGIC + struct.pack("<BBB", q.bits, _GRANULARITY[q.granularity], q.codes.ndim)
    header += struct.pack(f"<{q.codes.ndim}I", *q.codes.shape)
    body = np.ascontiguousarray(q.scale, dtype="<f4").tobytes() + np.ascontiguousarray(q.codes, dtype=np.int8).tobytes()
    data = header + body
    Path(path).write_bytes(data)
    return len(data)


def load(path) -> QuantizedTensor:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    try:
        bits, gran, rank = struct.unpack_from("<BBB", data, 4)
        shape = struct.unpack_from(f"<{rank}I", data, 7)
        off = 7 + 4 * rank
        granularity = {v: k for k, v in _GRANULARITY.items()}[gran]
        nscale = shape[0] if granularity == "per-channel" else 1
        ncode = int(np.prod(shape)) if rank else 1
        if len(data) != off + 4 * nscale + ncode:
            raise ValueError(f"{path}: size {len(data)} does not match header")
        scale = np.frombuffer(data, dtype="<f4", count=nscale, offset=off).astype(np.float32)
        codes = np.frombuffer(data, dtype=np.int8, count=ncode, offset=off + 4 * nscale).reshape(shape).copy()
    except (struct.error, KeyError) as exc:
        raise ValueError(f"{path}: truncated or corrupt quantized tensor") from exc
    if granularity == "per-tensor":
        scale = scale.reshape(())
    return QuantizedTensor(codes=codes, scale=scale, bits=bits, granularity=granularity)
