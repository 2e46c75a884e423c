"""Weight quantizers, straight-through gradients and the bit-packing codec."""

from __future__ import annotations

import enum
from typing import Callable

import numpy as np

from .tensor import Tensor, custom_grad

__all__ = [
    "QuantDepth",
    "DegenerateLayerError",
    "CodecError",
    "sign_binarize",
    "threshold_ternarize",
    "ste_quantize",
    "bwn_scale",
    "twn_threshold_and_scale",
    "pack_codes",
    "unpack_codes",
    "packed_nbytes",
    "TWN_THRESHOLD_FACTOR",
]

TWN_THRESHOLD_FACTOR = 0.7


class QuantDepth(enum.IntEnum):
    BINARY = 1
    TERNARY = 2

    @property
    def bits(self) -> int:
        return int(self)


class DegenerateLayerError(ValueError):
    pass


class CodecError(ValueError):
    pass


def _data(w) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w)


def sign_binarize(w) -> np.ndarray:
    """+1 where w >= 0, -1 elsewhere, as int8 codes."""
    return np.where(_data(w) >= 0, 1, -1).astype(np.int8)


def threshold_ternarize(w, delta: float) -> np.ndarray:
    """Symmetric threshold: +1 above ``delta``, -1 below ``-delta``, 0 between (inclusive)."""
    if not delta > 0:
        raise ValueError(f"threshold must be positive, got {delta}")
    x = _data(w)
    codes = np.zeros(x.shape, dtype=np.int8)
    codes[x > delta] = 1
    codes[x < -delta] = -1
    return codes


def _filter_view(scale: np.ndarray, ndim: int) -> np.ndarray:
    # per-filter scales broadcast along axis 0; a single scale broadcasts everywhere
    return scale.reshape((-1,) + (1,) * (ndim - 1)) if scale.size > 1 else scale.reshape((1,) * ndim)


def ste_quantize(w: Tensor, code_fn: Callable[[np.ndarray], np.ndarray], mu) -> Tensor:
    """Quantize ``w`` to ``mu * code_fn(w)`` with the clipped straight-through gradient.

    ``mu`` holds one scale per filter (axis 0 of ``w``) or a single scale.
    The gradient reaching ``w`` is ``upstream * mu`` masked to ``|w| <= 1``;
    the gradient reaching each scale is the sum of ``upstream * code`` over
    its filter.
    """
    mu = mu if isinstance(mu, Tensor) else Tensor(np.asarray(mu, dtype=w.dtype).reshape(-1))
    if np.any(mu.data <= 0):
        raise ValueError("quantization scales must be positive")
    k = w.shape[0] if w.ndim else 1
    if mu.size not in (1, k):
        raise ValueError(f"expected 1 or {k} scales for weight of shape {w.shape}, got {mu.size}")
    codes = code_fn(w.data).astype(w.dtype)

    def fwd(wd, md):
        return _filter_view(md, wd.ndim) * codes

    def bwd(g, wd, md):
        gw = g * _filter_view(md, wd.ndim) * (np.abs(wd) <= 1)
        gc = g * codes
        if md.size == 1:
            gm = np.asarray(gc.sum(), dtype=md.dtype).reshape(md.shape)
        else:
            gm = gc.reshape(gc.shape[0], -1).sum(axis=1).reshape(md.shape)
        return gw, gm

    return custom_grad(fwd, bwd)(w, mu)


def bwn_scale(w) -> float:
    x = _data(w)
    if x.size == 0:
        raise ValueError("cannot compute a scale for an empty tensor")
    return float(np.abs(x).mean())


def twn_threshold_and_scale(w) -> tuple[float, float]:
    """Threshold ``0.7 * E|W|`` and the mean magnitude of the weights above it."""
    x = np.abs(_data(w))
    if x.size == 0:
        raise ValueError("cannot compute a threshold for an empty tensor")
    delta = TWN_THRESHOLD_FACTOR * float(x.mean())
    keep = x > delta
    if not keep.any():
        raise DegenerateLayerError("every weight falls below the ternary threshold")
    return delta, float(x[keep].mean())


# ---------------------------------------------------------------------------
# bit packing
#
# BINARY: 1 bit per weight, 1 -> +1, 0 -> -1.
# TERNARY: 2 bits per weight, 00 -> 0, 01 -> +1, 10 -> -1, 11 reserved.
# Row-major element order, least significant bits first within each byte,
# final byte zero padded.
# ---------------------------------------------------------------------------

_TERNARY_ENCODE = np.array([2, 0, 1], dtype=np.uint8)  # index by code + 1
_TERNARY_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


def packed_nbytes(count: int, depth: QuantDepth) -> int:
    return (count * int(depth) + 7) // 8


def pack_codes(codes, depth: QuantDepth) -> bytes:
    depth = QuantDepth(depth)
    c = np.asarray(codes).reshape(-1)
    if c.size and (c.min() < -1 or c.max() > 1):
        raise CodecError("codes must lie in {-1, 0, +1}")
    if depth is QuantDepth.BINARY:
        if np.any(c == 0):
            raise CodecError("binary packing cannot represent a zero code")
        return np.packbits(c > 0, bitorder="little").tobytes()
    fields = _TERNARY_ENCODE[c.astype(np.int64) + 1]
    pad = (-fields.size) % 4
    if pad:
        fields = np.concatenate([fields, np.zeros(pad, dtype=np.uint8)])
    f = fields.reshape(-1, 4)
    return (f[:, 0] | (f[:, 1] << 2) | (f[:, 2] << 4) | (f[:, 3] << 6)).astype(np.uint8).tobytes()


def unpack_codes(payload: bytes, depth: QuantDepth, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns ``count`` int8 codes."""
    depth = QuantDepth(depth)
    need = packed_nbytes(count, depth)
    if len(payload) != need:
        raise CodecError(f"expected {need} bytes for {count} codes at {int(depth)} bit(s), got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if depth is QuantDepth.BINARY:
        bits = np.unpackbits(raw, bitorder="little")[:count]
        return np.where(bits == 1, 1, -1).astype(np.int8)
    fields = np.stack([(raw >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:count]
    bad = np.flatnonzero(fields == 0b11)
    if bad.size:
        raise CodecError(f"reserved ternary bit pattern 11 at element {int(bad[0])}")
    return _TERNARY_DECODE[fields]
