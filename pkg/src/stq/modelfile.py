"""Packed mixed-precision model container.

Layout (all integers little-endian)::

    "STQW" | version u16 | layer count u16
    per layer:
        kind u8 | depth u8 (1, 2 or 32) | rank u8 | extents u32 * rank
        threshold f32 | scale count u32 | scales f32 * count
        payload length u64 | payload
        block count u8 | per block: tag u8 | float count u64 | f32 * count

Weight payloads hold packed codes for 1- and 2-bit layers and raw f32 for
32-bit ones.  Blocks carry biases, batch-norm parameters and running
statistics, and convolution geometry.  Layers without weights (ReLU,
pooling, flatten) use depth 32 and an empty payload; a pooling layer's
extents are (kernel, stride).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    BatchNorm,
    Flatten,
    Layer,
    MaxPool2d,
    QuantConv2d,
    QuantDense,
    QuantLayer,
    ReLU,
    Sequential,
    materialize,
)
from .optim import set_data
from .quant import QuantDepth, pack_codes, packed_nbytes, unpack_codes

MAGIC = b"STQW"
VERSION = 1

KIND_CONV, KIND_DENSE, KIND_BATCHNORM, KIND_RELU, KIND_MAXPOOL, KIND_FLATTEN = 1, 2, 3, 4, 5, 6
BLOCK_BIAS, BLOCK_BN_GAMMA, BLOCK_BN_BETA, BLOCK_BN_MEAN, BLOCK_BN_VAR, BLOCK_CONV_GEOMETRY = 1, 2, 3, 4, 5, 6


class ModelFormatError(ValueError):
    pass


@dataclass
class PackedLayer:
    kind: int
    depth: int = 32
    shape: tuple[int, ...] = ()
    delta: float = 0.0
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    payload: bytes = b""
    blocks: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def block(self, tag: int) -> np.ndarray | None:
        for t, values in self.blocks:
            if t == tag:
                return values
        return None

    def codes(self) -> np.ndarray:
        count = int(np.prod(self.shape))
        return unpack_codes(self.payload, QuantDepth(self.depth), count).reshape(self.shape)

    def weights(self) -> np.ndarray:
        """Dense float32 weights: raw values, or scales times codes."""
        if self.depth == 32:
            return np.frombuffer(self.payload, dtype="<f4").reshape(self.shape).astype(np.float32)
        return materialize(self.codes(), self.scales)


@dataclass
class PackedModel:
    layers: list[PackedLayer]
    version: int = VERSION

    @property
    def depths(self) -> list[int]:
        return [l.depth for l in self.layers if l.kind in (KIND_CONV, KIND_DENSE)]


def _expected_payload(depth: int, shape) -> int:
    count = int(np.prod(shape)) if shape else 0
    if depth == 32:
        return 4 * count
    return packed_nbytes(count, QuantDepth(depth))


# ---------------------------------------------------------------------------
# bytes <-> PackedModel
# ---------------------------------------------------------------------------


def encode(model: PackedModel) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HH", model.version, len(model.layers))
    for l in model.layers:
        if l.depth not in (1, 2, 32):
            raise ModelFormatError(f"invalid depth {l.depth}")
        if l.kind in (KIND_CONV, KIND_DENSE) and len(l.payload) != _expected_payload(l.depth, l.shape):
            raise ModelFormatError(
                f"payload of {len(l.payload)} bytes inconsistent with shape {l.shape} at {l.depth} bits"
            )
        out += struct.pack("<BBB", l.kind, l.depth, len(l.shape))
        out += struct.pack(f"<{len(l.shape)}I", *l.shape)
        scales = np.asarray(l.scales, dtype="<f4")
        out += struct.pack("<fI", l.delta, scales.size)
        out += scales.tobytes()
        out += struct.pack("<Q", len(l.payload))
        out += l.payload
        out += struct.pack("<B", len(l.blocks))
        for tag, values in l.blocks:
            v = np.asarray(values, dtype="<f4").reshape(-1)
            out += struct.pack("<BQ", tag, v.size)
            out += v.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError(
                f"truncated file: needed {n} bytes for {what} at offset {self.pos}, only {len(self.buf) - self.pos} left"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def decode(buf: bytes) -> PackedModel:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, count = r.unpack("HH", "header")
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version} (expected {VERSION})")
    layers = []
    for i in range(count):
        kind, depth, rank = r.unpack("BBB", f"layer {i} header")
        if depth not in (1, 2, 32):
            raise ModelFormatError(f"layer {i}: invalid depth code {depth} at offset {r.pos - 2}")
        shape = r.unpack(f"{rank}I", f"layer {i} shape") if rank else ()
        delta, n_scales = r.unpack("fI", f"layer {i} threshold")
        scales = np.frombuffer(r.take(4 * n_scales, f"layer {i} scales"), dtype="<f4").astype(np.float32)
        (n_payload,) = r.unpack("Q", f"layer {i} payload length")
        if kind in (KIND_CONV, KIND_DENSE) and n_payload != _expected_payload(depth, shape):
            raise ModelFormatError(
                f"layer {i}: payload length {n_payload} inconsistent with shape {shape} at {depth} bits"
            )
        payload = r.take(n_payload, f"layer {i} payload")
        (n_blocks,) = r.unpack("B", f"layer {i} block count")
        blocks = []
        for _ in range(n_blocks):
            tag, n = r.unpack("BQ", f"layer {i} block header")
            blocks.append((tag, np.frombuffer(r.take(4 * n, f"layer {i} block"), dtype="<f4").astype(np.float32)))
        layers.append(PackedLayer(kind, depth, tuple(shape), delta, scales, payload, blocks))
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return PackedModel(layers, version)


# ---------------------------------------------------------------------------
# Sequential <-> PackedModel
# ---------------------------------------------------------------------------


def pack_model(model: Sequential, depths=None) -> PackedModel:
    """Export a trained model; ``depths`` defaults to each layer's deployed depth."""
    qlayers = model.quant_layers()
    depths = list(depths) if depths is not None else [l.deployed_depth() for l in qlayers]
    if len(depths) != len(qlayers):
        raise ValueError(f"{len(qlayers)} weight layers but {len(depths)} depths")
    depth_of = {id(l): d for l, d in zip(qlayers, depths)}
    out = []
    for layer in model.layers:
        if isinstance(layer, QuantLayer):
            d = depth_of[id(layer)]
            payload, scales, delta = layer.export_state(d)
            data = payload.astype("<f4").tobytes() if d == 32 else pack_codes(payload, QuantDepth(d))
            blocks = [(BLOCK_BIAS, layer.bias.data)]
            kind = KIND_CONV if isinstance(layer, QuantConv2d) else KIND_DENSE
            if kind == KIND_CONV:
                blocks.append((BLOCK_CONV_GEOMETRY, np.array([layer.stride, layer.padding], dtype=np.float32)))
            out.append(PackedLayer(kind, d, layer.W.shape, delta, scales, data, blocks))
        elif isinstance(layer, BatchNorm):
            c = layer.gamma.size
            out.append(
                PackedLayer(
                    KIND_BATCHNORM,
                    shape=(c,),
                    blocks=[
                        (BLOCK_BN_GAMMA, layer.gamma.data),
                        (BLOCK_BN_BETA, layer.beta.data),
                        (BLOCK_BN_MEAN, layer.running_mean),
                        (BLOCK_BN_VAR, layer.running_var),
                    ],
                )
            )
        elif isinstance(layer, ReLU):
            out.append(PackedLayer(KIND_RELU))
        elif isinstance(layer, MaxPool2d):
            out.append(PackedLayer(KIND_MAXPOOL, shape=(layer.kernel, layer.stride)))
        elif isinstance(layer, Flatten):
            out.append(PackedLayer(KIND_FLATTEN))
        else:
            raise ValueError(f"cannot serialize layer {type(layer).__name__}")
    return PackedModel(out)


def _fp_layer(cls, pl: PackedLayer, **kw) -> QuantLayer:
    layer = cls(**kw, mode="FP", rng=np.random.default_rng(0))
    set_data(layer.W, pl.weights())
    bias = pl.block(BLOCK_BIAS)
    if bias is not None:
        set_data(layer.bias, bias)
    layer.packed = pl
    return layer


def unpack_model(packed: PackedModel) -> Sequential:
    """Inference network whose weight layers hold the materialized quantized weights."""
    layers: list[Layer] = []
    for i, pl in enumerate(packed.layers):
        if pl.kind == KIND_CONV:
            k, c, kh, kw = pl.shape
            geo = pl.block(BLOCK_CONV_GEOMETRY)
            stride, padding = (int(geo[0]), int(geo[1])) if geo is not None else (1, 0)
            layers.append(
                _fp_layer(QuantConv2d, pl, in_channels=c, out_channels=k, kernel_size=kh, stride=stride, padding=padding)
            )
        elif pl.kind == KIND_DENSE:
            out_f, in_f = pl.shape
            layers.append(_fp_layer(QuantDense, pl, in_features=in_f, out_features=out_f))
        elif pl.kind == KIND_BATCHNORM:
            bn = BatchNorm(pl.shape[0])
            set_data(bn.gamma, pl.block(BLOCK_BN_GAMMA))
            set_data(bn.beta, pl.block(BLOCK_BN_BETA))
            bn.running_mean = pl.block(BLOCK_BN_MEAN).copy()
            bn.running_var = pl.block(BLOCK_BN_VAR).copy()
            layers.append(bn)
        elif pl.kind == KIND_RELU:
            layers.append(ReLU())
        elif pl.kind == KIND_MAXPOOL:
            layers.append(MaxPool2d(pl.shape[0], pl.shape[1]))
        elif pl.kind == KIND_FLATTEN:
            layers.append(Flatten())
        else:
            raise ModelFormatError(f"layer {i}: unknown layer kind {pl.kind}")
    return Sequential(layers, name="packed").eval()


def folded_forward(model: Sequential, x: np.ndarray) -> np.ndarray:
    """Inference that convolves with the integer codes and applies scales afterwards.

    Each filter's output is multiplied by its scale, the per-filter form of
    folding the scale into the input.  Agrees with the materialized-weight
    forward up to float rounding.
    """
    from . import tensor as T
    from .tensor import Tensor

    h = Tensor(x)
    with T.no_grad():
        for layer in model.layers:
            pl = getattr(layer, "packed", None)
            if pl is None or pl.depth == 32:
                h = layer(h, deployed=True)
                continue
            codes = Tensor(pl.codes().astype(np.float32))
            scales = np.asarray(pl.scales, dtype=np.float32)
            if isinstance(layer, QuantConv2d):
                y = T.conv2d(h, codes, stride=layer.stride, padding=layer.padding)
                y = y * Tensor(scales.reshape(1, -1, 1, 1) if scales.size > 1 else scales.reshape(1, 1, 1, 1))
                h = y + T.reshape(layer.bias, (1, -1, 1, 1))
            else:
                y = T.matmul(h, T.transpose(codes))
                h = y * Tensor(scales.reshape(1, -1)) + layer.bias
    return h.data


def save(model: Sequential, path, depths=None) -> PackedModel:
    packed = pack_model(model, depths)
    Path(path).write_bytes(encode(packed))
    return packed


def load(path) -> Sequential:
    return unpack_model(decode(Path(path).read_bytes()))
