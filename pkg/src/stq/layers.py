"""Layers with quantized weights and the reference architectures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import tensor as T
from .quant import (
    QuantDepth,
    bwn_scale,
    sign_binarize,
    ste_quantize,
    threshold_ternarize,
    twn_threshold_and_scale,
)
from .tensor import Tensor

__all__ = [
    "MODES",
    "DELTA_SIGMA_FACTOR",
    "QuantLayer",
    "QuantConv2d",
    "QuantDense",
    "BatchNorm",
    "ReLU",
    "MaxPool2d",
    "Flatten",
    "Sequential",
    "LayerSpec",
    "ModelSpec",
    "build_lenet5",
    "build_vgg7",
    "build_vgg16",
    "build_mlp",
    "build_model",
]

MODES = ("STQ", "BC", "BWN", "TWN", "FP")
DELTA_SIGMA_FACTOR = 0.2
BETA_INIT = 3 * math.pi / 8


class Layer:
    training = True

    def forward(self, x: Tensor, deployed: bool = False) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return []

    def __call__(self, x, deployed: bool = False):
        return self.forward(x, deployed=deployed)


class QuantLayer(Layer):
    """Holds latent weights plus everything needed to quantize them.

    ``W`` is filter-major: axis 0 indexes output channels (conv) or output
    units (dense).  In STQ mode ``mu`` has one trainable scale per filter
    and ``beta`` is the layer's trainable shape angle; ``delta`` is frozen
    at ``0.2 * sigma_init``.
    """

    kind = "quant"

    def __init__(
        self,
        weight_shape: tuple[int, ...],
        mode: str,
        rng: np.random.Generator,
        per_filter_mu: bool = True,
        dtype=np.float32,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown quantization mode {mode!r}")
        self.mode = mode
        fan_in = int(np.prod(weight_shape[1:]))
        self.sigma_init = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, self.sigma_init, size=weight_shape).astype(dtype)
        self.W = Tensor(w, requires_grad=True, name="W")
        self.bias = Tensor(np.zeros(weight_shape[0], dtype=dtype), requires_grad=True, name="bias")
        self.delta = DELTA_SIGMA_FACTOR * self.sigma_init
        mu0 = np.abs(w).reshape(weight_shape[0], -1).mean(axis=1)
        if not per_filter_mu:
            mu0 = np.array([np.abs(w).mean()])
        self.mu = Tensor(mu0.astype(dtype), requires_grad=(mode == "STQ"), name="mu")
        self.beta = Tensor(np.array([BETA_INIT], dtype=dtype), requires_grad=(mode == "STQ"), name="beta")

    @property
    def n_filters(self) -> int:
        return self.W.shape[0]

    @property
    def n_weights(self) -> int:
        return self.W.size

    def parameters(self) -> list[Tensor]:
        ps = [self.W, self.bias]
        if self.mode == "STQ":
            ps += [self.mu, self.beta]
        return ps

    # -- training-time view -------------------------------------------
    def quantized_weight(self) -> Tensor:
        w = self.W
        if self.mode == "FP":
            return w
        if self.mode == "STQ":
            return ste_quantize(w, lambda x: threshold_ternarize(x, self.delta), self.mu)
        if self.mode == "BC":
            return ste_quantize(w, sign_binarize, 1.0)
        if self.mode == "BWN":
            return ste_quantize(w, sign_binarize, bwn_scale(w))
        delta, scale = twn_threshold_and_scale(w)
        return ste_quantize(w, lambda x: threshold_ternarize(x, delta), scale)

    # -- deployment view ----------------------------------------------
    def default_depth(self) -> int:
        return {"BC": 1, "BWN": 1, "TWN": 2, "FP": 32}.get(self.mode, 2)

    def export_state(self, depth: int) -> tuple[np.ndarray, np.ndarray, float]:
        """Codes (or raw weights for depth 32), scales and threshold as stored on disk."""
        w = self.W.data
        if depth == 32:
            return w.astype(np.float32), np.zeros(0, dtype=np.float32), 0.0
        if self.mode == "STQ":
            mu, delta = self.mu.data.astype(np.float32), self.delta
        elif self.mode == "BC":
            mu, delta = np.ones(1, dtype=np.float32), 0.0
        elif self.mode == "BWN":
            mu, delta = np.array([bwn_scale(w)], dtype=np.float32), 0.0
        elif self.mode == "TWN":
            delta, scale = twn_threshold_and_scale(w)
            mu = np.array([scale], dtype=np.float32)
        else:
            raise ValueError(f"an FP layer cannot be stored at {depth} bits")
        if depth == 1:
            codes = sign_binarize(w)
        else:
            codes = threshold_ternarize(w, delta if delta > 0 else self.delta)
        return codes, mu, float(delta)

    def deployed_weight(self, depth: int) -> np.ndarray:
        payload, mu, _ = self.export_state(depth)
        if depth == 32:
            return payload
        return materialize(payload, mu)

    def deployed_depth(self) -> int:
        return getattr(self, "_deployed_depth", None) or self.default_depth()

    def set_deployed_depth(self, depth: int) -> None:
        self._deployed_depth = depth
        self._deployed_cache = None

    def _weight(self, deployed: bool) -> Tensor:
        if not deployed:
            return self.quantized_weight()
        cache = getattr(self, "_deployed_cache", None)
        if cache is None or cache[0] is not self.W.data:
            cache = (self.W.data, Tensor(self.deployed_weight(self.deployed_depth())))
            self._deployed_cache = cache
        return cache[1]


def materialize(codes: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Dense float32 weights ``mu * codes`` with scales broadcast per filter."""
    c = codes.astype(np.float32)
    m = np.asarray(mu, dtype=np.float32).reshape(-1)
    view = m.reshape((-1,) + (1,) * (c.ndim - 1)) if m.size > 1 else m.reshape((1,) * c.ndim)
    return view * c


class QuantConv2d(QuantLayer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, mode="STQ", rng=None, **kw):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__((out_channels, in_channels, kernel_size, kernel_size), mode, rng, **kw)
        self.stride = stride
        self.padding = padding

    def forward(self, x, deployed=False):
        w = self._weight(deployed)
        y = T.conv2d(x, w, stride=self.stride, padding=self.padding)
        return y + T.reshape(self.bias, (1, -1, 1, 1))


class QuantDense(QuantLayer):
    kind = "dense"

    def __init__(self, in_features, out_features, mode="STQ", rng=None, **kw):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__((out_features, in_features), mode, rng, **kw)

    def forward(self, x, deployed=False):
        w = self._weight(deployed)
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise T.ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
        return T.matmul(x, T.transpose(w)) + self.bias


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True, name="bn_gamma")
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True, name="bn_beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x, deployed=False):
        return T.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, deployed=False):
        return T.relu(x)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, kernel: int = 2, stride: int | None = None):
        self.kernel = kernel
        self.stride = stride or kernel

    def forward(self, x, deployed=False):
        return T.maxpool2d(x, self.kernel, self.stride)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, deployed=False):
        return T.reshape(x, (x.shape[0], -1))


class Sequential(Layer):
    def __init__(self, layers: list[Layer], name: str = "model"):
        self.layers = layers
        self.name = name

    def forward(self, x, deployed=False):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for layer in self.layers:
            x = layer(x, deployed=deployed)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def quant_layers(self) -> list[QuantLayer]:
        return [l for l in self.layers if isinstance(l, QuantLayer)]

    def train(self, flag: bool = True):
        for layer in self.layers:
            layer.training = flag
        return self

    def eval(self):
        return self.train(False)


# ---------------------------------------------------------------------------
# architecture descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    type: str  # conv | dense | batchnorm | relu | maxpool | flatten
    args: dict[str, Any] = field(default_factory=dict)
    quantize: bool = True


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    mode: str = "STQ"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown quantization mode {self.mode!r}")

    @property
    def weight_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.type in ("conv", "dense")]

    def layer_modes(self) -> list[str]:
        return [self.mode if l.quantize else "FP" for l in self.weight_layers]

    def weight_counts(self) -> list[int]:
        out = []
        for l in self.weight_layers:
            a = l.args
            if l.type == "conv":
                out.append(a["out_channels"] * a["in_channels"] * a["kernel_size"] ** 2)
            else:
                out.append(a["in_features"] * a["out_features"])
        return out


def _conv(cin, cout, k, padding=0, quantize=True):
    return LayerSpec("conv", dict(in_channels=cin, out_channels=cout, kernel_size=k, padding=padding), quantize)


def _dense(fin, fout, quantize=True):
    return LayerSpec("dense", dict(in_features=fin, out_features=fout), quantize)


def build_lenet5(mode: str = "STQ", **overrides) -> ModelSpec:
    """LeNet-5 for 1x28x28 input: conv6@5x5 - pool - conv16@5x5 - pool - 400-120-84-10.

    The first convolution zero-pads by 2, which gives the classic 32x32
    geometry and a 16x5x5 = 400 feature map before the dense stack.
    """
    c1 = overrides.get("conv1", 6)
    c2 = overrides.get("conv2", 16)
    h1 = overrides.get("fc1", 120)
    h2 = overrides.get("fc2", 84)
    layers = (
        _conv(1, c1, 5, padding=2),
        LayerSpec("relu"),
        LayerSpec("maxpool", dict(kernel=2)),
        _conv(c1, c2, 5),
        LayerSpec("relu"),
        LayerSpec("maxpool", dict(kernel=2)),
        LayerSpec("flatten"),
        _dense(c2 * 25, h1),
        LayerSpec("relu"),
        _dense(h1, h2),
        LayerSpec("relu"),
        _dense(h2, 10),
    )
    return ModelSpec("lenet5", (1, 28, 28), layers, mode)


def _vgg_block(cin, cout, quantize=True):
    return [_conv(cin, cout, 3, padding=1, quantize=quantize), LayerSpec("batchnorm", dict(channels=cout)), LayerSpec("relu")]


def build_vgg7(mode: str = "STQ", width: float = 1.0, widths=(128, 256, 512), **overrides) -> ModelSpec:
    """Six 3x3 conv layers in pairs (pool after each pair) and a dense classifier head."""
    ws = [max(1, int(round(c * width))) for c in widths]
    layers: list[LayerSpec] = []
    cin = 3
    for c in ws:
        layers += _vgg_block(cin, c) + _vgg_block(c, c)
        layers.append(LayerSpec("maxpool", dict(kernel=2)))
        cin = c
    layers += [LayerSpec("flatten"), _dense(cin * 16, 10)]
    return ModelSpec("vgg7", (3, 32, 32), tuple(layers), mode)


def build_vgg16(mode: str = "STQ", width: float = 1.0) -> ModelSpec:
    """VGG-16 for 32x32 input; first and last weight layers stay full precision."""
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
    layers: list[LayerSpec] = []
    cin = 3
    first = True
    for v in cfg:
        if v == "M":
            layers.append(LayerSpec("maxpool", dict(kernel=2)))
            continue
        c = max(1, int(round(v * width)))
        layers += _vgg_block(cin, c, quantize=not first)
        first = False
        cin = c
    layers += [LayerSpec("flatten"), _dense(cin, 10, quantize=False)]
    return ModelSpec("vgg16", (3, 32, 32), tuple(layers), mode)


def build_mlp(sizes=(2, 32, 3), mode: str = "STQ") -> ModelSpec:
    """Dense ReLU network; used for small synthetic tasks."""
    layers: list[LayerSpec] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i:
            layers.append(LayerSpec("relu"))
        layers.append(_dense(a, b))
    return ModelSpec("mlp", (sizes[0],), tuple(layers), mode)


BUILDERS = {"lenet5": build_lenet5, "vgg7": build_vgg7, "vgg16": build_vgg16}


def build_model(spec: ModelSpec, seed: int = 0, per_filter_mu: bool = True) -> Sequential:
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for ls in spec.layers:
        a = ls.args
        mode = spec.mode if ls.quantize else "FP"
        if ls.type == "conv":
            layers.append(
                QuantConv2d(
                    a["in_channels"], a["out_channels"], a["kernel_size"], a.get("stride", 1), a.get("padding", 0),
                    mode=mode, rng=rng, per_filter_mu=per_filter_mu,
                )
            )
        elif ls.type == "dense":
            layers.append(QuantDense(a["in_features"], a["out_features"], mode=mode, rng=rng, per_filter_mu=per_filter_mu))
        elif ls.type == "batchnorm":
            layers.append(BatchNorm(a["channels"]))
        elif ls.type == "relu":
            layers.append(ReLU())
        elif ls.type == "maxpool":
            layers.append(MaxPool2d(a.get("kernel", 2), a.get("stride")))
        elif ls.type == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer type {ls.type!r}")
    return Sequential(layers, name=spec.name)


def with_mode(spec: ModelSpec, mode: str) -> ModelSpec:
    return replace(spec, mode=mode)
