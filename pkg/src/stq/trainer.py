"""Training loop for the STQ objective and the BC/BWN/TWN/FP baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .layers import QuantLayer, Sequential
from .optim import AdamState, adam_step, set_data
from .regularizers import RegularizerConfig, reg_layer_op
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

MU_FLOOR = 1e-6
HIST_BINS = 80


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    initial_lr: float = 0.01
    lr_drop_epochs: tuple[int, ...] = (15, 30)
    lr_drop_factor: float = 10.0
    weight_decay: float = 1e-4
    lam: float = 0.1
    gamma: float = 1e-2
    delta: float = 1.55
    seed: int = 0
    mode: str = "STQ"
    beta_min: float = math.pi / 4 + 1e-3
    beta_max: float = math.pi / 2 - 1e-3
    tie_policy: str = "abs"
    gamma_per_filter: bool = True
    per_filter_mu: bool = True
    clip_latent: bool | None = None  # None: on for BC only
    augment: bool = False
    hist_every: int = 0  # 0: first and last epoch only
    eval_batch_size: int = 1000

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must be > 1")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be nonnegative")
        self.reg_config()  # validates the angle bounds

    def reg_config(self) -> RegularizerConfig:
        return RegularizerConfig(
            lam=self.lam,
            gamma=self.gamma,
            delta=self.delta,
            beta_min=self.beta_min,
            beta_max=self.beta_max,
            tie_policy=self.tie_policy,
            gamma_per_filter=self.gamma_per_filter,
            per_filter_mu=self.per_filter_mu,
        )

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``; a drop at epoch 15 applies from the 15th epoch on."""
        drops = sum(1 for e in self.lr_drop_epochs if epoch + 1 >= e)
        return self.initial_lr / self.lr_drop_factor**drops

    @property
    def clips_latent(self) -> bool:
        return self.mode == "BC" if self.clip_latent is None else self.clip_latent


@dataclass
class TrainingReport:
    mode: str
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_val_accuracy: float = 0.0
    beta_trajectory: list[list[float]] = field(default_factory=list)  # [epoch][layer]
    depths: list[int] = field(default_factory=list)
    depth_string: str = ""
    compression_ratio: float = 1.0
    final_accuracy: float = 0.0  # deployed (exported) weights
    histograms: dict[str, list[dict]] = field(default_factory=dict)  # "epoch" -> per-layer histograms

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# depth decision and compression accounting
# ---------------------------------------------------------------------------


def decide_depths(model: Sequential, delta: float) -> list[int]:
    out = []
    for layer in model.quant_layers():
        if layer.mode == "STQ":
            out.append(1 if float(layer.beta.data[0]) >= delta else 2)
        else:
            out.append(layer.default_depth())
    return out


def depth_string(depths) -> str:
    return "-".join(str(d) for d in depths)


def compression_ratio(weight_counts, depths) -> float:
    """Full-precision bits over quantized bits, summed over weight layers."""
    counts = np.asarray(weight_counts, dtype=np.int64)
    bits = np.asarray(depths, dtype=np.int64)
    if counts.shape != bits.shape:
        raise ValueError(f"{counts.size} layers but {bits.size} depths")
    return float((counts * 32).sum() / (counts * bits).sum())


def model_compression_ratio(model: Sequential, depths) -> float:
    return compression_ratio([l.n_weights for l in model.quant_layers()], depths)


def apply_depths(model: Sequential, depths) -> None:
    for layer, d in zip(model.quant_layers(), depths):
        layer.set_deployed_depth(d)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def regularization(model: Sequential, cfg: RegularizerConfig) -> Tensor | None:
    total = None
    for layer in model.quant_layers():
        if layer.mode != "STQ":
            continue
        term = reg_layer_op(layer.W, layer.mu, layer.beta, cfg)
        total = term if total is None else total + term
    return total


def total_objective(x, labels, model: Sequential, cfg: RegularizerConfig) -> Tensor:
    """Cross-entropy of the quantized forward pass plus every STQ layer's penalty."""
    loss = T.cross_entropy(model(x), labels)
    reg = regularization(model, cfg) if cfg.lam > 0 else None
    return loss if reg is None else loss + reg


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model: Sequential, data: Dataset, deployed: bool = False, batch_size: int = 1000) -> float:
    """Top-1 accuracy in percent."""
    was_training = model.layers[0].training if model.layers else False
    model.eval()
    correct = 0
    with T.no_grad():
        for i in range(0, len(data), batch_size):
            logits = model(Tensor(data.images[i : i + batch_size]), deployed=deployed).data
            correct += int((logits.argmax(axis=1) == data.labels[i : i + batch_size]).sum())
    model.train(was_training)
    return 100.0 * correct / max(len(data), 1)


def weight_histograms(model: Sequential, bins: int = HIST_BINS) -> list[dict]:
    out = []
    for i, layer in enumerate(model.quant_layers()):
        w = layer.W.data.astype(np.float64).reshape(-1)
        edge = float(np.abs(w).max()) or 1.0
        counts, edges = np.histogram(w, bins=bins, range=(-edge, edge))
        out.append({"layer": i, "edges": edges.tolist(), "counts": counts.tolist()})
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _clamp_state(model: Sequential, cfg: RegularizerConfig, clip_latent: bool) -> None:
    for layer in model.quant_layers():
        if layer.mode == "STQ":
            set_data(layer.beta, cfg.clamp_beta(layer.beta.data))
            set_data(layer.mu, np.maximum(layer.mu.data, MU_FLOOR))
        if clip_latent and layer.mode != "FP":
            set_data(layer.W, np.clip(layer.W.data, -1.0, 1.0))


def train(
    model: Sequential,
    train_data: Dataset,
    test_data: Dataset,
    config: TrainConfig,
    augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
    on_epoch: Callable[[int, TrainingReport], None] | None = None,
) -> tuple[Sequential, TrainingReport]:
    rng = np.random.default_rng(config.seed)
    reg_cfg = config.reg_config()
    params = model.parameters()
    decay = {id(l.W) for l in model.quant_layers() if l.mode in ("BC", "BWN", "TWN")}
    state = AdamState()
    report = TrainingReport(mode=config.mode)
    n = len(train_data)
    hist_epochs = {0, config.epochs - 1}
    if config.hist_every:
        hist_epochs |= set(range(0, config.epochs, config.hist_every))

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        model.train()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = train_data.images[idx]
            if augment is not None:
                xb = augment(xb, rng)
            obj = total_objective(Tensor(xb), train_data.labels[idx], model, reg_cfg)
            value = obj.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite objective {value} at epoch {epoch + 1}, batch {start // config.batch_size}")
            grads = backward(obj, leaves=params)
            adam_step(params, grads, state, lr, config.weight_decay, decay)
            _clamp_state(model, reg_cfg, config.clips_latent)
            losses.append(value)

        acc = evaluate(model, test_data, batch_size=config.eval_batch_size)
        report.train_loss.append(float(np.mean(losses)))
        report.val_accuracy.append(acc)
        report.best_val_accuracy = max(report.best_val_accuracy, acc)
        report.beta_trajectory.append([float(l.beta.data[0]) for l in model.quant_layers()])
        if epoch in hist_epochs:
            report.histograms[str(epoch + 1)] = weight_histograms(model)
        log.info("epoch %d lr %.2e loss %.4f acc %.2f", epoch + 1, lr, report.train_loss[-1], acc)
        if on_epoch is not None:
            on_epoch(epoch, report)

    finalize(model, test_data, config, report)
    return model, report


def finalize(model: Sequential, test_data: Dataset, config: TrainConfig, report: TrainingReport) -> None:
    depths = decide_depths(model, config.delta)
    apply_depths(model, depths)
    report.depths = depths
    report.depth_string = depth_string(depths)
    report.compression_ratio = model_compression_ratio(model, depths)
    report.final_accuracy = evaluate(model, test_data, deployed=True, batch_size=config.eval_batch_size)
