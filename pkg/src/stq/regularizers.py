"""Quantization regularizers and their closed-form subgradients.

``reg_r1`` pulls weights toward {-mu, +mu}, ``reg_r2`` toward {-mu, 0, +mu}.
``reg_stq`` interpolates between them through an angle ``beta``: at
``beta = pi/4`` it coincides with ``reg_r2``, and as ``beta -> pi/2`` the
``tan(beta)|w|`` arm stops being the minimum and ``reg_r1`` remains.  A
``gamma * cot(beta)`` prior pushes ``beta`` up, i.e. toward binary layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_grad

__all__ = [
    "RegularizerConfig",
    "reg_r1",
    "reg_r2",
    "reg_stq",
    "reg_stq_grad",
    "reg_layer",
    "reg_layer_grad",
    "reg_layer_op",
    "BETA_DOMAIN",
]

# the angle domain over which reg_stq is defined; training clamps tighter
BETA_DOMAIN = (math.pi / 4, math.pi / 2)


@dataclass(frozen=True)
class RegularizerConfig:
    lam: float = 0.1
    gamma: float = 1e-2
    delta: float = 1.55
    beta_min: float = math.pi / 4 + 1e-3
    beta_max: float = math.pi / 2 - 1e-3
    tie_policy: str = "abs"  # "abs": the ||w|-mu| arm wins ties; "tan": the tan arm does
    gamma_per_filter: bool = True
    per_filter_mu: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be nonnegative")
        if not (math.pi / 4 < self.beta_min < self.beta_max < math.pi / 2):
            raise ValueError(f"need pi/4 < beta_min < beta_max < pi/2, got [{self.beta_min}, {self.beta_max}]")
        if not (self.beta_min < self.delta <= self.beta_max):
            raise ValueError(f"delta {self.delta} must lie in (beta_min, beta_max]")
        if self.tie_policy not in ("abs", "tan"):
            raise ValueError(f"tie_policy must be 'abs' or 'tan', got {self.tie_policy!r}")

    def clamp_beta(self, beta):
        return np.clip(beta, self.beta_min, self.beta_max)


def _sign(x):
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def reg_r1(w, mu):
    return np.abs(np.abs(w) - mu)


def reg_r2(w, mu):
    return np.abs(np.abs(np.abs(w) - mu / 2) - mu / 2)


def _check_beta(beta):
    b = np.asarray(beta)
    if np.any(b < BETA_DOMAIN[0]) or np.any(b >= BETA_DOMAIN[1]):
        raise ValueError(f"beta must lie in [pi/4, pi/2), got {beta}")


def reg_stq(w, mu, beta):
    """min(||w| - mu|, tan(beta) |w|), elementwise."""
    _check_beta(beta)
    a = np.abs(w)
    return np.minimum(np.abs(a - mu), np.tan(beta) * a)


def _arm_a(w, mu, beta, tie_policy="abs"):
    a = np.abs(w)
    arm_a = np.abs(a - mu)
    arm_b = np.tan(beta) * a
    return arm_a <= arm_b if tie_policy == "abs" else arm_a < arm_b


def reg_stq_grad(w, mu, beta, gamma=0.0, tie_policy="abs"):
    """Subgradients of ``reg_stq(w, mu, beta) + gamma * cot(beta)``.

    Returns ``(d/dw, d/dmu, d/dbeta)`` elementwise.  The ``gamma`` term
    contributes ``-gamma / sin(beta)**2`` to every ``d/dbeta`` entry.
    """
    _check_beta(beta)
    w = np.asarray(w, dtype=np.float64)
    a = np.abs(w)
    t = np.tan(beta)
    use_a = _arm_a(w, mu, beta, tie_policy)
    s_w = _sign(w)
    s_d = _sign(a - mu)
    dw = np.where(use_a, s_w * s_d, t * s_w)
    dmu = np.where(use_a, -s_d, 0.0)
    dbeta = np.where(use_a, 0.0, (1.0 + t * t) * a) - gamma / math.sin(beta) ** 2
    return dw, dmu, dbeta


def _layer_terms(w: np.ndarray, mu: np.ndarray, beta: float, cfg: RegularizerConfig):
    k = w.shape[0]
    mu_b = mu.reshape((-1,) + (1,) * (w.ndim - 1)) if mu.size > 1 else mu.reshape((1,) * w.ndim)
    n_prior = k if cfg.gamma_per_filter else 1
    scale = cfg.lam / w.size
    return k, mu_b, n_prior, scale


def reg_layer(w, mu, beta: float, cfg: RegularizerConfig) -> float:
    """Layer penalty ``lam / #W * sum_k [sum_ij R(w_kij, mu_k, beta) + gamma cot(beta)]``."""
    w = np.asarray(w, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if mu.size not in (1, w.shape[0]):
        raise ValueError(f"expected 1 or {w.shape[0]} scales for weight of shape {w.shape}, got {mu.size}")
    k, mu_b, n_prior, scale = _layer_terms(w, mu, beta, cfg)
    body = reg_stq(w, mu_b, beta).sum()
    return float(scale * (body + n_prior * cfg.gamma / math.tan(beta)))


def reg_layer_grad(w, mu, beta: float, cfg: RegularizerConfig):
    """Gradients of :func:`reg_layer` with respect to ``(w, mu, beta)``."""
    w64 = np.asarray(w, dtype=np.float64)
    mu64 = np.asarray(mu, dtype=np.float64).reshape(-1)
    k, mu_b, n_prior, scale = _layer_terms(w64, mu64, beta, cfg)
    dw, dmu, dbeta = reg_stq_grad(w64, mu_b, beta, 0.0, cfg.tie_policy)
    if mu64.size == 1:
        gmu = np.array([dmu.sum()])
    else:
        gmu = dmu.reshape(k, -1).sum(axis=1)
    gbeta = dbeta.sum() - n_prior * cfg.gamma / math.sin(beta) ** 2
    return scale * dw, scale * gmu, scale * gbeta


def reg_layer_op(w: Tensor, mu: Tensor, beta: Tensor, cfg: RegularizerConfig) -> Tensor:
    """Differentiable scalar layer penalty with analytic gradients."""

    def fwd(wd, md, bd):
        return np.asarray(reg_layer(wd, md, float(bd.reshape(-1)[0]), cfg), dtype=wd.dtype)

    def bwd(g, wd, md, bd):
        gw, gm, gb = reg_layer_grad(wd, md, float(bd.reshape(-1)[0]), cfg)
        g = float(np.asarray(g).reshape(-1)[0])
        return g * gw, (g * gm).reshape(md.shape), np.full(bd.shape, g * gb)

    return custom_grad(fwd, bwd)(w, mu, beta)
