"""Regression and classification losses with analytic gradients.

The pose regression loss adds a hard-sample term to the per-sample squared
error::

    loss = L0 + eps * L1,    L1 = (L0 + alpha)^2 * L0 * exp(L0 / (1 - alpha))

where ``1 - alpha`` tracks the mean of L0 over the training set. L0 is the
mean squared error of one sample in standardised coordinates; a batch loss
is the mean of the per-sample losses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .skeleton import DimensionError

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.001
EXP_CLAMP = 50.0
ALPHA_BOUNDS = (0.01, 0.99)
PROB_FLOOR = 1e-12


@dataclass
class Normalizer:
    """Per-coordinate z-scoring fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data, min_std: float = 1e-8) -> "Normalizer":
        data = np.asarray(data, dtype=float).reshape(len(data), -1)
        std = data.std(axis=0)
        # constant coordinates (e.g. the root joint) pass through unscaled
        std = np.where(std < min_std, 1.0, std)
        return cls(data.mean(axis=0), std)

    def standardize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x.reshape(x.shape[0], -1) - self.mean) / self.std

    def destandardize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj) -> "Normalizer":
        return cls(np.array(obj["mean"], dtype=float), np.array(obj["std"], dtype=float))


@dataclass
class WeightedLossConfig:
    epsilon: float = DEFAULT_EPSILON
    alpha: float = 0.5
    normalization_stats: Normalizer | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.normalization_stats is not None and np.any(self.normalization_stats.std <= 0):
            raise ValueError("normalisation stds must be positive")


def l0(pred, gt) -> np.ndarray:
    """Mean squared error over the last axis (one value per sample)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise DimensionError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return np.mean((pred - gt) ** 2, axis=-1)


@dataclass
class WeightedLoss:
    loss: np.ndarray
    dloss_dl0: np.ndarray
    clamped: np.ndarray

    def __iter__(self):
        return iter((self.loss, self.dloss_dl0))


def weighted_loss(l0_value, cfg: WeightedLossConfig) -> WeightedLoss:
    """Hard-sample weighted loss and its derivative with respect to L0.

    Works elementwise on scalars or arrays. The exponent argument is clamped
    at ``EXP_CLAMP``; past the clamp the derivative is that of the clamped
    function (the exponential is constant there).
    """
    x = np.asarray(l0_value, dtype=float)
    if np.any(x < 0):
        raise ValueError("L0 must be non-negative")
    a, eps = cfg.alpha, cfg.epsilon
    arg = x / (1.0 - a)
    clamped = arg > EXP_CLAMP
    e = np.exp(np.minimum(arg, EXP_CLAMP))
    s = x + a
    l1 = s * s * x * e
    poly_grad = 2.0 * s * x + s * s
    exp_grad = np.where(clamped, 0.0, s * s * x / (1.0 - a))
    loss = x + eps * l1
    grad = 1.0 + eps * e * (poly_grad + exp_grad)
    if np.any(clamped):
        log.debug("exponent clamp active on %d value(s)", int(np.sum(clamped)))
    return WeightedLoss(loss, grad, clamped)


def hard_sample_term(l0_value, alpha: float) -> np.ndarray:
    """L1 alone (no clamp), used for diagnostics and property tests."""
    x = np.asarray(l0_value, dtype=float)
    return (x + alpha) ** 2 * x * np.exp(np.minimum(x / (1.0 - alpha), EXP_CLAMP))


def pose_loss(pred, gt, cfg: WeightedLossConfig):
    """Batch loss = mean of per-sample weighted losses; returns (loss, dloss/dpred, l0 values).

    With ``epsilon == 0`` the weight is exactly 1 and the gradient is
    bitwise identical to ``l2_loss``.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    values = l0(pred, gt)
    wl = weighted_loss(values, cfg)
    n, d = pred.shape
    grad = (wl.dloss_dl0[:, None] * 2.0 * (pred - gt)) / (n * d)
    return float(np.mean(wl.loss)), grad, values


def l2_loss(pred, gt):
    """Plain batch MSE; returns (loss, dloss/dpred, per-sample L0)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    values = l0(pred, gt)
    n, d = pred.shape
    grad = (2.0 * (pred - gt)) / (n * d)
    return float(np.mean(values)), grad, values


@dataclass
class AlphaEstimate:
    alpha: float
    mean_l0: float
    clamped: bool


def alpha_from_mean(mean_l0: float) -> AlphaEstimate:
    raw = 1.0 - mean_l0
    alpha = float(np.clip(raw, *ALPHA_BOUNDS))
    clamped = alpha != raw
    if clamped:
        log.info("alpha %.6f clamped to %.2f", raw, alpha)
    return AlphaEstimate(alpha, float(mean_l0), clamped)


def estimate_alpha(predict: Callable[[np.ndarray], np.ndarray], inputs, targets,
                   batch_size: int = 4096) -> AlphaEstimate:
    """alpha = 1 - mean L0 of ``predict`` over the (standardised) training set."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if len(inputs) == 0:
        raise ValueError("cannot estimate alpha on an empty dataset")
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        sl = slice(start, start + batch_size)
        total += float(np.sum(l0(predict(inputs[sl]), targets[sl])))
    return alpha_from_mean(total / len(inputs))


@dataclass
class CrossEntropy:
    loss: float
    grad_logits: np.ndarray
    floored: bool


def fbi_ce_loss(class_probs, gt) -> CrossEntropy:
    """Mean over bones (and samples) of -log p(true class).

    ``class_probs`` has shape (..., m, 3) or flat (N, 3m); ``gt`` holds class
    indices (..., m). The gradient is with respect to the softmax logits,
    shaped like ``class_probs``.
    """
    p = np.asarray(class_probs, dtype=float)
    labels = np.asarray(gt, dtype=np.int64)
    flat = p.shape[-1] != 3
    groups = p.reshape(labels.shape + (3,)) if flat else p
    if groups.shape[:-1] != labels.shape:
        raise DimensionError(f"probabilities {p.shape} do not match labels {labels.shape}")
    picked = np.take_along_axis(groups, labels[..., None], axis=-1)[..., 0]
    floored = bool(np.any(picked < PROB_FLOOR))
    if floored:
        log.warning("true-class probability below %g; clamped", PROB_FLOOR)
    loss = float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))
    grad = (groups - np.eye(3)[labels]) / labels.size
    return CrossEntropy(loss, grad.reshape(p.shape), floored)
