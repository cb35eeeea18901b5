"""Differentiable training objectives over predicted launderer probabilities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import ConfigError, ContractError
from . import autodiff as ad
from .autodiff import Tensor

MCC_EPS = 1e-12
PROB_DELTA = 1e-12


@dataclass(frozen=True)
class ConfusionWeights:
    w_tp: float = 1.0
    w_fp: float = 2.0
    w_tn: float = 1.0
    w_fn: float = 2.0

    def __post_init__(self):
        for k in ("w_tp", "w_fp", "w_tn", "w_fn"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"mcc weight {k} must be positive, got {getattr(self, k)}")


UNIT_WEIGHTS = ConfusionWeights(1.0, 1.0, 1.0, 1.0)


class SoftConfusion(NamedTuple):
    tp: Tensor
    fp: Tensor
    tn: Tensor
    fn: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return tuple(float(t.value) for t in self)


def _flat(p) -> Tensor:
    p = ad.as_tensor(p)
    return ad.reshape(p, (p.size,)) if p.value.ndim != 1 else p


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != n:
        raise ContractError(f"{n} probabilities but {y.shape[0]} labels")
    return y


def soft_confusion(probabilities, labels) -> SoftConfusion:
    """Expected confusion counts when each prediction is positive with probability p."""
    p = _flat(probabilities)
    y = _labels(labels, p.size)
    q = 1.0 - p
    return SoftConfusion(
        tp=ad.tsum(p * y), fp=ad.tsum(p * (1.0 - y)),
        tn=ad.tsum(q * (1.0 - y)), fn=ad.tsum(q * y),
    )


def weighted_mcc(conf: SoftConfusion, weights: ConfusionWeights = UNIT_WEIGHTS) -> Tensor:
    tp, fp, tn, fn = conf
    w = weights
    num = tp * tn - fp * fn
    den = (
        (tp * w.w_tp + fp * w.w_fp) * (tp * w.w_tp + fn * w.w_fn)
        * (tn * w.w_tn + fp * w.w_fp) * (tn * w.w_tn + fn * w.w_fn)
    )
    return num / ad.sqrt(den + MCC_EPS)


def weighted_mcc_loss(conf: SoftConfusion, weights: ConfusionWeights = UNIT_WEIGHTS) -> Tensor:
    """``1 - MCC_w``; ranges over [0, 2]."""
    return 1.0 - weighted_mcc(conf, weights)


def cross_entropy_loss(probabilities, labels, class_weights=(1.0, 1.0)) -> Tensor:
    """Mean binary cross-entropy; ``class_weights`` is ``(negative, positive)``."""
    p = ad.clip(_flat(probabilities), PROB_DELTA, 1.0 - PROB_DELTA)
    y = _labels(labels, p.size)
    w0, w1 = class_weights
    terms = (w1 * y) * ad.log(p) + (w0 * (1.0 - y)) * ad.log(1.0 - p)
    return -ad.mean(terms)


def focal_loss(probabilities, labels, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    if not 0.0 < alpha < 1.0 or gamma < 0:
        raise ConfigError(f"focal loss needs alpha in (0,1) and gamma >= 0, got {alpha}, {gamma}")
    p = ad.clip(_flat(probabilities), PROB_DELTA, 1.0 - PROB_DELTA)
    y = _labels(labels, p.size)
    p_t = p * y + (1.0 - p) * (1.0 - y)
    term = ad.log(p_t)
    if gamma != 0:
        term = ad.power(1.0 - p_t, gamma) * term
    return -alpha * ad.mean(term)


LossFn = Callable[[Tensor, np.ndarray], Tensor]


def make_loss(name: str = "mcc", weights: ConfusionWeights | None = None,
              alpha: float = 0.25, gamma: float = 2.0,
              class_weights: tuple[float, float] = (1.0, 1.0)) -> LossFn:
    if name == "mcc":
        w = weights or ConfusionWeights()
        return lambda p, y: weighted_mcc_loss(soft_confusion(p, y), w)
    if name == "cross_entropy":
        return lambda p, y: cross_entropy_loss(p, y, class_weights)
    if name == "focal":
        focal_loss(np.array([0.5]), np.array([1]), alpha, gamma)  # validate eagerly
        return lambda p, y: focal_loss(p, y, alpha, gamma)
    raise ConfigError(f"unknown loss {name!r}; expected cross_entropy, focal or mcc")
