"""Diagonal Gaussian heads: bounded variance transforms, reparameterized
sampling, closed-form KL, and the likelihood terms shared by both losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Rng, Tensor, log, logsumexp, mean_over, sigmoid, softplus, sqrt, sum_over

BOUNDED_SIGMOID = "bounded_sigmoid"
BOUNDED_SOFTPLUS = "bounded_softplus"
DETERMINISTIC = "deterministic"

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DiagonalGaussian:
    """Mean + raw scale, with the transform tag selecting the variance map.

    bounded_sigmoid:  var = 0.1 + 0.9 * sigmoid(raw)   in (0.1, 1.0)
    bounded_softplus: var = 0.1 + 0.9 * softplus(raw)  in (0.1, inf)
    deterministic:    var = 0 exactly (raw_scale ignored)
    """

    mean: Tensor
    raw_scale: Tensor | None
    transform: str = BOUNDED_SIGMOID

    def __post_init__(self):
        if self.transform not in (BOUNDED_SIGMOID, BOUNDED_SOFTPLUS, DETERMINISTIC):
            raise ContractError(f"unknown transform '{self.transform}'")
        if self.transform != DETERMINISTIC:
            if self.raw_scale is None:
                raise ContractError("stochastic Gaussian needs a raw_scale")
            if self.raw_scale.shape != self.mean.shape:
                raise ShapeError(
                    f"mean shape {self.mean.shape} != raw_scale shape {self.raw_scale.shape}"
                )

    def variance(self) -> Tensor:
        if self.transform == DETERMINISTIC:
            return Tensor(np.zeros(self.mean.shape))
        if self.transform == BOUNDED_SIGMOID:
            return 0.1 + 0.9 * sigmoid(self.raw_scale)
        return 0.1 + 0.9 * softplus(self.raw_scale)

    def stddev(self) -> Tensor:
        return sqrt(self.variance())


@dataclass
class LatentSample:
    """One reparameterized draw: value == mean + stddev * noise, exactly."""

    value: Tensor
    source: DiagonalGaussian
    noise: np.ndarray


def reparameterize(g: DiagonalGaussian, rng: Rng | None = None,
                   noise: np.ndarray | None = None) -> LatentSample:
    """Differentiable non-centered draw; gradient reaches mean and raw_scale."""
    if g.transform == DETERMINISTIC:
        raise ContractError("cannot reparameterize a deterministic Gaussian")
    if noise is None:
        if rng is None:
            raise ContractError("reparameterize needs an rng or explicit noise")
        noise = rng.normal(g.mean.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ShapeError(f"noise shape {noise.shape} != mean shape {g.mean.shape}")
    value = g.mean + g.stddev() * Tensor(noise)
    return LatentSample(value=value, source=g, noise=noise)


def kl_divergence(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis.

    Returns a tensor over the leading (batch) axes; scalar for 1-D inputs.
    """
    if q.transform == DETERMINISTIC or p.transform == DETERMINISTIC:
        raise ContractError("KL undefined for deterministic operands")
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"KL operand shapes differ: {q.mean.shape} vs {p.mean.shape}")
    vq, vp = q.variance(), p.variance()
    dmu = q.mean - p.mean
    terms = vq / vp + dmu * dmu / vp - 1.0 + log(vp) - log(vq)
    return 0.5 * sum_over(terms, axis=-1)


def gaussian_nll(pred: DiagonalGaussian, y: Tensor) -> Tensor:
    """Negative log density of y, summed over the output dim, averaged over
    every remaining axis (batch instances and target points)."""
    if pred.transform != BOUNDED_SOFTPLUS:
        raise ContractError("predictive head must use the bounded softplus transform")
    if y.shape != pred.mean.shape:
        raise ShapeError(f"y shape {y.shape} != predictive mean shape {pred.mean.shape}")
    var = pred.variance()
    diff = y - pred.mean
    point = 0.5 * (LOG_2PI + log(var) + diff * diff / var)
    per_point = sum_over(point, axis=-1)
    return mean_over(per_point)


def categorical_nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    way = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} != logits batch shape {logits.shape[:-1]}")
    if labels.min() < 0 or labels.max() >= way:
        raise ContractError(f"label out of range [0, {way})")
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    lse = logsumexp(logits, axis=-1)
    picked = sum_over(logits * Tensor(onehot), axis=-1)
    return mean_over(lse - picked)
