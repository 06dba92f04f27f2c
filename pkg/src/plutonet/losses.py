"""Dice-style training losses and the combined training objective.

Both the supervised and the consistency terms share one functional form:

    loss(p, q) = 2 * (1 - sum(p*q) / (sum(p^2) + sum(q^2) + eps))

Sums run jointly over all pixels and batch elements (a per-sample mode is
available behind a flag). The form attains its minimum of ~1.0 when
p == q, not 0; the constant offset carries no gradient, so logged losses
simply read >= 1 by construction. The total objective is

    total = supervised + alpha * consistency
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError, NumericError, ShapeError


@dataclass
class LossConfig:
    epsilon: float = 1e-6
    alpha: float = 1.0
    per_sample: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"loss epsilon must be > 0, got {self.epsilon}")
        if self.alpha < 0:
            raise ConfigError(f"consistency weight alpha must be >= 0, got {self.alpha}")


@dataclass
class LossBundle:
    l_s: ag.Tensor
    l_c: ag.Tensor
    total: ag.Tensor
    alpha: float

    def as_floats(self):
        return self.l_s.item(), self.l_c.item(), self.total.item()


def dice_pair_loss(p, q, epsilon, per_sample=False):
    """Symmetric dice-style disagreement between two same-shape maps.

    Differentiable in both arguments; ranges over roughly [1, 2] with the
    minimum at p == q and 2 at zero overlap.
    """
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    p, q = ag.astensor(p), ag.astensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {q.shape}")
    if per_sample:
        axes = tuple(range(1, p.ndim))
        overlap = (p * q).sum(axis=axes)
        energy = (p * p).sum(axis=axes) + (q * q).sum(axis=axes)
        return (2.0 * (1.0 - overlap / (energy + epsilon))).mean()
    overlap = (p * q).sum()
    energy = (p * p).sum() + (q * q).sum()
    return 2.0 * (1.0 - overlap / (energy + epsilon))


def consistency_loss(p_m, p_a, cfg):
    """Agreement term between the main and auxiliary predictions."""
    return dice_pair_loss(p_m, p_a, cfg.epsilon, per_sample=cfg.per_sample)


def supervised_loss(p_m, p_t, cfg):
    """Dice-style loss of the main prediction against a binary ground truth."""
    gt = p_t.data if isinstance(p_t, ag.Tensor) else np.asarray(p_t)
    if not np.all((gt == 0) | (gt == 1)):
        raise ShapeError("ground-truth mask must be binary {0,1}")
    return dice_pair_loss(p_m, p_t, cfg.epsilon, per_sample=cfg.per_sample)


def total_loss(l_s, l_c, cfg):
    """Combine the two terms; l_c may be None when consistency is disabled."""
    if not np.isfinite(l_s.item()):
        raise NumericError(f"supervised loss is not finite: {l_s.item()}")
    if l_c is None:
        zero = ag.Tensor(np.zeros((), dtype=l_s.dtype))
        return LossBundle(l_s=l_s, l_c=zero, total=l_s, alpha=cfg.alpha)
    if not np.isfinite(l_c.item()):
        raise NumericError(f"consistency loss is not finite: {l_c.item()}")
    return LossBundle(l_s=l_s, l_c=l_c, total=l_s + cfg.alpha * l_c, alpha=cfg.alpha)
