"""The three distillation losses and their weighted joint objective.

KL-divergence matching is deliberately absent: both distillation targets are
trained with elementwise mean-squared error, and hard labels with negative
log-likelihood.  Each loss is a per-batch mean so the joint weights keep the
same meaning across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeMismatchError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights for cross-entropy (alpha), representation MSE (beta), and
    logit MSE (gamma)."""

    alpha: float = 10.0
    beta: float = 10.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ContractError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ContractError("at least one loss weight must be positive")


def cross_entropy(p_s: Tensor, labels) -> Tensor:
    """Mean over the batch of -log p[i, label_i], log clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.intp)
    batch, num_classes = p_s.data.shape
    if labels.shape != (batch,):
        raise ShapeMismatchError(
            f"labels shape {labels.shape} does not match batch {batch}"
        )
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(
            f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    picked = ad.gather_cols(p_s, labels)
    return ad.scale(ad.tsum(ad.log_clamped(picked, PROB_FLOOR)), -1.0 / batch)


def _half_mse(pred: Tensor, target) -> Tensor:
    target = ad.as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatchError(
            f"shape mismatch {pred.data.shape} vs {target.data.shape}"
        )
    diff = ad.sub(pred, target)
    batch = pred.data.shape[0]
    return ad.scale(ad.tsum(ad.mul(diff, diff)), 0.5 / batch)


def logit_loss(r_s: Tensor, target_logits) -> Tensor:
    """Batch mean of the half squared norm between scores and teacher logits."""
    return _half_mse(r_s, target_logits)


def representation_loss(z_tilde: Tensor, z_t) -> Tensor:
    """Batch mean of the half squared norm between projected student and
    teacher hidden representations."""
    return _half_mse(z_tilde, z_t)


def joint_loss(weights: LossWeights, ce: Tensor | None = None,
               rl: Tensor | None = None, ll: Tensor | None = None) -> Tensor:
    """alpha*ce + beta*rl + gamma*ll; absent terms contribute nothing."""
    terms = []
    for weight, term in ((weights.alpha, ce), (weights.beta, rl),
                         (weights.gamma, ll)):
        if term is not None:
            terms.append(ad.scale(term, weight))
    if not terms:
        raise ContractError("joint_loss requires at least one term")
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total
