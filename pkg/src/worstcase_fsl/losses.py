"""Classification loss, feature-stability penalty, and their weighted sum.

Every loss returns ``(value, grad)`` where ``grad`` is taken w.r.t. the loss
input (logits or tuned features), already divided by the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .numcore import as_tensor, log_softmax

NORM_EPS = 1e-12
# unit-vector residues below this are indistinguishable from rounding noise
ROUNDING_FLOOR = 1e-14


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 0.1
    alpha: float = 0.1

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")


def smoothed_targets(labels, n_classes, epsilon):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise ValueError(f"label {int(bad)} out of range [0, {n_classes})")
    t = np.full((labels.size, n_classes), epsilon / n_classes)
    t[np.arange(labels.size), labels] += 1.0 - epsilon
    return t


def label_smoothed_ce(logits, labels, epsilon=0.1):
    """Mean cross-entropy against ``(1-eps)*onehot + eps/N`` targets."""
    z = as_tensor(logits)
    if z.ndim != 2:
        raise DimensionError(f"logits must be batch x classes, got shape {z.shape}")
    t = smoothed_targets(labels, z.shape[1], epsilon)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"{t.shape[0]} labels for {z.shape[0]} logit rows")
    logp = log_softmax(z, axis=1)
    batch = z.shape[0]
    loss = -np.sum(t * logp) / batch
    grad = (np.exp(logp) - t) / batch
    return float(loss), grad


def stability_regularization(f_ref, f_tuned):
    """Mean negative cosine between frozen and tuned features.

    Only ``f_tuned`` receives a gradient. Rows with norm below 1e-12 raise.
    """
    a, b = as_tensor(f_ref), as_tensor(f_tuned)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"reference {a.shape} and tuned {b.shape} features must be equal 2-D shapes")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    for norms, which in ((na, "reference"), (nb, "tuned")):
        bad = np.flatnonzero(norms < NORM_EPS)
        if bad.size:
            raise DegenerateInputError(f"{which} feature row {int(bad[0])} has zero norm")
    ua = a / na[:, None]
    ub = b / nb[:, None]
    # dividing by the computed unit norms makes identical directions give
    # exactly 1 (sqrt(s*s) == s in IEEE arithmetic)
    cos = np.sum(ua * ub, axis=1) / np.sqrt(np.sum(ua * ua, axis=1) * np.sum(ub * ub, axis=1))
    cos = np.clip(cos, -1.0, 1.0)
    batch = a.shape[0]
    loss = -float(np.mean(cos))
    # d(-cos)/db = -(ua - cos*ub)/|b|. When a and b nearly align the rounding
    # residue along ub dominates: project it out once more, and treat a
    # rejection at rounding level as the exact zero it stands for.
    r = ua - cos[:, None] * ub
    r -= np.sum(r * ub, axis=1, keepdims=True) / np.sum(ub * ub, axis=1, keepdims=True) * ub
    r[np.linalg.norm(r, axis=1) < ROUNDING_FLOOR] = 0.0
    grad = -r / nb[:, None] / batch
    return loss, grad


def combined_loss(ce_loss, sr_loss, alpha=0.1):
    return ce_loss + alpha * sr_loss
