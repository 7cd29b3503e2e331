"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from worstcase_fsl.data import DatasetStore, generate_synthetic, split_dataset
from worstcase_fsl.losses import label_smoothed_ce, stability_regularization
from worstcase_fsl.model import (
    BackboneConfig,
    backbone_backward,
    backbone_forward,
    clone_frozen_reference,
    cosine_logits,
    cosine_logits_backward,
    init_model,
)

KINK_MARGIN = 1e-3


def tiny_store(seed=0, n_classes=10, per_class=12, dim=6, split=(4, 2, 4)) -> DatasetStore:
    """Ten well-separated classes in 6-D, split 4 base / 2 val / 4 novel."""
    raw = generate_synthetic(n_classes, per_class, dim, cluster_spread=0.5, seed=seed,
                             separation=4.0, latent_dim=None)
    return split_dataset(raw, *split, seed=seed)


def preacts(model, x):
    _, cache = backbone_forward(model, x, cache=True)
    return np.concatenate([z.ravel() for group in cache.preacts for z in group])


class LossProblem:
    """A (reference, tuned backbone, head, batch) configuration with closed-over losses.

    ``kind`` selects the objective: ``"ce"``, ``"sr"`` or ``"total"``
    (ce + alpha * sr). The SR batch is separate from the labelled batch.
    """

    def __init__(self, seed, kind="total", alpha=0.1, perturb=0.3):
        rng = np.random.default_rng(seed)
        d_in = int(rng.integers(2, 6))
        dims = tuple(int(d) for d in rng.integers(2, 6, size=int(rng.integers(1, 4))))
        n_cls = int(rng.integers(2, 5))
        batch = int(rng.integers(1, 5))
        cfg = BackboneConfig(d_in, dims, int(rng.integers(1, 3)))
        while True:
            model, head = init_model(cfg, n_cls, int(rng.integers(2**31)), scale=float(rng.uniform(1, 10)))
            ref = clone_frozen_reference(model)
            # move the tuned copy away from the reference so the SR gradient is non-zero
            for p in model.params():
                p.value += perturb * rng.standard_normal(p.value.shape) * np.sqrt(np.mean(p.value ** 2))
            x = rng.standard_normal((batch, d_in))
            x_sr = rng.standard_normal((batch + 1, d_in))
            y = rng.integers(0, n_cls, size=batch)
            # finite differences need a point away from relu kinks and with live features
            z = np.concatenate([preacts(model, x), preacts(model, x_sr), preacts(ref, x_sr)])
            if np.min(np.abs(z)) < KINK_MARGIN:
                continue
            feats = [backbone_forward(model, x), backbone_forward(model, x_sr), backbone_forward(ref, x_sr)]
            if min(np.linalg.norm(f, axis=1).min() for f in feats) < 1e-3:
                continue
            break
        self.model, self.head, self.ref = model, head, ref
        self.x, self.x_sr, self.y = x, x_sr, y
        self.kind, self.alpha = kind, alpha
        self.epsilon = float(rng.uniform(0, 0.3))
        self.f_ref = backbone_forward(ref, x_sr)

    @property
    def params(self):
        return self.model.params() + [self.head.weights]

    def loss(self) -> float:
        ce = sr = 0.0
        if self.kind in ("ce", "total"):
            ce, _ = label_smoothed_ce(cosine_logits(self.head, backbone_forward(self.model, self.x)), self.y,
                                      self.epsilon)
        if self.kind in ("sr", "total"):
            sr, _ = stability_regularization(self.f_ref, backbone_forward(self.model, self.x_sr))
        weight = self.alpha if self.kind == "total" else 1.0
        return ce + weight * sr

    def backward(self):
        """Populate ``.grad`` of every tuned parameter; returns the loss."""
        for p in self.params:
            p.zero_grad()
        total = 0.0
        if self.kind in ("ce", "total"):
            feats, fc = backbone_forward(self.model, self.x, cache=True)
            logits, hc = cosine_logits(self.head, feats, cache=True)
            ce, gl = label_smoothed_ce(logits, self.y, self.epsilon)
            backbone_backward(self.model, fc, cosine_logits_backward(self.head, hc, gl))
            total += ce
        if self.kind in ("sr", "total"):
            weight = self.alpha if self.kind == "total" else 1.0
            feats, fc = backbone_forward(self.model, self.x_sr, cache=True)
            sr, g = stability_regularization(self.f_ref, feats)
            backbone_backward(self.model, fc, weight * g)
            total += weight * sr
        return total
