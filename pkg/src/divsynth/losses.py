"""Training losses: adversarial pair, content/hindsight, and the
segmentwise hinged diversity objective.

All image distances are mean-normalized: the global distance is the mean
absolute difference over every pixel and channel, and the segmentwise
distance restricts that mean to the pixels of one class. This keeps the
per-class distortion bound and the diversity weight independent of image
resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import SemanticLayout, NoiseVector
from .models import FeatureExtractor


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 100.0          # L1 anchor weight in the generator loss
    beta: float = 10.0            # diversity weight in the combined objective
    lambda_c: float | Sequence[float] = 0.3   # per-class distortion bound
    lambda_k: Sequence[float] = (0.5, 0.5)    # content-layer weights
    log_eps: float = 1e-7

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise LossError("alpha and beta must be >= 0")
        lam = np.atleast_1d(np.asarray(self.lambda_c, dtype=np.float64))
        if (lam < 0).any():
            raise LossError("every lambda_c must be >= 0")
        if sum(self.lambda_k) <= 0:
            raise LossError("lambda_k weights must sum to a positive value")

    def lambda_for(self, classes: int) -> np.ndarray:
        return resolve_lambda(self.lambda_c, classes)


def resolve_lambda(lambda_c: float | Sequence[float], classes: int) -> np.ndarray:
    """Broadcast a scalar bound to all classes, or validate a per-class list."""
    lam = np.atleast_1d(np.asarray(lambda_c, dtype=np.float64))
    if (lam < 0).any():
        raise LossError("every lambda_c must be >= 0")
    if lam.size == 1:
        return np.full(classes, float(lam[0]))
    if lam.size != classes:
        raise LossError(f"lambda_c has {lam.size} entries for {classes} classes")
    return lam


def _ones_like(x: ad.Tensor) -> ad.Tensor:
    return ad.wrap(np.ones(x.shape, dtype=x.data.dtype))


def global_l1(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Mean |a-b| over all pixels and channels."""
    return ad.reduce_mean(ad.absval(ad.sub(a, b)))


def _class_mask(layout: SemanticLayout, c: int, dtype) -> np.ndarray:
    cache = layout.__dict__.setdefault("_mask_cache", {})
    key = (c, np.dtype(dtype).str)
    mask = cache.get(key)
    if mask is None:
        flat = (layout.pixels == c).astype(dtype)
        mask = np.broadcast_to(flat, (3,) + flat.shape)
        cache[key] = mask
    return mask


def segmentwise_l1(a: ad.Tensor, b: ad.Tensor, layout: SemanticLayout, c: int) -> ad.Tensor:
    """Mean |a-b| restricted to pixels of class c; 0 if the class is absent."""
    if not 0 <= c < layout.classes:
        raise LossError(f"class index {c} out of range for {layout.classes} classes")
    if a.shape != b.shape or a.shape[1:] != (layout.height, layout.width):
        raise LossError(f"segmentwise_l1: shapes {a.shape}/{b.shape} do not match "
                        f"layout {layout.height}x{layout.width}")
    mask = ad.wrap(_class_mask(layout, c, a.data.dtype))
    return ad.masked_mean(ad.absval(ad.sub(a, b)), mask)


def loss_discriminator(d_real: ad.Tensor, d_fake: ad.Tensor, eps: float = 1e-7) -> ad.Tensor:
    """Adversarial objective the discriminator maximizes:
    mean log D(l,i) + mean log(1 - D(l,G(l,n)))."""
    real_term = ad.reduce_mean(ad.log_clamped(d_real, eps))
    fake_term = ad.reduce_mean(ad.log_clamped(ad.sub(_ones_like(d_fake), d_fake), eps))
    return ad.add(real_term, fake_term)


def loss_generator(d_fake: ad.Tensor, fake: ad.Tensor, real: ad.Tensor,
                   alpha: float = 100.0, eps: float = 1e-7) -> ad.Tensor:
    """Generator objective: mean log(1 - D) plus the weighted L1 anchor."""
    adv = ad.reduce_mean(ad.log_clamped(ad.sub(_ones_like(d_fake), d_fake), eps))
    return ad.add(adv, ad.scale(global_l1(fake, real), alpha))


def loss_content(fake: ad.Tensor, real: ad.Tensor | Sequence[ad.Tensor],
                 phi: FeatureExtractor, lambda_k: Sequence[float]) -> ad.Tensor:
    """Weighted mean-L1 distance between extractor activations.

    ``real`` may be the ground-truth image or its precomputed feature list
    (cheaper when the same target is reused every epoch).
    """
    fake_feats = phi.features(fake)
    real_feats = real if isinstance(real, (list, tuple)) else phi.features(real)
    if len(lambda_k) != len(fake_feats):
        raise LossError(f"lambda_k has {len(lambda_k)} weights for {len(fake_feats)} stages")
    total = None
    for lam, ff, rf in zip(lambda_k, fake_feats, real_feats):
        term = ad.scale(global_l1(ff, rf), float(lam))
        total = term if total is None else ad.add(total, term)
    return total


def loss_hindsight(outputs: Sequence[ad.Tensor], real: ad.Tensor | Sequence[ad.Tensor],
                   phi: FeatureExtractor, lambda_k: Sequence[float]) -> ad.Tensor:
    """Best-of-n content loss: only the output closest to the ground truth
    is penalized (ties resolve to the lowest index)."""
    if len(outputs) == 0:
        raise LossError("loss_hindsight: empty output list")
    real_feats = real if isinstance(real, (list, tuple)) else phi.features(real)
    losses = [loss_content(o, real_feats, phi, lambda_k) for o in outputs]
    best = int(np.argmin([float(l.data) for l in losses]))
    return losses[best]


def diversity_unconditional(g0: ad.Tensor, gn: ad.Tensor, noise: NoiseVector) -> ad.Tensor:
    """Unbounded diversity reward: -|n| * mean L1 distance between the
    zero-noise and noise-fed outputs. |n| is the mean of |n^c|."""
    mag = float(np.mean(np.abs(noise.entries))) if len(noise) else 0.0
    return ad.scale(global_l1(g0, gn), -mag)


def diversity_segmentwise(g0: ad.Tensor, gn: ad.Tensor, layout: SemanticLayout,
                          noise: NoiseVector) -> ad.Tensor:
    """Per-segment diversity reward: -sum_c |n^c| * segment distance."""
    if len(noise) != layout.classes:
        raise LossError(f"noise has {len(noise)} entries for {layout.classes} classes")
    total = None
    for c in layout.present_classes():
        mag = float(abs(noise.entries[c]))
        term = ad.scale(segmentwise_l1(g0, gn, layout, c), -mag)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise LossError("layout has no pixels")
    return total


def diversity_hinged(g0: ad.Tensor, gn: ad.Tensor, layout: SemanticLayout,
                     noise: NoiseVector, lambda_c: float | Sequence[float] = 0.3) -> ad.Tensor:
    """Consistency-constrained diversity loss:
    sum_c |n^c| * max(0, lambda_c - segment distance).

    Zero exactly when every present class either has zero noise or a
    segment distance at or beyond its bound; absent classes contribute 0.
    """
    if len(noise) != layout.classes:
        raise LossError(f"noise has {len(noise)} entries for {layout.classes} classes")
    lam = resolve_lambda(lambda_c, layout.classes)
    dt = g0.data.dtype
    total = None
    for c in layout.present_classes():
        mag = float(abs(noise.entries[c]))
        if mag == 0.0:
            continue
        seg = segmentwise_l1(g0, gn, layout, c)
        bound = ad.wrap(np.asarray(lam[c], dtype=dt))
        term = ad.scale(ad.hinge(ad.sub(bound, seg)), mag)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.wrap(np.asarray(0.0, dtype=dt))
    return total


def objective_combined(base_loss: ad.Tensor, div_loss: ad.Tensor, beta: float) -> ad.Tensor:
    """Final training objective: base + beta * diversity."""
    if beta < 0:
        raise LossError("beta must be >= 0")
    return ad.add(base_loss, ad.scale(div_loss, beta))
