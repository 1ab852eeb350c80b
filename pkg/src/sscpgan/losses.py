"""Adversarial and self-supervised losses, IoU, and the IoU-gated loss weight."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

LAMBDA_LOW_IOU = 0.5
LAMBDA_MID_IOU = 0.1
LAMBDA_HIGH_IOU = 0.0
IOU_LOW = 0.2
IOU_HIGH = 0.8
LAMBDA_VALUES = (LAMBDA_HIGH_IOU, LAMBDA_MID_IOU, LAMBDA_LOW_IOU)


@dataclass
class LossBundle:
    L_D: float
    L_G: float
    L_ss: float
    lam: float
    L_D_total: float
    schedule_iou: float


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """``-E[log s(D(real))] - E[log(1 - s(D(fake)))]``; minimising it maximises the GAN value."""
    return nx.bce_with_logits(real_logits, 1.0) + nx.bce_with_logits(fake_logits, 0.0)


def generator_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss ``-E[log s(D(composite))]``."""
    return nx.bce_with_logits(fake_logits, 1.0)


def self_supervised_loss(perpixel: Tensor, pseudo_mask, invert: bool = True) -> Tensor:
    """BCE between the decoder's per-pixel map on the composite and ``1 - pseudo_mask``.

    With ``invert=False`` the pseudo-label itself is the target (ablation).
    """
    target = np.asarray(pseudo_mask, dtype=perpixel.dtype)
    if target.shape != perpixel.shape:
        raise ShapeError(f"per-pixel map {perpixel.shape} vs pseudo-label {target.shape}")
    if invert:
        target = 1 - target
    return nx.binary_cross_entropy(perpixel, target)


def total_discriminator_loss(L_D, L_ss, lam: float):
    if lam not in LAMBDA_VALUES:
        raise ValueError(f"loss weight must be one of {LAMBDA_VALUES}, got {lam}")
    if lam == 0.0:
        return L_D
    return L_D + L_ss * lam


def lambda_schedule(iou: float) -> float:
    """Self-supervision weight for a given IoU.

    Below 0.2 the weight is 0.5, above 0.8 it is 0, and the closed middle
    band [0.2, 0.8] gets 0.1.
    """
    if not 0.0 <= iou <= 1.0 or iou != iou:
        raise ValueError(f"IoU must lie in [0, 1], got {iou}")
    if iou < IOU_LOW:
        return LAMBDA_LOW_IOU
    if iou > IOU_HIGH:
        return LAMBDA_HIGH_IOU
    return LAMBDA_MID_IOU


def iou(a, b, threshold: float = 0.5) -> float:
    """Foreground IoU of two masks binarised at ``threshold`` (``>=``); two empty masks give 1."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"iou shape mismatch: {a.shape} vs {b.shape}")
    fa = a >= threshold
    fb = b >= threshold
    union = np.count_nonzero(fa | fb)
    if union == 0:
        return 1.0
    return np.count_nonzero(fa & fb) / union


def batch_iou(a, b, threshold: float = 0.5) -> np.ndarray:
    """Per-sample IoU over the leading axis."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"iou shape mismatch: {a.shape} vs {b.shape}")
    fa = (a >= threshold).reshape(len(a), -1)
    fb = (b >= threshold).reshape(len(b), -1)
    inter = np.count_nonzero(fa & fb, axis=1)
    union = np.count_nonzero(fa | fb, axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))
