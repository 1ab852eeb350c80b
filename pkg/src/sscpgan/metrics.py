"""Evaluation metrics: proxy Frechet distance on random conv features, and mIoU.

The Frechet distance here uses a fixed, seeded, randomly initialised conv
encoder instead of an Inception network. Values are only comparable with
each other (same extractor seed, same resolution); they are not comparable
with published FID numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

FEATURE_DIM = 128
_EXTRACTOR_WIDTHS = (32, 64, 128, FEATURE_DIM)


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


class FeatureExtractor:
    """Four conv3x3 + leaky-ReLU + 2x2 average-pool stages, then global average pooling."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = nx.rng_stream(seed, "init", 99)
        self.weights = []
        cin = 3
        for cout in _EXTRACTOR_WIDTHS:
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            self.weights.append(Tensor(w.astype(np.float32)))
            cin = cout

    def features(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = []
        for i in range(0, len(images), batch):
            h = Tensor(images[i:i + batch] * 2 - 1)
            for w in self.weights:
                h = nx.avg_pool2(nx.leaky_relu(nx.conv2d(h, w, pad=1), 0.2))
            out.append(nx.global_avg_pool(h).data)
        return np.concatenate(out).astype(np.float64)


def feature_stats(feats: np.ndarray) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    if len(feats) < 2:
        raise ValueError("need at least 2 samples for feature statistics")
    return FeatureStats(feats.mean(axis=0), np.cov(feats, rowvar=False), len(feats))


def extract_features(images, extractor_seed: int = 0) -> FeatureStats:
    """Mean and unbiased covariance of 128-d proxy features for an N x 3 x H x W batch."""
    images = np.asarray(images)
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    return feature_stats(FeatureExtractor(extractor_seed).features(images))


def matrix_sqrt_psd(s: np.ndarray, sym_tol: float = 1e-9) -> np.ndarray:
    """Symmetric square root of a PSD matrix by eigendecomposition.

    Eigenvalues down to -1e-8 are treated as roundoff and clamped to 0.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"expected a square matrix, got {s.shape}")
    scale = max(np.abs(s).max(), 1.0)
    if np.abs(s - s.T).max() > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    if vals.min(initial=0.0) < -1e-8 * scale:
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {vals.min()})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``, clamped at 0.

    The trace of ``(S_a S_b)^(1/2)`` is computed as the trace of the PSD root
    of ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues.
    """
    if a.mu.shape != b.mu.shape:
        raise ShapeError(f"feature dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    ra = matrix_sqrt_psd(a.sigma)
    inner = ra @ b.sigma @ ra
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T), sym_tol=1e-6)
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * np.trace(cross))
    return max(d, 0.0)


@dataclass
class MIoU:
    miou: float           # mean over images of (foreground IoU + background IoU) / 2
    fg_iou: float         # mean foreground IoU
    inverted_miou: float  # same score for 1 - prediction; diagnostic only


def _class_iou(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    inter = np.count_nonzero(p & g, axis=1)
    union = np.count_nonzero(p | g, axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def miou(pred_masks, gt_masks, threshold: float = 0.5) -> MIoU:
    pred = np.asarray(pred_masks)
    gt = np.asarray(gt_masks)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction/ground-truth shape mismatch: {pred.shape} vs {gt.shape}")
    if len(pred) == 0:
        raise ValueError("no masks to score")
    p = (pred >= threshold).reshape(len(pred), -1)
    g = (gt >= 0.5).reshape(len(gt), -1)
    fg = _class_iou(p, g)
    bg = _class_iou(~p, ~g)
    inv = 0.5 * (_class_iou(~p, g) + _class_iou(p, ~g))
    return MIoU(float(np.mean(0.5 * (fg + bg))), float(np.mean(fg)), float(np.mean(inv)))
