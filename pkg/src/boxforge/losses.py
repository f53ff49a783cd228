"""Segmentation loss: pixel-wise cross-entropy plus a batch-wide soft Dice.

The Dice fractions are computed over all pixels of the batch pooled into one
pseudo-volume. Scoring per image would make classes that are absent from an
image contribute unstable, false-positive-blind fractions; pooling keeps
every class's denominator populated as long as the class occurs anywhere in
the batch. Gradients are taken with respect to the probabilities; a helper
chains them through the softmax for callers holding logits.

Also provides stochastic hard-negative mining: sampling the negatives used
by a classification loss from the pool of highest-scoring (most confusing)
candidates rather than taking the top ones deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "LossBatch",
    "dice_ce_loss",
    "dice_ce_grad",
    "softmax",
    "softmax_chain_grad",
    "mine_hard_negatives",
]


@dataclass
class LossBatch:
    """Dense per-pixel probabilities ``u`` and one-hot targets ``v``.

    Both arrays have shape (pixels, classes), with the pixel axis pooling
    every image of the batch.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ValueError(f"u and v must share a (pixels, classes) shape, got {self.u.shape} / {self.v.shape}")
        if np.any(self.u < 0):
            raise ValueError("probabilities must be nonnegative")
        if np.max(np.abs(self.u.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("each probability row must sum to 1")
        if not np.all((self.v == 0) | (self.v == 1)) or np.any(self.v.sum(axis=1) != 1):
            raise ValueError("v must be one-hot per pixel")

    @property
    def num_pixels(self) -> int:
        return self.u.shape[0]

    @property
    def num_classes(self) -> int:
        return self.u.shape[1]

    @classmethod
    def from_labels(cls, u: np.ndarray, labels: Sequence[int]) -> "LossBatch":
        """Build the one-hot target from an integer label vector."""
        u = np.asarray(u, dtype=float)
        labels = np.asarray(labels, dtype=int)
        if labels.ndim != 1 or labels.shape[0] != u.shape[0]:
            raise ValueError("labels must be a vector with one entry per pixel")
        if labels.min() < 0 or labels.max() >= u.shape[1]:
            raise ValueError("label outside class range")
        v = np.zeros_like(u)
        v[np.arange(u.shape[0]), labels] = 1.0
        return cls(u=u, v=v)


def _dice_fractions(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class overlap fraction with its numerator and denominator."""
    num = (u * v).sum(axis=0)
    den = u.sum(axis=0) + v.sum(axis=0)
    frac = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return frac, num, den


def dice_ce_loss(batch: LossBatch, dice_eps: float = 0.0) -> float:
    """Mean cross-entropy minus the scaled sum of batch-wide Dice fractions.

    The minimum is -1, reached exactly when ``u`` equals the one-hot target
    and every class occurs in the batch. A class with an empty denominator
    contributes 0 (only possible for hard 0/1 inputs). ``dice_eps`` adds an
    optional denominator floor for pathological all-background batches; the
    default keeps the formula exact.
    """
    u, v = batch.u, batch.v
    true_probs = u[v.astype(bool)]
    with np.errstate(divide="ignore"):
        ce = float(-np.log(true_probs).mean())
    frac, num, den = _dice_fractions(u, v)
    if dice_eps > 0.0:
        frac = num / (den + dice_eps)
    return ce - (2.0 / batch.num_classes) * float(frac.sum())


def dice_ce_grad(batch: LossBatch) -> np.ndarray:
    """Closed-form gradient of ``dice_ce_loss`` with respect to ``u``.

    Per entry: -v/(I*u) from the cross-entropy plus
    -(2/K) * (v*den - num) / den**2 from the Dice fractions, with den and
    num the per-class batch sums.
    """
    u, v = batch.u, batch.v
    n_pix, n_cls = batch.num_pixels, batch.num_classes
    with np.errstate(divide="ignore", invalid="ignore"):
        ce_grad = np.where(v > 0, -v / (n_pix * u), 0.0)
    _, num, den = _dice_fractions(u, v)
    safe_den = np.where(den > 0, den, 1.0)
    dice_grad = np.where(den > 0, (v * safe_den - num) / safe_den**2, 0.0)
    return ce_grad - (2.0 / n_cls) * dice_grad


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with the usual max-shift for stability."""
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_chain_grad(probs: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Chain a gradient in probability space back through the softmax.

    ``probs`` are the softmax outputs; returns the gradient with respect to
    the logits: u * (g - <g, u>) per row.
    """
    probs = np.asarray(probs, dtype=float)
    grad_u = np.asarray(grad_u, dtype=float)
    inner = (grad_u * probs).sum(axis=1, keepdims=True)
    return probs * (grad_u - inner)


def mine_hard_negatives(
    neg_scores: Sequence[float],
    n_select: int,
    pool_factor: float = 2.0,
    rng_seed: int = 0,
) -> list[int]:
    """Sample negatives from the pool of hardest (highest-scoring) candidates.

    The pool holds the top ``ceil(pool_factor * n_select)`` scores;
    ``n_select`` indices are drawn from it uniformly without replacement,
    deterministically for a given seed. When the pool is no larger than the
    request, it is returned whole with no sampling (``pool_factor = 1``
    degenerates to plain top-k mining). Returned indices are ordered by
    descending score.
    """
    scores = np.asarray(neg_scores, dtype=float)
    if n_select < 0:
        raise ValueError("n_select must be nonnegative")
    if n_select > len(scores):
        raise ValueError(f"cannot select {n_select} from {len(scores)} negatives")
    order = np.argsort(-scores, kind="stable")
    pool_size = min(len(scores), math.ceil(pool_factor * n_select))
    pool = order[:pool_size]
    if pool_size <= n_select:
        return [int(i) for i in pool]
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(pool, size=n_select, replace=False)
    chosen = sorted(chosen, key=lambda i: (-scores[i], i))
    return [int(i) for i in chosen]
