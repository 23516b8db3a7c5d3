"""Loss functions with analytic gradients.

The supervised contrastive loss over a batch of unit-norm embeddings z
with labels y sums, over every anchor i that has at least one same-label
partner, the mean over its positives p of
-log( exp(z_i . z_p / tau) / sum_{a != i} exp(z_i . z_a / tau) ).
Anchors without positives contribute zero to the value but still appear in
other anchors' denominators, and therefore receive gradient. All
exponentials go through max-subtracted log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    anchors_used: int = 0


def _validate_embeddings(z: np.ndarray, labels: np.ndarray, norm_tol: float):
    if z.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {z.shape}")
    n = z.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 samples")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    norms = np.sqrt((z * z).sum(axis=1))
    if np.abs(norms - 1.0).max() > norm_tol:
        raise ValueError(
            f"embedding rows must be unit norm within {norm_tol}, "
            f"worst deviation {np.abs(norms - 1.0).max():.3g}"
        )


def supcon_loss(
    z: np.ndarray,
    labels: np.ndarray,
    tau: float = 0.07,
    norm_tol: float = 1e-4,
) -> LossOutput:
    """Supervised contrastive loss and its exact gradient w.r.t. z.

    Computed in float64. The gradient of the total value is
    (G + G^T) z / tau where G_ij = q_ij - [j in P(i)] / |P(i)| for active
    anchors and q is the anchor's softmax over all other batch members.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    _validate_embeddings(z, labels, norm_tol)
    n = z.shape[0]

    sim = (z @ z.T) / tau
    off_diag = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag

    row_max = np.where(off_diag, sim, -np.inf).max(axis=1)
    expd = np.exp(sim - row_max[:, None]) * off_diag
    denom = expd.sum(axis=1)
    log_denom = np.log(denom) + row_max
    log_prob = sim - log_denom[:, None]

    pos_counts = pos.sum(axis=1)
    active = pos_counts > 0
    safe_counts = np.where(active, pos_counts, 1)
    per_anchor = -(np.where(pos, log_prob, 0.0).sum(axis=1)) / safe_counts
    value = float(per_anchor[active].sum())

    q = expd / denom[:, None]
    g = np.where(active[:, None], q - pos / safe_counts[:, None], 0.0)
    grad = (g + g.T) @ z / tau
    return LossOutput(value=value, grad=grad, anchors_used=int(active.sum()))


def supcon_value(z: np.ndarray, labels: np.ndarray, tau: float = 0.07) -> float:
    return supcon_loss(z, labels, tau).value


def supcon_grad_check(
    z: np.ndarray, labels: np.ndarray, tau: float = 0.07, step: float = 1e-5
) -> float:
    """Max relative error of the analytic gradient vs central differences."""
    z = np.asarray(z, dtype=np.float64).copy()
    analytic = supcon_loss(z, labels, tau).grad
    worst = 0.0
    flat = z.reshape(-1)
    aflat = analytic.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = supcon_loss(z, labels, tau, norm_tol=np.inf).value
        flat[i] = orig - step
        f_minus = supcon_loss(z, labels, tau, norm_tol=np.inf).value
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        denomination = max(abs(aflat[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(aflat[i] - numeric) / denomination)
    return worst


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> LossOutput:
    """Mean negative log-likelihood of softmax probabilities.

    The gradient is taken w.r.t. the logits through the fused softmax
    Jacobian, (probs - onehot) / N, which is what the training loop feeds
    beneath the softmax layer.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ValueError(f"probs must be 2-D, got shape {probs.shape}")
    n, c = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ValueError("probability rows must sum to 1 within 1e-6")
    picked = probs[np.arange(n), labels]
    value = float(-np.log(picked + 1e-12).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return LossOutput(value=value, grad=grad, anchors_used=n)
