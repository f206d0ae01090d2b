"""Learnable label beliefs and the masked three-part loss for noisy clients.

Each sample of a detected noisy client carries a logit vector whose softmax
is the current estimate of its true label distribution.  Local training
optimizes model weights and beliefs jointly from a combined loss:
classification against the soft belief, compatibility with the original
observed label, and entropy minimization restricted by a small-loss mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import softmax

PROB_FLOOR = 1e-12


@dataclass
class LabelBelief:
    """Per-sample learnable label logits and the constant used at init/merge."""

    tilde_y: np.ndarray  # (C,)
    scale: float  # K

    def soft(self) -> np.ndarray:
        """Current soft label distribution softmax(tilde_y)."""
        return softmax(self.tilde_y)


def init_belief(observed_label: int, num_classes: int, scale: float) -> LabelBelief:
    """Start the belief at scale * onehot(observed label)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    tilde = np.zeros(num_classes)
    tilde[observed_label] = scale
    return LabelBelief(tilde_y=tilde, scale=scale)


def estimated_label(belief: LabelBelief) -> int:
    """Argmax of the belief distribution; ties go to the smallest index."""
    return int(np.argmax(belief.tilde_y))


def belief_step(belief: LabelBelief, grad_y: np.ndarray, eta: float) -> LabelBelief:
    """Plain gradient descent on the belief logits (no momentum, no decay)."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return LabelBelief(tilde_y=belief.tilde_y - eta * np.asarray(grad_y), scale=belief.scale)


def merge_belief(belief: LabelBelief, model_probs: np.ndarray, scale: float) -> LabelBelief:
    """Average the belief distribution with the model's prediction, rescaled.

    tilde_y <- scale * (model_probs + softmax(tilde_y)) / 2
    """
    merged = scale * (np.asarray(model_probs, dtype=np.float64) + belief.soft()) / 2.0
    return LabelBelief(tilde_y=merged, scale=scale)


def valid_mask(per_sample_losses: np.ndarray, tau_percent: float) -> np.ndarray:
    """Keep the ceil(tau% * batch) smallest losses; ties break by batch index.

    Returns a float 0/1 mask aligned with the batch.
    """
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("batch must be nonempty")
    if not 0.0 < tau_percent <= 100.0:
        raise ValueError("tau_percent must be in (0, 100]")
    keep = min(losses.size, math.ceil(tau_percent * losses.size / 100.0))
    order = np.argsort(losses, kind="stable")
    mask = np.zeros(losses.size)
    mask[order[:keep]] = 1.0
    return mask


def classification_loss(
    probs: np.ndarray, soft_targets: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Soft-target cross-entropy between model probabilities and beliefs.

    Per sample: -sum_c y^d_c log p_c, averaged over the batch.  Returns the
    loss plus gradients w.r.t. the model logits (softmax inputs of ``probs``)
    and w.r.t. the belief logits (softmax inputs of ``soft_targets``).
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    s = np.atleast_2d(np.asarray(soft_targets, dtype=np.float64))
    b = p.shape[0]
    g = -np.log(np.maximum(p, PROB_FLOOR))  # dL_i/ds_i
    loss = float((s * g).sum(axis=1).mean())
    dlogits = (p - s) / b
    dtilde = s * (g - (g * s).sum(axis=1, keepdims=True)) / b
    return loss, dlogits, dtilde


def compatibility_loss(observed_label: int, soft_target: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of the belief against the original observed label.

    L = -log y^d_{observed}; the gradient flows only to the belief logits.
    """
    s = np.asarray(soft_target, dtype=np.float64)
    loss = float(-np.log(max(s[observed_label], PROB_FLOOR)))
    grad = s.copy()
    grad[observed_label] -= 1.0
    return loss, grad


def masked_entropy(probs: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean prediction entropy over the masked-in samples.

    Masked-out samples contribute neither loss nor gradient; the sum is
    divided by max(#kept, 1) so the weight of this term does not depend on
    the batch size.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    m = np.asarray(mask, dtype=np.float64)
    if m.shape[0] != p.shape[0]:
        raise ValueError("mask length must equal batch size")
    logp = np.log(np.maximum(p, PROB_FLOOR))
    ent = -(p * logp).sum(axis=1)
    denom = max(float(m.sum()), 1.0)
    loss = float((m * ent).sum() / denom)
    # d ent_i / d z_ij = -p_ij (log p_ij + ent_i)
    dlogits = -(m[:, None] * p * (logp + ent[:, None])) / denom
    return loss, dlogits


def triplet_loss(
    probs: np.ndarray,
    soft_targets: np.ndarray,
    observed_labels: np.ndarray,
    mask: np.ndarray,
    alpha: float,
    beta: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Combined noisy-client loss L_c + alpha*L_comp + beta*masked entropy.

    Returns (loss, d/d model logits, d/d belief logits).  The entropy term
    carries no belief gradient and the compatibility term no model gradient.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    s = np.atleast_2d(np.asarray(soft_targets, dtype=np.float64))
    y = np.asarray(observed_labels)
    b = p.shape[0]

    loss_c, dlogits, dtilde = classification_loss(p, s)

    onehot = np.zeros_like(s)
    onehot[np.arange(b), y] = 1.0
    loss_comp = float(-np.log(np.maximum(s[np.arange(b), y], PROB_FLOOR)).mean())
    dtilde_comp = (s - onehot) / b

    loss_ent, dlogits_ent = masked_entropy(p, mask)

    total = loss_c + alpha * loss_comp + beta * loss_ent
    return total, dlogits + beta * dlogits_ent, dtilde + alpha * dtilde_comp


class BeliefStore:
    """Per-client belief slices, persisted across rounds."""

    def __init__(self):
        self._beliefs: dict[int, list[LabelBelief]] = {}

    def __contains__(self, client_id: int) -> bool:
        return client_id in self._beliefs

    def get(self, client_id: int) -> list[LabelBelief]:
        return self._beliefs[client_id]

    def put(self, client_id: int, beliefs: list[LabelBelief]) -> None:
        self._beliefs[client_id] = beliefs

    def client_ids(self) -> list[int]:
        return sorted(self._beliefs)


def belief_report_rows(
    client_id: int, observed_labels: np.ndarray, beliefs: list[LabelBelief]
) -> list[tuple[int, int, int, int, float]]:
    """Relabeling-aid rows: (client, sample index, observed, estimated, confidence)."""
    rows = []
    for i, belief in enumerate(beliefs):
        soft = belief.soft()
        est = estimated_label(belief)
        rows.append((client_id, i, int(observed_labels[i]), est, float(soft[est])))
    return rows
