"""Per-class loss profiles and two-component GMM noisy-client detection.

After warm-up, every client reports its average plain cross-entropy per
observed class.  The stacked N x C loss matrix is clustered with a
two-component diagonal-covariance Gaussian mixture fit by EM; the
higher-loss component marks the noisy clients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ClientShard
from .errors import ConfigurationError, DetectionError
from .nn import ModelParams, forward, per_sample_cross_entropy

VAR_FLOOR = 1e-6

# Minimum gap between the two groups' mean row-sums, as a fraction of ln C,
# for the split to count as real.  Label noise moves per-class CE by order
# ln C, while fitting variation on clean clients stays an order of magnitude
# below; coincident components (identical rows) fall under this guard too.
NO_SEPARATION_FRACTION = 0.25


@dataclass(frozen=True)
class LossMatrix:
    """Per-client, per-class average losses with imputation bookkeeping."""

    values: np.ndarray  # (N, C)
    client_ids: tuple[int, ...]
    fill_mask: np.ndarray  # (N, C) bool, True where the entry was imputed

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)


@dataclass(frozen=True)
class GmmModel:
    """Two diagonal Gaussians with mixing weights and the EM likelihood trace."""

    means: np.ndarray  # (2, C)
    variances: np.ndarray  # (2, C), floored
    weights: np.ndarray  # (2,)
    log_likelihoods: tuple[float, ...]


@dataclass(frozen=True)
class ClientPartition:
    """Disjoint cover of all clients into clean and detected-noisy groups."""

    clean_ids: frozenset
    noisy_ids: frozenset
    noisy_component: int | None = None  # GMM component index, None if no separation


def per_class_losses(params: ModelParams, shard: ClientShard) -> np.ndarray:
    """Average plain CE per observed class; NaN marks classes absent locally."""
    if len(shard) == 0:
        raise ConfigurationError("shard must be nonempty")
    logits = forward(params, shard.features)
    losses = per_sample_cross_entropy(logits, shard.observed_labels)
    out = np.full(shard.num_classes, np.nan)
    for c in range(shard.num_classes):
        sel = shard.observed_labels == c
        if sel.any():
            out[c] = losses[sel].mean()
    return out


def assemble_loss_matrix(vectors: np.ndarray, client_ids) -> LossMatrix:
    """Stack per-client loss vectors, imputing absent (NaN) entries.

    Absent entries take the column mean over clients where the class is
    present; a fully absent column falls back to ln(C).
    """
    values = np.array(vectors, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ConfigurationError("need at least one loss vector")
    fill_mask = np.isnan(values)
    c = values.shape[1]
    for col in range(c):
        missing = fill_mask[:, col]
        if missing.all():
            values[:, col] = math.log(c)
        elif missing.any():
            values[missing, col] = values[~missing, col].mean()
    return LossMatrix(values=values, client_ids=tuple(int(k) for k in client_ids), fill_mask=fill_mask)


def _diag_log_pdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    diff = x - mean
    return -0.5 * (np.log(2.0 * math.pi * var) + diff * diff / var).sum(axis=1)


def _init_by_median_split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    row_sums = x.sum(axis=1)
    med = np.median(row_sums)
    lo = x[row_sums <= med]
    hi = x[row_sums > med]
    if len(lo) == 0 or len(hi) == 0:
        mean = x.mean(axis=0)
        var = np.maximum(x.var(axis=0), VAR_FLOOR)
        return np.stack([mean, mean]), np.stack([var, var]), np.array([0.5, 0.5])
    means = np.stack([lo.mean(axis=0), hi.mean(axis=0)])
    variances = np.maximum(np.stack([lo.var(axis=0), hi.var(axis=0)]), VAR_FLOOR)
    weights = np.array([len(lo), len(hi)], dtype=np.float64) / len(x)
    return means, variances, weights


def _log_joint(x, means, variances, weights) -> np.ndarray:
    return np.stack(
        [np.log(weights[j]) + _diag_log_pdf(x, means[j], variances[j]) for j in range(2)],
        axis=1,
    )


def responsibilities(gmm: GmmModel, rows: np.ndarray) -> np.ndarray:
    """Posterior component probabilities for each row, shape (N, 2)."""
    logj = _log_joint(np.asarray(rows, dtype=np.float64), gmm.means, gmm.variances, gmm.weights)
    logj -= logj.max(axis=1, keepdims=True)
    r = np.exp(logj)
    return r / r.sum(axis=1, keepdims=True)


def fit_gmm2(
    matrix: LossMatrix, max_iters: int = 100, tol: float = 1e-6, rng_seed: int = 0
) -> GmmModel:
    """EM fit of a two-component diagonal GMM on the loss-matrix rows.

    Initialization splits rows at the median row-sum, which is deterministic
    and aligned with the loss separation EM should refine; ``rng_seed`` is
    accepted for interface stability but the fit involves no random draws.
    Iteration stops when the log-likelihood improves by less than ``tol``.
    """
    x = matrix.values
    n = x.shape[0]
    if n < 2:
        raise DetectionError("GMM detection needs at least 2 clients")

    means, variances, weights = _init_by_median_split(x)
    trace: list[float] = []
    prev_ll = None
    for _ in range(max_iters):
        logj = _log_joint(x, means, variances, weights)
        row_max = logj.max(axis=1, keepdims=True)
        log_norm = row_max[:, 0] + np.log(np.exp(logj - row_max).sum(axis=1))
        ll = float(log_norm.sum())
        trace.append(ll)
        if prev_ll is not None and ll - prev_ll < tol:
            break
        prev_ll = ll

        resp = np.exp(logj - log_norm[:, None])
        nk = np.maximum(resp.sum(axis=0), 1e-12)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        second = (resp.T @ (x * x)) / nk[:, None]
        variances = np.maximum(second - means * means, VAR_FLOOR)

    return GmmModel(means=means, variances=variances, weights=weights, log_likelihoods=tuple(trace))


def partition_clients(gmm: GmmModel, matrix: LossMatrix) -> ClientPartition:
    """Assign clients to components; the higher-loss component is noisy.

    Every client goes to its higher-responsibility component.  The noisy
    group is the component whose assigned rows have the larger mean row-sum.
    When the two groups are inseparable (one side empty, or mean row-sums
    closer than NO_SEPARATION_FRACTION * ln C) all clients are declared
    clean and training degrades to plain robust-aggregation behavior.
    """
    resp = responsibilities(gmm, matrix.values)
    assigned = resp.argmax(axis=1)
    row_sums = matrix.row_sums()
    ids = np.array(matrix.client_ids)

    all_clean = ClientPartition(clean_ids=frozenset(int(k) for k in ids), noisy_ids=frozenset())
    group_means = []
    for j in (0, 1):
        sel = assigned == j
        if not sel.any():
            return all_clean
        group_means.append(row_sums[sel].mean())

    if abs(group_means[0] - group_means[1]) < NO_SEPARATION_FRACTION * math.log(matrix.num_classes):
        return all_clean

    noisy_comp = int(np.argmax(group_means))
    noisy = frozenset(int(k) for k in ids[assigned == noisy_comp])
    clean = frozenset(int(k) for k in ids[assigned != noisy_comp])
    return ClientPartition(clean_ids=clean, noisy_ids=noisy, noisy_component=noisy_comp)
