"""Synthetic blob datasets, Dirichlet client partitioning, and label-noise injection.

Datasets keep two label arrays per sample: ``observed_labels`` (possibly
corrupted, visible to training) and ``true_labels`` (the backed-up ground
truth, used only by evaluation).  Noise injection resamples observed labels
from a row-stochastic transition matrix and never touches the true labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, PartitionError
from .seeding import derive_seed

NOISE_KINDS = ("symmetric", "asymmetric", "mixed")


@dataclass(frozen=True)
class Sample:
    """A single labeled point."""

    features: np.ndarray
    observed_label: int
    true_label: int


@dataclass(frozen=True)
class LabeledDataset:
    """A pool of samples stored as parallel arrays."""

    features: np.ndarray  # (n, d) float64
    observed_labels: np.ndarray  # (n,) int64
    true_labels: np.ndarray  # (n,) int64
    num_classes: int

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.observed_labels[i]), int(self.true_labels[i]))

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(
            features=self.features[idx],
            observed_labels=self.observed_labels[idx],
            true_labels=self.true_labels[idx],
            num_classes=self.num_classes,
        )


@dataclass(frozen=True)
class ClientShard:
    """One client's local data plus its observed-label class prior."""

    client_id: int
    features: np.ndarray
    observed_labels: np.ndarray
    true_labels: np.ndarray
    class_prior: np.ndarray  # length C, sums to 1, computed from observed labels
    num_classes: int
    injected_noise_rate: float = 0.0
    realized_flip_fraction: float = 0.0
    noise_kind: str = "none"

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class NoiseSpec:
    """Noise scenario: flip pattern and the per-client maximum rate."""

    kind: str  # symmetric | asymmetric | mixed
    max_rate: float

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.max_rate <= 1.0:
            raise ConfigurationError(f"max_rate must be in [0, 1], got {self.max_rate}")


def class_prior(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Empirical class frequencies of ``labels`` over ``num_classes`` classes."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


def generate_blobs(
    num_samples: int,
    num_classes: int,
    input_dim: int,
    separation: float,
    rng_seed: int,
) -> LabeledDataset:
    """Sample class-balanced isotropic Gaussian clusters.

    Cluster means sit at distance ``separation`` from the origin along the
    unit-circle directions 2*pi*c/C embedded in the first two coordinates,
    so any num_classes works for input_dim >= 2.  Observed labels start
    equal to the true labels.
    """
    if num_samples < num_classes:
        raise ConfigurationError(
            f"num_samples={num_samples} must be >= num_classes={num_classes}"
        )
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if input_dim < 2:
        raise ConfigurationError("input_dim must be >= 2")
    if separation <= 0:
        raise ConfigurationError("separation must be positive")

    rng = np.random.default_rng(rng_seed)
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, input_dim))
    means[:, 0] = separation * np.cos(angles)
    means[:, 1] = separation * np.sin(angles)

    labels = (np.arange(num_samples) % num_classes).astype(np.int64)
    features = means[labels] + rng.standard_normal((num_samples, input_dim))
    return LabeledDataset(
        features=features,
        observed_labels=labels.copy(),
        true_labels=labels.copy(),
        num_classes=num_classes,
    )


def _shard_from_indices(dataset: LabeledDataset, client_id: int, idx: np.ndarray) -> ClientShard:
    obs = dataset.observed_labels[idx]
    return ClientShard(
        client_id=client_id,
        features=dataset.features[idx],
        observed_labels=obs,
        true_labels=dataset.true_labels[idx],
        class_prior=class_prior(obs, dataset.num_classes),
        num_classes=dataset.num_classes,
    )


def partition_dirichlet(
    dataset: LabeledDataset,
    num_clients: int,
    gamma: float,
    min_per_client: int,
    rng_seed: int,
) -> list[ClientShard]:
    """Split a dataset across clients with Dirichlet(gamma) class proportions.

    For each class, client proportions are drawn from Dirichlet(gamma) and the
    class's samples are split accordingly.  The whole partition is resampled
    (up to 100 times) until every client holds at least ``min_per_client``
    samples; conservation of the sample pool is exact by construction.
    """
    if gamma <= 0:
        raise ConfigurationError("gamma must be positive")
    if num_clients < 1:
        raise ConfigurationError("num_clients must be >= 1")

    rng = np.random.default_rng(rng_seed)
    n = len(dataset)
    for _ in range(100):
        client_indices: list[list[int]] = [[] for _ in range(num_clients)]
        for c in range(dataset.num_classes):
            idx = np.flatnonzero(dataset.observed_labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(num_clients, gamma))
            bounds = np.floor(np.cumsum(props) * len(idx)).astype(int)
            bounds[-1] = len(idx)
            start = 0
            for k, stop in enumerate(bounds):
                client_indices[k].extend(idx[start:stop].tolist())
                start = stop
        counts = [len(ci) for ci in client_indices]
        if min(counts) >= min_per_client:
            shards = [
                _shard_from_indices(dataset, k, np.sort(np.array(ci, dtype=np.int64)))
                for k, ci in enumerate(client_indices)
            ]
            assert sum(len(s) for s in shards) == n
            return shards
    raise PartitionError(
        f"could not give every client >= {min_per_client} samples in 100 attempts "
        f"(n={n}, clients={num_clients}, gamma={gamma})"
    )


def noise_rate_schedule(max_rate: float, num_clients: int) -> np.ndarray:
    """Per-client noise rates rising linearly from 0 to ``max_rate``."""
    if not 0.0 <= max_rate <= 1.0:
        raise ConfigurationError("max_rate must be in [0, 1]")
    if num_clients < 2:
        raise ConfigurationError("noise schedule needs at least 2 clients")
    k = np.arange(num_clients, dtype=np.float64)
    return max_rate * k / (num_clients - 1)


def build_transition_matrix(kind: str, rate: float, num_classes: int) -> np.ndarray:
    """Row-stochastic label transition matrix for one client.

    symmetric: mass ``rate`` spread evenly over the C-1 wrong classes.
    asymmetric: mass ``rate`` flipped cyclically to class (i+1) mod C.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError("rate must be in [0, 1]")
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    c = num_classes
    if kind == "symmetric":
        t = np.full((c, c), rate / (c - 1))
        np.fill_diagonal(t, 1.0 - rate)
    elif kind == "asymmetric":
        t = np.zeros((c, c))
        np.fill_diagonal(t, 1.0 - rate)
        for i in range(c):
            t[i, (i + 1) % c] = rate
    else:
        raise ConfigurationError(f"unknown transition kind {kind!r}")
    return t


def inject_noise(shard: ClientShard, transition: np.ndarray, rng_seed: int) -> ClientShard:
    """Resample each observed label from the transition row of its true label.

    Returns a new shard with recomputed class prior and the realized flip
    fraction; true labels are never modified.
    """
    t = np.asarray(transition, dtype=np.float64)
    c = shard.num_classes
    if t.shape != (c, c) or np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
        raise ConfigurationError("transition matrix must be row-stochastic of shape (C, C)")

    rng = np.random.default_rng(rng_seed)
    cdf = np.cumsum(t, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(len(shard))
    new_obs = np.argmax(u[:, None] < cdf[shard.true_labels], axis=1).astype(np.int64)
    return replace(
        shard,
        observed_labels=new_obs,
        class_prior=class_prior(new_obs, c),
        injected_noise_rate=float(1.0 - np.mean(np.diag(t))),
        realized_flip_fraction=float(np.mean(new_obs != shard.true_labels)),
    )


def make_mixed_assignment(num_clients: int) -> list[str]:
    """Alternate symmetric/asymmetric by client index (even -> symmetric)."""
    if num_clients < 2:
        raise ConfigurationError("mixed assignment needs at least 2 clients")
    return ["symmetric" if k % 2 == 0 else "asymmetric" for k in range(num_clients)]


def apply_noise_schedule(
    shards: list[ClientShard], spec: NoiseSpec, rng_seed: int
) -> list[ClientShard]:
    """Inject noise into every shard following the linear rate schedule.

    Client k gets rate max_rate * k / (N-1).  Under the mixed scenario, even
    clients flip symmetrically and odd clients asymmetrically, so both kinds
    span the full rate range.
    """
    n = len(shards)
    if n == 1:
        rates = np.array([spec.max_rate])
    else:
        rates = noise_rate_schedule(spec.max_rate, n)
    if spec.kind == "mixed":
        kinds = make_mixed_assignment(n) if n >= 2 else ["symmetric"]
    else:
        kinds = [spec.kind] * n

    out = []
    for shard, rate, kind in zip(shards, rates, kinds):
        t = build_transition_matrix(kind, float(rate), shard.num_classes)
        noisy = inject_noise(shard, t, derive_seed(rng_seed, shard.client_id))
        out.append(replace(noisy, noise_kind=kind if rate > 0 else "none"))
    return out


def save_dataset_csv(dataset: LabeledDataset, path) -> None:
    """Write one row per sample: f0..f{d-1}, observed_label, true_label."""
    d = dataset.input_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(d)] + ["observed_label", "true_label"])
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.features[i]]
            row += [int(dataset.observed_labels[i]), int(dataset.true_labels[i])]
            writer.writerow(row)


def load_dataset_csv(path, num_classes: int | None = None) -> LabeledDataset:
    """Read a dataset written by :func:`save_dataset_csv`."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["observed_label", "true_label"]:
            raise ConfigurationError(f"unexpected CSV header in {path}")
        d = len(header) - 2
        feats, obs, true = [], [], []
        for row in reader:
            feats.append([float(v) for v in row[:d]])
            obs.append(int(row[d]))
            true.append(int(row[d + 1]))
    observed = np.array(obs, dtype=np.int64)
    truth = np.array(true, dtype=np.int64)
    if num_classes is None:
        num_classes = int(max(observed.max(), truth.max())) + 1
    return LabeledDataset(
        features=np.array(feats, dtype=np.float64),
        observed_labels=observed,
        true_labels=truth,
        num_classes=num_classes,
    )
