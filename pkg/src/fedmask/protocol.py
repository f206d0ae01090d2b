"""Two-stage federated protocol: warm-up, detection, masked correction rounds.

Rounds are 0-indexed.  Rounds [0, warmup_rounds) train every selected client
with the vanilla (optionally logit-adjusted) objective.  Detection runs once,
after round warmup_rounds - 1 completes; from then on detected noisy clients
run the masked label-correction update and merge their model back toward the
received global model before upload.

Determinism contract: every output is a pure function of the config
(including the master seed).  Client updates may run on a thread pool, but
results are joined in client-id order, so the worker count never changes
the outcome.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .aggregation import aggregate, pre_merge
from .config import ExperimentConfig
from .correction import (
    LabelBelief,
    belief_step,
    estimated_label,
    init_belief,
    merge_belief,
    triplet_loss,
    valid_mask,
)
from .data import (
    ClientShard,
    LabeledDataset,
    NoiseSpec,
    apply_noise_schedule,
    generate_blobs,
    partition_dirichlet,
)
from .detection import (
    ClientPartition,
    GmmModel,
    LossMatrix,
    assemble_loss_matrix,
    fit_gmm2,
    partition_clients,
    per_class_losses,
    responsibilities,
)
from .errors import ConfigurationError, DetectionError, FedmaskError
from .nn import (
    Architecture,
    ModelParams,
    OptimizerState,
    backward,
    cross_entropy,
    forward,
    init_params,
    per_sample_cross_entropy,
    sgd_step,
    softmax,
)

logger = logging.getLogger(__name__)

GROUP_CLEAN = "clean"
GROUP_NOISY = "noisy"


@dataclass
class ClientState:
    """Mutable per-client record held by the server-side simulator."""

    shard: ClientShard
    group: str | None = None  # None until detection has run
    beliefs: list[LabelBelief] | None = None


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float


@dataclass
class RoundMetrics:
    round_index: int
    stage: int
    selected: list[int]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    mean_train_loss: float
    num_clean_selected: int
    num_noisy_selected: int
    correction_accuracy: float | None
    correction_baseline: float | None
    param_digest: str
    wall_time_sec: float = 0.0

    def to_record(self) -> dict:
        """Serializable record; wall time is excluded to keep streams reproducible."""
        return {
            "round": self.round_index,
            "stage": self.stage,
            "selected": self.selected,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "mean_train_loss": self.mean_train_loss,
            "num_clean_selected": self.num_clean_selected,
            "num_noisy_selected": self.num_noisy_selected,
            "correction_accuracy": self.correction_accuracy,
            "correction_baseline": self.correction_baseline,
            "param_digest": self.param_digest,
        }


@dataclass
class DetectionOutcome:
    partition: ClientPartition
    matrix: LossMatrix | None
    gmm: GmmModel | None
    report_rows: list[dict] = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rounds: list[RoundMetrics]
    detection: DetectionOutcome | None
    final_metrics: EvalMetrics
    best_metrics: EvalMetrics
    best_round: int
    final_params: ModelParams
    states: list[ClientState]

    def metric_records(self) -> list[dict]:
        return [m.to_record() for m in self.rounds]


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, tensor in params.tensors.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor).tobytes())
    return h.hexdigest()


def select_clients(round_index: int, config: ExperimentConfig) -> np.ndarray:
    """Uniform sample without replacement from a per-round selection stream."""
    rng = seeding.stream(config.seed, seeding.SELECTION, round_index)
    chosen = rng.choice(config.num_clients, size=config.clients_per_round, replace=False)
    return np.sort(chosen)


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    """Shuffled batch index blocks; the last partial batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_update_clean(
    global_params: ModelParams,
    shard: ClientShard,
    config: ExperimentConfig,
    rng: np.random.Generator,
) -> tuple[ModelParams, list[float]]:
    """Vanilla local training on observed labels (warm-up / clean clients).

    Returns the trained copy plus the mean training loss of each epoch.
    """
    params = global_params.copy()
    opt = OptimizerState.fresh(params, config.lr, config.momentum, config.weight_decay)
    prior = shard.class_prior if config.logit_adjust else None
    epoch_losses = []
    for _ in range(config.local_epochs):
        losses = []
        for idx in _batches(rng, len(shard), config.batch_size):
            logits = forward(params, shard.features[idx])
            loss, dlogits = cross_entropy(logits, shard.observed_labels[idx], prior)
            grads = backward(params, shard.features[idx], dlogits)
            params = sgd_step(params, grads, opt)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return params, epoch_losses


def _exact_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def local_update_noisy(
    global_params: ModelParams,
    state: ClientState,
    config: ExperimentConfig,
    rng: np.random.Generator,
) -> tuple[ModelParams, list[float]]:
    """Masked end-to-end label correction for a detected noisy client.

    Jointly updates the model (momentum SGD) and the per-sample beliefs
    (plain gradient steps with rate eta) from the combined loss, merges each
    belief with the trained model's prediction after the epoch loop, and
    finally blends the model toward the received global weights.
    Mutates ``state.beliefs``.
    """
    shard = state.shard
    c = shard.num_classes
    if not config.freeze_beliefs and (state.beliefs is None or not config.persist_beliefs):
        state.beliefs = [
            init_belief(int(y), c, config.belief_scale) for y in shard.observed_labels
        ]

    params = global_params.copy()
    opt = OptimizerState.fresh(params, config.lr, config.momentum, config.weight_decay)
    epoch_losses = []
    for _ in range(config.local_epochs):
        losses = []
        for idx in _batches(rng, len(shard), config.batch_size):
            x = shard.features[idx]
            y_obs = shard.observed_labels[idx]
            logits = forward(params, x)
            probs = softmax(logits)

            if config.freeze_beliefs:
                soft = _exact_onehot(y_obs, c)
            else:
                soft = np.stack([state.beliefs[i].soft() for i in idx])

            if config.mask_enabled:
                if config.mask_loss_source == "observed":
                    sel_losses = per_sample_cross_entropy(logits, y_obs)
                else:
                    sel_losses = -(soft * np.log(np.maximum(probs, 1e-12))).sum(axis=1)
                mask = valid_mask(sel_losses, config.tau)
            else:
                mask = np.ones(len(idx))

            loss, dlogits, dtilde = triplet_loss(
                probs, soft, y_obs, mask, config.alpha, config.beta
            )
            grads = backward(params, x, dlogits)
            params = sgd_step(params, grads, opt)
            if not config.freeze_beliefs:
                for j, i in enumerate(idx):
                    state.beliefs[i] = belief_step(state.beliefs[i], dtilde[j], config.eta)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))

    if not config.freeze_beliefs:
        probs_all = softmax(forward(params, shard.features))
        state.beliefs = [
            merge_belief(b, probs_all[i], config.belief_scale)
            for i, b in enumerate(state.beliefs)
        ]

    return pre_merge(params, global_params, config.zeta), epoch_losses


def evaluate(params: ModelParams, test: LabeledDataset) -> EvalMetrics:
    """Macro-averaged precision/recall/F1 and accuracy on held-out data.

    Per-class scores with zero denominators count as 0; predictions are the
    argmax logit with smallest-index tie-break.
    """
    if len(test) == 0:
        raise ConfigurationError("test set must be nonempty")
    present = np.bincount(test.true_labels, minlength=test.num_classes)
    if (present == 0).any():
        raise ConfigurationError("every class must appear in the test set")

    pred = np.argmax(forward(params, test.features), axis=1)
    truth = test.true_labels
    c = test.num_classes
    precisions, recalls, f1s = [], [], []
    for cls in range(c):
        tp = int(np.sum((pred == cls) & (truth == cls)))
        fp = int(np.sum((pred == cls) & (truth != cls)))
        fn = int(np.sum((pred != cls) & (truth == cls)))
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return EvalMetrics(
        accuracy=float(np.mean(pred == truth)),
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
        macro_f1=float(np.mean(f1s)),
    )


def correction_accuracy(states: list[ClientState]) -> tuple[float, float] | None:
    """Label-estimate agreement with the backed-up truth on noisy clients.

    Returns (estimated agreement, observed-label baseline) over all samples
    of detected noisy clients that hold beliefs, or None when there are none.
    """
    est_hits = obs_hits = total = 0
    for state in states:
        if state.group != GROUP_NOISY or state.beliefs is None:
            continue
        truth = state.shard.true_labels
        estimates = np.array([estimated_label(b) for b in state.beliefs])
        est_hits += int(np.sum(estimates == truth))
        obs_hits += int(np.sum(state.shard.observed_labels == truth))
        total += len(truth)
    if total == 0:
        return None
    return est_hits / total, obs_hits / total


def _is_noisy_round(round_index: int, config: ExperimentConfig, state: ClientState) -> bool:
    return (
        config.protocol == "masked"
        and round_index >= config.warmup_rounds
        and state.group == GROUP_NOISY
    )


def run_round(
    round_index: int,
    global_params: ModelParams,
    states: list[ClientState],
    config: ExperimentConfig,
    test: LabeledDataset,
) -> tuple[ModelParams, RoundMetrics]:
    """One communication round: select, local-update, aggregate, evaluate."""
    t0 = time.perf_counter()
    selected = select_clients(round_index, config)

    def update_one(k: int):
        rng = seeding.stream(config.seed, seeding.BATCH_ORDER, int(k), round_index)
        state = states[k]
        if _is_noisy_round(round_index, config, state):
            model, epoch_losses = local_update_noisy(global_params, state, config, rng)
            return model, float(np.mean(epoch_losses)), GROUP_NOISY
        model, epoch_losses = local_update_clean(global_params, state.shard, config, rng)
        return model, float(np.mean(epoch_losses)), GROUP_CLEAN

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(update_one, selected))
    else:
        results = [update_one(k) for k in selected]

    models = [r[0] for r in results]
    weights = [len(states[k].shard) for k in selected]
    new_global = aggregate(
        models, weights, config.aggregation, eps=config.gm_eps, max_iter=config.gm_max_iter
    )

    stage = 1 if round_index < config.warmup_rounds else 2
    metrics = evaluate(new_global, test)
    corr = correction_accuracy(states) if stage == 2 else None
    num_noisy = sum(1 for r in results if r[2] == GROUP_NOISY)
    round_metrics = RoundMetrics(
        round_index=round_index,
        stage=stage,
        selected=[int(k) for k in selected],
        accuracy=metrics.accuracy,
        macro_precision=metrics.macro_precision,
        macro_recall=metrics.macro_recall,
        macro_f1=metrics.macro_f1,
        mean_train_loss=float(np.mean([r[1] for r in results])),
        num_clean_selected=len(results) - num_noisy,
        num_noisy_selected=num_noisy,
        correction_accuracy=None if corr is None else corr[0],
        correction_baseline=None if corr is None else corr[1],
        param_digest=params_digest(new_global),
        wall_time_sec=time.perf_counter() - t0,
    )
    return new_global, round_metrics


def run_detection(
    global_params: ModelParams, states: list[ClientState], config: ExperimentConfig
) -> DetectionOutcome:
    """Loss-matrix + GMM partition over all clients; falls back to all-clean."""
    vectors = np.stack([per_class_losses(global_params, s.shard) for s in states])
    client_ids = [s.shard.client_id for s in states]
    matrix = assemble_loss_matrix(vectors, client_ids)
    try:
        gmm = fit_gmm2(matrix, rng_seed=seeding.derive_seed(config.seed, seeding.GMM))
        partition = partition_clients(gmm, matrix)
    except DetectionError as exc:
        logger.warning("detection failed (%s); treating all clients as clean", exc)
        gmm = None
        partition = ClientPartition(
            clean_ids=frozenset(client_ids), noisy_ids=frozenset(), noisy_component=None
        )

    for state in states:
        in_noisy = state.shard.client_id in partition.noisy_ids
        state.group = GROUP_NOISY if in_noisy else GROUP_CLEAN

    if gmm is not None and partition.noisy_component is not None:
        resp_noisy = responsibilities(gmm, matrix.values)[:, partition.noisy_component]
    else:
        resp_noisy = np.full(len(states), 0.5)
    rows = [
        {
            "client_id": int(cid),
            "row_sum": float(matrix.row_sums()[i]),
            "responsibility_noisy": float(resp_noisy[i]),
            "assigned_group": GROUP_NOISY if cid in partition.noisy_ids else GROUP_CLEAN,
            "true_injected_rate": float(states[i].shard.injected_noise_rate),
        }
        for i, cid in enumerate(client_ids)
    ]
    return DetectionOutcome(partition=partition, matrix=matrix, gmm=gmm, report_rows=rows)


def build_environment(config: ExperimentConfig):
    """Materialize datasets, noisy client shards, and the initial model."""
    train = generate_blobs(
        config.train_samples,
        config.num_classes,
        config.input_dim,
        config.separation,
        seeding.derive_seed(config.seed, seeding.TRAIN_DATA),
    )
    test = generate_blobs(
        config.test_samples,
        config.num_classes,
        config.input_dim,
        config.separation,
        seeding.derive_seed(config.seed, seeding.TEST_DATA),
    )
    shards = partition_dirichlet(
        train,
        config.num_clients,
        config.gamma,
        config.min_per_client,
        seeding.derive_seed(config.seed, seeding.PARTITION),
    )
    shards = apply_noise_schedule(
        shards,
        NoiseSpec(config.noise_kind, config.max_noise_rate),
        seeding.derive_seed(config.seed, seeding.NOISE),
    )
    arch = Architecture(config.input_dim, tuple(config.hidden_widths), config.num_classes)
    params = init_params(arch, seeding.derive_seed(config.seed, seeding.MODEL_INIT))
    states = [ClientState(shard=s) for s in shards]
    return train, test, states, params


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Full protocol: build data, run T rounds, detect after the warm-up."""
    config.validate()
    _, test, states, params = build_environment(config)

    rounds: list[RoundMetrics] = []
    detection: DetectionOutcome | None = None
    for t in range(config.rounds):
        try:
            params, metrics = run_round(t, params, states, config, test)
            rounds.append(metrics)
            if config.protocol == "masked" and t == config.warmup_rounds - 1:
                detection = run_detection(params, states, config)
        except FedmaskError as exc:
            raise type(exc)(f"round {t}: {exc}") from None
        except Exception as exc:
            raise RuntimeError(f"round {t}: {exc}") from exc

    best_idx = int(np.argmax([m.macro_f1 for m in rounds]))
    final = rounds[-1]
    return ExperimentResult(
        config=config,
        rounds=rounds,
        detection=detection,
        final_metrics=EvalMetrics(
            final.accuracy, final.macro_precision, final.macro_recall, final.macro_f1
        ),
        best_metrics=EvalMetrics(
            rounds[best_idx].accuracy,
            rounds[best_idx].macro_precision,
            rounds[best_idx].macro_recall,
            rounds[best_idx].macro_f1,
        ),
        best_round=best_idx,
        final_params=params,
        states=states,
    )
