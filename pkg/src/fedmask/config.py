"""Experiment configuration: defaults, validation, and the manifest format.

Configs are stored as flat ``key = value`` text with dotted key names.
Lines starting with ``#`` are comments, so a written manifest parses back
to the identical resolved config.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigurationError

AGGREGATION_CHOICES = ("average", "coord_median", "geometric_median")
NOISE_CHOICES = ("symmetric", "asymmetric", "mixed")
MASK_SOURCE_CHOICES = ("observed", "belief")
PROTOCOL_CHOICES = ("masked", "fedavg")


@dataclass(frozen=True)
class ExperimentConfig:
    """Every protocol, noise, and dataset hyperparameter of one experiment."""

    # federation
    num_clients: int = 20
    clients_per_round: int = 5
    rounds: int = 60
    warmup_rounds: int = 10
    local_epochs: int = 5
    batch_size: int = 64
    # local optimizer
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # correction losses and belief updates
    alpha: float = 0.5
    beta: float = 0.1
    tau: float = 80.0
    # Belief gradients here are gradients of the batch-MEAN loss (so they
    # carry a 1/batch factor); eta is sized for that convention.  Setups
    # quoting eta=1000 assume per-sample label gradients; at batch 64 the
    # equivalent step here is ~1000/64, and larger values make each belief
    # update overshoot the whole logit range and oscillate instead of
    # converging (label estimates then never leave the observed labels).
    eta: float = 100.0
    zeta: float = 0.8
    belief_scale: float = 4.0  # init/merge logit scale; keeps softmax unsaturated
    mask_enabled: bool = True
    mask_loss_source: str = "observed"
    persist_beliefs: bool = True
    freeze_beliefs: bool = False  # diagnostic: pin beliefs to exact onehot labels
    # aggregation
    aggregation: str = "geometric_median"
    gm_eps: float = 1e-5
    gm_max_iter: int = 10
    # protocol variant
    protocol: str = "masked"  # "fedavg" = vanilla baseline, no detection/correction
    logit_adjust: bool = True
    # label noise
    noise_kind: str = "symmetric"
    max_noise_rate: float = 0.8
    # partitioning
    gamma: float = 0.5
    min_per_client: int = 10
    # dataset
    train_samples: int = 8000
    test_samples: int = 2000
    num_classes: int = 4
    input_dim: int = 8
    separation: float = 2.0
    hidden_widths: tuple = (64,)
    # execution
    seed: int = 0
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        def fail(field_name, message):
            raise ConfigurationError(f"{field_name}: {message}")

        if self.num_clients < 1:
            fail("clients", "must be >= 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            fail("clients_per_round", f"must be in [1, {self.num_clients}]")
        if not 0 < self.warmup_rounds < self.rounds:
            fail("warmup_rounds", f"must satisfy 0 < warmup < rounds={self.rounds}")
        if self.local_epochs < 1:
            fail("local_epochs", "must be >= 1")
        if self.batch_size < 1:
            fail("batch_size", "must be >= 1")
        if self.lr <= 0:
            fail("optim.lr", "must be positive")
        if self.alpha < 0 or self.beta < 0:
            fail("loss.alpha/loss.beta", "must be >= 0")
        if not 0 < self.tau <= 100:
            fail("loss.tau", "must be in (0, 100]")
        if self.eta <= 0:
            fail("loss.eta", "must be positive")
        if not 0 <= self.zeta <= 1:
            fail("loss.zeta", "must be in [0, 1]")
        if self.belief_scale <= 0:
            fail("loss.belief_scale", "must be positive")
        if self.aggregation not in AGGREGATION_CHOICES:
            fail("agg.method", f"must be one of {AGGREGATION_CHOICES}")
        if self.gm_eps <= 0:
            fail("agg.eps", "must be positive")
        if self.mask_loss_source not in MASK_SOURCE_CHOICES:
            fail("mask.loss_source", f"must be one of {MASK_SOURCE_CHOICES}")
        if self.protocol not in PROTOCOL_CHOICES:
            fail("protocol", f"must be one of {PROTOCOL_CHOICES}")
        if self.noise_kind not in NOISE_CHOICES:
            fail("noise.kind", f"must be one of {NOISE_CHOICES}")
        if not 0 <= self.max_noise_rate <= 1:
            fail("noise.max_rate", "must be in [0, 1]")
        if self.gamma <= 0:
            fail("partition.gamma", "must be positive")
        if self.num_classes < 2:
            fail("data.classes", "must be >= 2")
        if self.input_dim < 2:
            fail("data.input_dim", "must be >= 2")
        if self.train_samples < self.num_classes or self.test_samples < self.num_classes:
            fail("data.train_samples/test_samples", "must be >= data.classes")
        if self.separation <= 0:
            fail("data.separation", "must be positive")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            fail("model.hidden_widths", "must be nonempty positive widths")
        if self.workers < 1:
            fail("workers", "must be >= 1")
        return self


# Canonical file/manifest key for each dataclass field, in write order.
FIELD_KEYS = {
    "num_clients": "clients",
    "clients_per_round": "clients_per_round",
    "rounds": "rounds",
    "warmup_rounds": "warmup_rounds",
    "local_epochs": "local_epochs",
    "batch_size": "batch_size",
    "lr": "optim.lr",
    "momentum": "optim.momentum",
    "weight_decay": "optim.weight_decay",
    "alpha": "loss.alpha",
    "beta": "loss.beta",
    "tau": "loss.tau",
    "eta": "loss.eta",
    "zeta": "loss.zeta",
    "belief_scale": "loss.belief_scale",
    "mask_enabled": "mask.enabled",
    "mask_loss_source": "mask.loss_source",
    "persist_beliefs": "beliefs.persist",
    "freeze_beliefs": "beliefs.freeze",
    "aggregation": "agg.method",
    "gm_eps": "agg.eps",
    "gm_max_iter": "agg.max_iter",
    "protocol": "protocol",
    "logit_adjust": "logit_adjust",
    "noise_kind": "noise.kind",
    "max_noise_rate": "noise.max_rate",
    "gamma": "partition.gamma",
    "min_per_client": "partition.min_per_client",
    "train_samples": "data.train_samples",
    "test_samples": "data.test_samples",
    "num_classes": "data.classes",
    "input_dim": "data.input_dim",
    "separation": "data.separation",
    "hidden_widths": "model.hidden_widths",
    "seed": "seed",
    "workers": "workers",
}
KEY_FIELDS = {v: k for k, v in FIELD_KEYS.items()}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _parse_value(field_name: str, text: str):
    ftype = {f.name: f.type for f in fields(ExperimentConfig)}[field_name]
    text = text.strip()
    try:
        if ftype == "bool":
            word = text.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOL_WORDS[word]
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype == "tuple":
            return tuple(int(part) for part in text.split(",") if part.strip())
        return text
    except ValueError as exc:
        raise ConfigurationError(f"{FIELD_KEYS[field_name]}: {exc}") from exc


def parse_field_value(field_name: str, text: str):
    """Parse a raw string into the given config field's type."""
    return _parse_value(field_name, text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config_file(path) -> dict:
    """Parse a key=value config file into a field->value dict."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in KEY_FIELDS:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            values[KEY_FIELDS[key]] = _parse_value(KEY_FIELDS[key], value)
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve defaults <- config file <- explicit overrides, then validate."""
    merged = {}
    merged.update(file_values or {})
    for name, value in (overrides or {}).items():
        if name not in FIELD_KEYS:
            raise ConfigurationError(f"unknown config field {name!r}")
        merged[name] = value
    return ExperimentConfig(**merged).validate()


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load an optional config file and apply overrides on top."""
    file_values = load_config_file(path) if path is not None else None
    return build_config(file_values, overrides)


def config_lines(config: ExperimentConfig) -> list[str]:
    """The config serialized to its canonical key order."""
    return [f"{FIELD_KEYS[f.name]} = {_format_value(getattr(config, f.name))}"
            for f in fields(ExperimentConfig)]


def with_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    return replace(config, **overrides).validate()
