"""Command-line entry point: run single experiments, sweeps, and ablations.

Every command resolves a config (defaults <- --config file <- flags), writes
a manifest before training, and leaves its artifacts inside --out:
manifest.txt, metrics.jsonl, detection.csv, correction.csv, summary.csv.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import traceback
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from .config import (
    AGGREGATION_CHOICES,
    MASK_SOURCE_CHOICES,
    NOISE_CHOICES,
    PROTOCOL_CHOICES,
    ExperimentConfig,
    FIELD_KEYS,
    config_lines,
    parse_config,
    parse_field_value,
)
from .correction import belief_report_rows
from .errors import ConfigurationError, FedmaskError
from .protocol import ExperimentResult, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


@dataclass(frozen=True)
class SweepSpec:
    """Grid over one or two config fields, evaluated at several seeds."""

    base: ExperimentConfig
    params: tuple  # ((field_name, (values...)), ...) with 1 or 2 entries
    seeds: tuple

    def cells(self):
        names = [p[0] for p in self.params]
        for combo in itertools.product(*(p[1] for p in self.params)):
            yield dict(zip(names, combo))


class _ArgumentParser(argparse.ArgumentParser):
    """argparse variant that reports bad command lines as config errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def _onoff(value: str) -> bool:
    word = value.strip().lower()
    if word in ("on", "true", "1", "yes"):
        return True
    if word in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _int_tuple(value: str) -> tuple:
    return tuple(int(part) for part in value.split(",") if part.strip())


# (flag, config field, type) for every supported override.
_OVERRIDE_FLAGS = [
    ("--seed", "seed", int),
    ("--alpha", "alpha", float),
    ("--beta", "beta", float),
    ("--tau", "tau", float),
    ("--eta", "eta", float),
    ("--zeta", "zeta", float),
    ("--belief-scale", "belief_scale", float),
    ("--warmup-rounds", "warmup_rounds", int),
    ("--rounds", "rounds", int),
    ("--clients", "num_clients", int),
    ("--clients-per-round", "clients_per_round", int),
    ("--local-epochs", "local_epochs", int),
    ("--batch-size", "batch_size", int),
    ("--lr", "lr", float),
    ("--momentum", "momentum", float),
    ("--weight-decay", "weight_decay", float),
    ("--max-noise-rate", "max_noise_rate", float),
    ("--gamma", "gamma", float),
    ("--min-per-client", "min_per_client", int),
    ("--train-samples", "train_samples", int),
    ("--test-samples", "test_samples", int),
    ("--num-classes", "num_classes", int),
    ("--input-dim", "input_dim", int),
    ("--separation", "separation", float),
    ("--hidden-widths", "hidden_widths", _int_tuple),
    ("--gm-eps", "gm_eps", float),
    ("--gm-max-iter", "gm_max_iter", int),
    ("--workers", "workers", int),
    ("--mask", "mask_enabled", _onoff),
    ("--persist-beliefs", "persist_beliefs", _onoff),
    ("--freeze-beliefs", "freeze_beliefs", _onoff),
    ("--logit-adjust", "logit_adjust", _onoff),
]
_CHOICE_FLAGS = [
    ("--noise-kind", "noise_kind", NOISE_CHOICES),
    ("--aggregation", "aggregation", AGGREGATION_CHOICES),
    ("--mask-loss-source", "mask_loss_source", MASK_SOURCE_CHOICES),
    ("--protocol", "protocol", PROTOCOL_CHOICES),
]


def _add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    for flag, dest, ftype in _OVERRIDE_FLAGS:
        parser.add_argument(flag, dest=dest, type=ftype, default=None)
    for flag, dest, choices in _CHOICE_FLAGS:
        parser.add_argument(flag, dest=dest, choices=choices, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="fedmask",
        description="Federated learning simulator with noisy-client detection and label correction",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    run_p = sub.add_parser("run", help="run a single experiment")
    _add_common_args(run_p)

    sweep_p = sub.add_parser("sweep", help="run a 1- or 2-parameter grid")
    _add_common_args(sweep_p)
    sweep_p.add_argument(
        "--sweep",
        action="append",
        required=True,
        metavar="FIELD=V1,V2,...",
        help="swept config field (repeat for a second axis, max 2)",
    )
    sweep_p.add_argument("--seeds-per-cell", type=int, default=3)

    ablate_p = sub.add_parser("ablate", help="mask on/off x aggregation matrix")
    _add_common_args(ablate_p)
    ablate_p.add_argument("--seeds-per-cell", type=int, default=3)
    return parser


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for _, dest, _ in _OVERRIDE_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            overrides[dest] = value
    for _, dest, _ in _CHOICE_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            overrides[dest] = value
    return overrides


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(path: Path, config: ExperimentConfig, note: str | None = None) -> None:
    lines = [f"# fedmask manifest, written {_timestamp()}"]
    if note:
        lines.append(f"# {note}")
    lines += config_lines(config)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_metrics(path: Path, result: ExperimentResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in result.metric_records():
            fh.write(json.dumps(record) + "\n")


def _write_detection(path: Path, result: ExperimentResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["client_id", "row_sum", "responsibility_noisy", "assigned_group", "true_injected_rate"]
        )
        if result.detection is not None:
            for row in result.detection.report_rows:
                writer.writerow(
                    [
                        row["client_id"],
                        repr(row["row_sum"]),
                        repr(row["responsibility_noisy"]),
                        row["assigned_group"],
                        repr(row["true_injected_rate"]),
                    ]
                )


def _write_correction(path: Path, result: ExperimentResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["client_id", "sample_index", "observed_label", "estimated_label", "max_confidence"]
        )
        for state in result.states:
            if state.group != "noisy" or state.beliefs is None:
                continue
            rows = belief_report_rows(
                state.shard.client_id, state.shard.observed_labels, state.beliefs
            )
            for cid, i, obs, est, conf in rows:
                writer.writerow([cid, i, obs, est, repr(conf)])


def _summary_pairs(result: ExperimentResult) -> list[tuple[str, str]]:
    final = result.final_metrics
    best = result.best_metrics
    corr = result.rounds[-1]
    num_noisy = (
        len(result.detection.partition.noisy_ids) if result.detection is not None else 0
    )
    fmt = lambda v: "" if v is None else repr(float(v))
    return [
        ("protocol", result.config.protocol),
        ("rounds", str(result.config.rounds)),
        ("final_round", str(result.rounds[-1].round_index)),
        ("final_accuracy", repr(final.accuracy)),
        ("final_macro_precision", repr(final.macro_precision)),
        ("final_macro_recall", repr(final.macro_recall)),
        ("final_macro_f1", repr(final.macro_f1)),
        ("best_round", str(result.best_round)),
        ("best_accuracy", repr(best.accuracy)),
        ("best_macro_f1", repr(best.macro_f1)),
        ("num_clients", str(result.config.num_clients)),
        ("num_detected_noisy", str(num_noisy)),
        ("correction_accuracy", fmt(corr.correction_accuracy)),
        ("correction_baseline", fmt(corr.correction_baseline)),
    ]


def _write_summary(path: Path, result: ExperimentResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerows(_summary_pairs(result))


def run_to_dir(config: ExperimentConfig, out: Path, quiet: bool = True) -> ExperimentResult:
    """Execute one experiment and write the full artifact set into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", config)
    result = run_experiment(config)
    _write_metrics(out / "metrics.jsonl", result)
    _write_detection(out / "detection.csv", result)
    _write_correction(out / "correction.csv", result)
    _write_summary(out / "summary.csv", result)
    if not quiet:
        final = result.final_metrics
        print(
            f"[fedmask] {out}: final acc={final.accuracy:.4f} "
            f"macroF1={final.macro_f1:.4f} best={result.best_metrics.macro_f1:.4f}"
        )
    return result


def cmd_run(config: ExperimentConfig, out: Path) -> int:
    run_to_dir(config, out, quiet=False)
    return EXIT_OK


def _parse_sweep_args(base: ExperimentConfig, raw_sweeps: list[str], seeds_per_cell: int) -> SweepSpec:
    if not 1 <= len(raw_sweeps) <= 2:
        raise ConfigurationError("sweep takes one or two --sweep axes")
    axes = []
    valid = set(FIELD_KEYS)
    for spec in raw_sweeps:
        name, _, values = spec.partition("=")
        name = name.strip()
        if name not in valid:
            raise ConfigurationError(f"unknown sweep field {name!r}")
        if not values:
            raise ConfigurationError(f"sweep axis {name!r} needs values: {spec!r}")
        parsed = tuple(parse_field_value(name, part) for part in values.split(","))
        axes.append((name, parsed))
    seeds = tuple(base.seed + i for i in range(seeds_per_cell))
    return SweepSpec(base=base, params=tuple(axes), seeds=seeds)


def _cell_dir_name(cell: dict, seed: int) -> str:
    parts = [f"{name}_{value}" for name, value in cell.items()]
    parts.append(f"seed_{seed}")
    return "__".join(parts)


def cmd_sweep(spec: SweepSpec, out: Path) -> int:
    """Run every grid cell x seed; write sweep.csv; keep going on failures."""
    out.mkdir(parents=True, exist_ok=True)
    param_names = [p[0] for p in spec.params]
    rows = []
    failed = 0
    for cell in spec.cells():
        for seed in spec.seeds:
            cell_out = out / _cell_dir_name(cell, seed)
            row = [cell[name] for name in param_names] + [seed]
            try:
                config = replace(spec.base, **cell, seed=seed).validate()
                result = run_to_dir(config, cell_out)
                corr = result.rounds[-1].correction_accuracy
                row += [
                    repr(result.final_metrics.macro_f1),
                    repr(result.best_metrics.macro_f1),
                    "" if corr is None else repr(corr),
                    "ok",
                ]
            except FedmaskError as exc:
                cell_out.mkdir(parents=True, exist_ok=True)
                (cell_out / "error.txt").write_text(f"{exc}\n", encoding="utf-8")
                row += ["", "", "", "error"]
                failed += 1
            rows.append(row)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            param_names + ["seed", "final_macro_f1", "best_macro_f1", "correction_accuracy", "status"]
        )
        writer.writerows(rows)
    return EXIT_RUNTIME if failed else EXIT_OK


ABLATION_VARIANTS = tuple(
    itertools.product((True, False), ("geometric_median", "average", "coord_median"))
)


def cmd_ablate(config: ExperimentConfig, out: Path, seeds_per_cell: int) -> int:
    """Mask on/off x aggregation matrix with shared seeds; write ablation.csv."""
    out.mkdir(parents=True, exist_ok=True)
    seeds = [config.seed + i for i in range(seeds_per_cell)]
    rows = []
    failed = 0
    for mask_on, method in ABLATION_VARIANTS:
        for seed in seeds:
            name = f"mask_{'on' if mask_on else 'off'}__{method}__seed_{seed}"
            try:
                variant = replace(
                    config, mask_enabled=mask_on, aggregation=method, seed=seed
                ).validate()
                result = run_to_dir(variant, out / name)
                final = result.final_metrics
                rows.append(
                    [
                        "on" if mask_on else "off",
                        method,
                        seed,
                        repr(final.macro_precision),
                        repr(final.macro_recall),
                        repr(final.macro_f1),
                        repr(final.accuracy),
                    ]
                )
            except FedmaskError as exc:
                (out / name).mkdir(parents=True, exist_ok=True)
                (out / name / "error.txt").write_text(f"{exc}\n", encoding="utf-8")
                rows.append(["on" if mask_on else "off", method, seed, "", "", "", ""])
                failed += 1
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["mask", "aggregation", "seed", "macro_precision", "macro_recall", "macro_f1", "accuracy"]
        )
        writer.writerows(rows)
    return EXIT_RUNTIME if failed else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = parse_config(args.config, _collect_overrides(args))
        if args.command == "run":
            return cmd_run(config, args.out)
        if args.command == "sweep":
            spec = _parse_sweep_args(config, args.sweep, args.seeds_per_cell)
            return cmd_sweep(spec, args.out)
        if args.command == "ablate":
            return cmd_ablate(config, args.out, args.seeds_per_cell)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
