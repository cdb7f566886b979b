"""Command-line front end: config parsing, experiment orchestration, artifacts.

Verbs: ``run`` (dispatches on the configured mode), ``sweep``, ``ablate``,
``gradcheck``, and ``compare``. Configuration is a JSON tree (documented in
the README); flag overrides take precedence over the file, with ``--set
dotted.key=value`` for anything without a dedicated flag.

Every run directory receives ``config.echo`` (the fully resolved
configuration), ``report.csv`` (schema v1; byte-identical across identical
runs), ``summary.json``, and ``events.jsonl`` (one structured record per
epoch plus run start/end).

Exit codes: 0 success, 2 invalid configuration, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import ConfigError, DatasetSpec, generate, inject_symmetric_noise
from .training import (CE_BASELINE_OVERRIDES, REPORT_SCHEMA_VERSION, TrainConfig, TrainResult,
                       TrainingDivergedError, benchmark_train_config, compare_with_baseline,
                       derive_noise_seed, evaluate_retrieval, gradient_check_suite,
                       report_csv_lines, run_ablation_suite, run_training)

__all__ = ["ExperimentConfig", "main"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

MODES = ("single", "sweep", "ablation", "gradcheck", "compare")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=lambda: benchmark_train_config(seed=1))
    mode: str = "single"
    noise_rates: list[float] = field(default_factory=lambda: [0.4])
    seeds: list[int] | None = None          # defaults to [train.seed]
    output_dir: str = "runs/experiment"
    noise_seed: int | None = None           # derived per rate when None
    dump_per_query_ap: bool = False
    gradcheck_tol: float = 1e-4
    gradcheck_seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        for r in self.noise_rates:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"noise_rates: {r} outside [0, 1]")
        if not self.noise_rates:
            raise ConfigError("noise_rates: must not be empty")
        self.dataset.validate()
        self.train.validate()

    def effective_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.train.seed]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "train": self.train.to_dict(),
            "mode": self.mode,
            "noise_rates": list(self.noise_rates),
            "seeds": list(self.seeds) if self.seeds is not None else None,
            "output_dir": self.output_dir,
            "noise_seed": self.noise_seed,
            "dump_per_query_ap": self.dump_per_query_ap,
            "gradcheck_tol": self.gradcheck_tol,
            "gradcheck_seed": self.gradcheck_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        kwargs = dict(d)
        if "dataset" in kwargs:
            kwargs["dataset"] = DatasetSpec.from_dict(kwargs["dataset"])
        if "train" in kwargs:
            kwargs["train"] = TrainConfig.from_dict(kwargs["train"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


# -- config loading and overrides ----------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_set(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a table")
    node[parts[-1]] = _parse_value(value)


def _load_raw_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a JSON object")
    return raw


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    raw = _load_raw_config(args.config)
    for assignment in args.set or []:
        _apply_set(raw, assignment)
    # dedicated flags outrank --set
    if getattr(args, "mode", None):
        raw["mode"] = args.mode
    if getattr(args, "noise", None):
        raw["noise_rates"] = [float(x) for x in args.noise.split(",") if x]
    if getattr(args, "seed", None) is not None:
        raw.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "seeds", None):
        raw["seeds"] = [int(x) for x in args.seeds.split(",") if x]
    if getattr(args, "epochs", None) is not None:
        raw.setdefault("train", {})["epochs"] = args.epochs
    if getattr(args, "out", None):
        raw["output_dir"] = args.out
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as e:
        raise ConfigError(str(e)) from e


# -- artifact helpers -----------------------------------------------------------


def _run_id(config: ExperimentConfig, tag: str) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True) + tag
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def _write_config_echo(outdir: Path, config: ExperimentConfig) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.echo").write_text(
        json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")


def _write_events(outdir: Path, run_id: str, result: TrainResult) -> None:
    with open(outdir / "events.jsonl", "w") as fh:
        fh.write(json.dumps({"run_id": run_id, "event": "run_start",
                             "epochs": result.config.epochs}) + "\n")
        for r in result.reports:
            fh.write(json.dumps({
                "run_id": run_id, "event": "epoch", "epoch": r.epoch,
                "loss": r.losses.total, "clean": r.clean_count,
                "unresolved": r.unresolved_count,
                "test_map_1to2": r.test_map_1to2, "test_map_2to1": r.test_map_2to1,
            }) + "\n")
        fh.write(json.dumps({"run_id": run_id, "event": "run_end"}) + "\n")


def _write_run_artifacts(outdir: Path, config: ExperimentConfig, result: TrainResult,
                         dataset, noise_seed: int, rate: float, tag: str) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    run_id = _run_id(config, tag)
    (outdir / "report.csv").write_text("\n".join(report_csv_lines(result.reports)) + "\n")
    _write_events(outdir, run_id, result)
    summary = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "package_version": __version__,
        "run_id": run_id,
        "mode": config.mode,
        "noise_rate": rate,
        "noise_seed": noise_seed,
        "seed": result.config.seed,
        "config": config.to_dict(),
        "results": result.summary(),
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if config.dump_per_query_ap:
        report = evaluate_retrieval(result, dataset)
        for name, direction in (("ap_1to2", report.dir_1to2), ("ap_2to1", report.dir_2to1)):
            lines = ["query_index,average_precision"]
            lines += [f"{i},{'' if np.isnan(v) else repr(float(v))}"
                      for i, v in enumerate(direction.per_query_ap)]
            (outdir / f"{name}.csv").write_text("\n".join(lines) + "\n")
    return summary


def _single_run(config: ExperimentConfig, rate: float, seed: int, outdir: Path,
                tag: str) -> tuple[TrainResult, dict]:
    spec = replace(config.dataset, seed=seed)
    noise_seed = config.noise_seed if config.noise_seed is not None \
        else derive_noise_seed(seed, rate)
    dataset = inject_symmetric_noise(generate(spec), rate, noise_seed)
    cfg = replace(config.train, seed=seed)
    result = run_training(dataset, cfg)
    summary = _write_run_artifacts(outdir, config, result, dataset, noise_seed, rate, tag)
    return result, summary


# -- mode implementations --------------------------------------------------------


def _cmd_single(config: ExperimentConfig) -> int:
    outdir = Path(config.output_dir)
    _write_config_echo(outdir, config)
    rate = config.noise_rates[0]
    result, summary = _single_run(config, rate, config.train.seed, outdir, "single")
    last = result.final
    print(f"done: {len(result.reports)} epochs, noise={rate:g}, "
          f"test mAP {last.test_map_1to2:.3f}/{last.test_map_2to1:.3f}, "
          f"correction_accuracy={last.correction_accuracy}")
    return EXIT_OK


def _cmd_sweep(config: ExperimentConfig) -> int:
    outdir = Path(config.output_dir)
    _write_config_echo(outdir, config)
    rows = []
    for rate in config.noise_rates:
        per_seed = []
        for seed in config.effective_seeds():
            subdir = outdir / f"rate{rate:g}_seed{seed}"
            result, _ = _single_run(config, rate, seed, subdir, f"sweep:{rate}:{seed}")
            last = result.final
            per_seed.append((last.test_map_1to2, last.test_map_2to1))
        mean12 = float(np.mean([p[0] for p in per_seed]))
        mean21 = float(np.mean([p[1] for p in per_seed]))
        rows.append({"noise_rate": rate, "test_map_1to2": mean12, "test_map_2to1": mean21,
                     "seeds": config.effective_seeds()})
        print(f"rate={rate:g}: test mAP {mean12:.3f}/{mean21:.3f}")
    _write_table(outdir, config, rows, ["noise_rate", "test_map_1to2", "test_map_2to1"])
    return EXIT_OK


def _cmd_ablation(config: ExperimentConfig) -> int:
    outdir = Path(config.output_dir)
    _write_config_echo(outdir, config)

    def on_run(name, rate, seed, result):
        subdir = outdir / f"rate{rate:g}_{name}_seed{seed}"
        subdir.mkdir(parents=True, exist_ok=True)
        (subdir / "report.csv").write_text("\n".join(report_csv_lines(result.reports)) + "\n")
        _write_events(subdir, _run_id(config, f"ablate:{name}:{rate}:{seed}"), result)

    rows = run_ablation_suite(config.dataset, config.noise_rates, config.train,
                              seeds=config.effective_seeds(), on_run=on_run)
    for row in rows:
        print(f"rate={row['noise_rate']:g} cell={row['cell']:<14} seed={row['seed']} "
              f"mAP={row['test_map_mean']:.3f} corr_acc={row['correction_accuracy']}")
    _write_table(outdir, config, rows,
                 ["noise_rate", "cell", "seed", "test_map_1to2", "test_map_2to1",
                  "test_map_mean", "correction_accuracy", "clean_count", "noisy_count",
                  "unresolved_count"])
    return EXIT_OK


def _cmd_compare(config: ExperimentConfig) -> int:
    outdir = Path(config.output_dir)
    _write_config_echo(outdir, config)

    def on_run(variant, rate, seed, result):
        subdir = outdir / f"rate{rate:g}_{variant}_seed{seed}"
        subdir.mkdir(parents=True, exist_ok=True)
        (subdir / "report.csv").write_text("\n".join(report_csv_lines(result.reports)) + "\n")

    rows = compare_with_baseline(config.dataset, config.noise_rates, config.train,
                                 seeds=config.effective_seeds(), on_run=on_run)
    for row in rows:
        print(f"rate={row['noise_rate']:g}: full={row['full_map']:.3f} "
              f"ce_only={row['ce_only_map']:.3f} delta={row['delta']:+.3f}")
    _write_table(outdir, config, rows, ["noise_rate", "full_map", "ce_only_map", "delta"])
    return EXIT_OK


def _cmd_gradcheck(config: ExperimentConfig) -> int:
    outdir = Path(config.output_dir)
    _write_config_echo(outdir, config)
    reports = gradient_check_suite(seed=config.gradcheck_seed, tol=config.gradcheck_tol)
    all_pass = True
    results = {}
    for name, rep in reports.items():
        status = "pass" if rep.passed else "FAIL"
        print(f"{name:<12} max_rel_err={rep.max_rel_error:.3e} "
              f"(n={rep.n_coordinates}, tol={rep.tol:g}) {status}")
        results[name] = {"max_rel_error": rep.max_rel_error, "worst_index": rep.worst_index,
                         "n_coordinates": rep.n_coordinates, "passed": rep.passed}
        all_pass = all_pass and rep.passed
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "summary.json").write_text(json.dumps(
        {"mode": "gradcheck", "package_version": __version__, "results": results,
         "all_passed": all_pass}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if all_pass else 1


def _write_table(outdir: Path, config: ExperimentConfig, rows: list[dict],
                 columns: list[str]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(c)) for c in columns))
    (outdir / "report.csv").write_text("\n".join(lines) + "\n")
    (outdir / "summary.json").write_text(json.dumps(
        {"schema_version": REPORT_SCHEMA_VERSION, "package_version": __version__,
         "mode": config.mode, "config": config.to_dict(), "rows": rows},
        indent=2, sort_keys=True) + "\n")


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ";".join(str(x) for x in v)
    return str(v)


# -- argument parsing ------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON experiment config file")
    sub.add_argument("--out", help="output directory (overrides config)")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any config key, e.g. --set train.lr=0.001")
    sub.add_argument("--noise", help="comma-separated noise rates, e.g. 0.2,0.4")
    sub.add_argument("--seed", type=int, help="training/dataset seed")
    sub.add_argument("--seeds", help="comma-separated seed list for sweeps/compares")
    sub.add_argument("--epochs", type=int, help="override train.epochs")
    sub.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmalign",
        description="Cross-modal retrieval training under symmetric label noise "
                    "with history-based correction and multi-level alignment.")
    subs = parser.add_subparsers(dest="verb", required=True)

    run = subs.add_parser("run", help="execute the configured mode (default: single run)")
    _add_common(run)
    run.add_argument("--mode", choices=MODES, help="override the configured mode")

    for verb, help_text in (("sweep", "one run per noise rate"),
                            ("ablate", "correction/loss ablation grid"),
                            ("compare", "full method vs plain-CE baseline"),
                            ("gradcheck", "finite-difference gradient suite")):
        sub = subs.add_parser(verb, help=help_text)
        _add_common(sub)
    return parser


_DISPATCH = {
    "single": _cmd_single,
    "sweep": _cmd_sweep,
    "ablation": _cmd_ablation,
    "gradcheck": _cmd_gradcheck,
    "compare": _cmd_compare,
}

_VERB_MODE = {"sweep": "sweep", "ablate": "ablation", "gradcheck": "gradcheck",
              "compare": "compare"}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb in _VERB_MODE and not getattr(args, "mode", None):
            args.mode = _VERB_MODE[args.verb]
        config = resolve_config(args)
        started = time.perf_counter()
        code = _DISPATCH[config.mode](config)
        logger.info("finished in %.1fs", time.perf_counter() - started)
        return code
    except ConfigError as e:
        sys.stderr.write(json.dumps({"error": "config", "detail": str(e)}) + "\n")
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        sys.stderr.write(json.dumps({"error": "diverged", "detail": str(e),
                                     "epoch": e.epoch, "batch": e.batch_index}) + "\n")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
