"""Training orchestration: warmup, per-epoch correction, adaptive losses,
Adam updates, evaluation, and the ablation/comparison drivers.

Epoch layout: verdicts for the epoch come from the history bank as it stood
at the end of the previous epoch; minibatches then train with the adaptive
routing; the epoch closes with a full-train-set inference pass at the final
parameter snapshot, which feeds the bank exactly once per epoch. During
warmup (and whenever correction is disabled) every sample is treated as
clean under its given label.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import encoders
from .autodiff import NumericError, Tensor, l2_normalize_rows, softmax_rows
from .correction import (CorrectionResult, HistoryBank, Status, correction_accuracy,
                         inter_only_correct, intra_only_correct, joint_correct)
from .data import ConfigError, MultimodalDataset, DatasetSpec, generate, inject_symmetric_noise
from .encoders import EncoderConfig
from .losses import (GroupMemory, LossBreakdown, center_loss, classifier_loss, group_loss,
                     instance_loss, renormalize_centers, total_loss)
from .optim import Adam, GradCheckReport, check_gradient
from .retrieval import bidirectional_map

__all__ = [
    "TrainConfig",
    "EpochReport",
    "TrainResult",
    "TrainingDivergedError",
    "run_training",
    "run_ablation_suite",
    "compare_with_baseline",
    "DEFAULT_ABLATION_CELLS",
    "gradient_check_suite",
    "benchmark_train_config",
    "derive_noise_seed",
    "report_csv_lines",
    "embed_dataset",
    "evaluate_retrieval",
]

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

REPORT_COLUMNS = [
    "epoch", "lr",
    "loss_total", "loss_center", "loss_group", "loss_instance", "loss_classifier",
    "clean_count", "noisy_count", "unresolved_count", "correction_accuracy",
    "train_map_1to2", "train_map_2to1", "test_map_1to2", "test_map_2to1",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch_index}: {detail}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 50
    warmup_epochs: int = 5
    history_len: int = 5
    group_size: int = 8
    center_temperature: float = 0.1
    memory_temperature: float = 0.1
    classifier_weight: float = 1.0
    emb_dim: int = 32
    hidden_dim: int = 64
    seed: int = 0
    use_intra_only: bool = False
    use_inter_only: bool = False
    enable_center: bool = True
    enable_group: bool = True
    enable_instance: bool = True
    enable_correction: bool = True
    eval_train_map: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be >= 1 (the bank needs one entry)")
        if self.history_len < 1 or self.group_size < 1:
            raise ConfigError("history_len and group_size must be >= 1")
        if self.center_temperature <= 0 or self.memory_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        if self.lr <= 0 or self.lr_decay_factor <= 0 or self.lr_decay_interval < 1:
            raise ConfigError("lr, lr_decay_factor must be positive; lr_decay_interval >= 1")
        if self.use_intra_only and self.use_inter_only:
            raise ConfigError("use_intra_only and use_inter_only are mutually exclusive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"train: unknown keys {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def benchmark_train_config(seed: int = 1, **overrides) -> TrainConfig:
    """Training settings for the shipped synthetic benchmark.

    The dataclass defaults above describe the generic schedule; the
    benchmark uses a shorter, hotter one so a full run converges in seconds
    (tiny encoders trained from scratch need a larger step than the
    fine-tuning-scale default lr).
    """
    base = dict(epochs=60, lr=2e-3, lr_decay_interval=40, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EpochReport:
    epoch: int
    lr: float
    losses: LossBreakdown
    clean_count: int
    noisy_count: int
    unresolved_count: int
    correction_accuracy: float | None
    train_map_1to2: float | None
    train_map_2to1: float | None
    test_map_1to2: float
    test_map_2to1: float
    wall_clock_s: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    encoder_config: EncoderConfig
    bank: HistoryBank
    memory: GroupMemory
    reports: list[EpochReport]
    config: TrainConfig
    label_reads_after_warmup: int
    final_verdicts: CorrectionResult | None = None

    @property
    def final(self) -> EpochReport:
        return self.reports[-1]

    def summary(self) -> dict:
        last = self.final
        return {
            "epochs": len(self.reports),
            "final_test_map_1to2": last.test_map_1to2,
            "final_test_map_2to1": last.test_map_2to1,
            "final_train_map_1to2": last.train_map_1to2,
            "final_train_map_2to1": last.train_map_2to1,
            "final_correction_accuracy": last.correction_accuracy,
            "final_clean_count": last.clean_count,
            "final_noisy_count": last.noisy_count,
            "final_unresolved_count": last.unresolved_count,
            "final_loss": last.losses.total,
            "total_wall_clock_s": sum(r.wall_clock_s for r in self.reports),
        }


class _LabelAudit:
    """Counts optimization-path reads of training labels (supports the
    label-freedom property of the instance-only configuration)."""

    def __init__(self, warmup_epochs: int):
        self.warmup_epochs = warmup_epochs
        self.epoch = 0
        self.reads_after_warmup = 0

    def read(self, labels: np.ndarray, context: str) -> np.ndarray:
        if self.epoch > self.warmup_epochs:
            self.reads_after_warmup += 1
            logger.debug("label read after warmup: %s (epoch %d)", context, self.epoch)
        return labels


def _as_param_tensors(params: dict[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _infer_embeddings(params: dict[str, np.ndarray], features: Sequence[np.ndarray]) -> list[np.ndarray]:
    frozen = _as_param_tensors(params, requires_grad=False)
    return [encoders.embed(frozen, j, Tensor(f)).value for j, f in enumerate(features)]


def _infer_probabilities(params: dict[str, np.ndarray], embeddings: Sequence[np.ndarray]) -> list[np.ndarray]:
    frozen = _as_param_tensors(params, requires_grad=False)
    return [encoders.predict(frozen, Tensor(z)).value for z in embeddings]


def embed_dataset(params: dict[str, np.ndarray], features: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Unit-norm embeddings for each modality at a frozen parameter snapshot."""
    return _infer_embeddings(params, features)


def evaluate_retrieval(result: TrainResult, dataset: MultimodalDataset):
    """Bidirectional test-split retrieval report for a finished run."""
    emb = _infer_embeddings(result.params, dataset.test.features)
    return bidirectional_map(emb[0], emb[1], dataset.test.true_labels, dataset.test.true_labels)


def run_training(dataset: MultimodalDataset, config: TrainConfig) -> TrainResult:
    """Train encoders/classifier/centers on one dataset; deterministic given seed."""
    config.validate()
    spec = dataset.spec
    n = dataset.train.n
    m = spec.n_modalities
    if config.batch_size > n:
        raise ConfigError(f"batch_size {config.batch_size} exceeds n_train {n}")

    enc_cfg = EncoderConfig(input_dims=spec.ambient_dims, n_classes=spec.n_classes,
                            hidden_dim=config.hidden_dim, emb_dim=config.emb_dim)
    rng = np.random.default_rng(config.seed)
    params = encoders.init_params(enc_cfg, rng)
    adam = Adam(params, lr=config.lr)
    bank = HistoryBank(n, m, config.history_len)
    memory = GroupMemory(spec.n_classes, m, config.group_size, config.emb_dim)
    audit = _LabelAudit(config.warmup_epochs)
    needs_labels = (config.enable_center or config.enable_group
                    or config.classifier_weight != 0.0)

    reports: list[EpochReport] = []
    verdicts: CorrectionResult | None = None
    train_feats = dataset.train.features
    test_feats = dataset.test.features

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        audit.epoch = epoch
        adam.lr = config.lr * config.lr_decay_factor ** ((epoch - 1) // config.lr_decay_interval)

        correcting = config.enable_correction and epoch > config.warmup_epochs
        if correcting:
            given = audit.read(dataset.train.given_labels, "correction")
            if config.use_intra_only:
                verdicts = intra_only_correct(bank, given)
            elif config.use_inter_only:
                verdicts = inter_only_correct(bank, given)
            else:
                verdicts = joint_correct(bank, given)
            statuses_all = verdicts.statuses
            effective_all = verdicts.effective_labels
        else:
            verdicts = None
            statuses_all = np.zeros((n, m), dtype=np.int8)  # everyone clean
            if needs_labels:
                given = audit.read(dataset.train.given_labels, "given-label training")
                effective_all = np.repeat(given[:, None], m, axis=1)
            else:
                effective_all = np.zeros((n, m), dtype=np.int64)  # content never consumed

        perm = rng.permutation(n)
        batch_breakdowns: list[LossBreakdown] = []
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            param_t = _as_param_tensors(params, requires_grad=True)
            try:
                embs = [encoders.embed(param_t, j, Tensor(train_feats[j][idx]))
                        for j in range(m)]
                probs = None
                if config.classifier_weight != 0.0:
                    probs = [encoders.predict(param_t, z) for z in embs]
                total, breakdown = total_loss(
                    embs, probs, statuses_all[idx], effective_all[idx],
                    centers=param_t["centers"],
                    memory=memory if config.enable_group else None,
                    center_temperature=config.center_temperature,
                    memory_temperature=config.memory_temperature,
                    classifier_weight=config.classifier_weight,
                    enable_center=config.enable_center,
                    enable_group=config.enable_group,
                    enable_instance=config.enable_instance,
                )
                if not np.isfinite(total.value):
                    raise NumericError(f"loss value {total.value!r}")
                total.backward()
                grads = {k: (t.grad if t.grad is not None else np.zeros_like(params[k]))
                         for k, t in param_t.items()}
                adam.step(params, grads)
            except NumericError as e:
                raise TrainingDivergedError(epoch, batch_index, str(e)) from e
            renormalize_centers(params["centers"])
            if config.enable_group:
                memory.push_batch([z.value for z in embs], statuses_all[idx],
                                  effective_all[idx], epoch)
            batch_breakdowns.append(breakdown)

        # epoch-end inference pass at a consistent parameter snapshot
        train_emb = None
        if config.enable_correction or config.eval_train_map:
            train_emb = _infer_embeddings(params, train_feats)
        if config.enable_correction:
            bank.update(epoch, _infer_probabilities(params, train_emb))

        if config.eval_train_map:
            train_report = bidirectional_map(train_emb[0], train_emb[1],
                                             dataset.train.true_labels,
                                             dataset.train.true_labels)
            train_map = (train_report.map_1to2, train_report.map_2to1)
        else:
            train_map = (None, None)
        test_emb = _infer_embeddings(params, test_feats)
        test_report = bidirectional_map(test_emb[0], test_emb[1],
                                        dataset.test.true_labels, dataset.test.true_labels)

        if verdicts is not None:
            acc = correction_accuracy(verdicts, dataset.train.true_labels)
            clean, noisy, unresolved = (verdicts.clean_count, verdicts.noisy_count,
                                        verdicts.unresolved_count)
        else:
            acc = None
            clean, noisy, unresolved = n, 0, 0

        reports.append(EpochReport(
            epoch=epoch, lr=adam.lr, losses=_mean_breakdown(batch_breakdowns),
            clean_count=clean, noisy_count=noisy, unresolved_count=unresolved,
            correction_accuracy=acc,
            train_map_1to2=train_map[0], train_map_2to1=train_map[1],
            test_map_1to2=test_report.map_1to2, test_map_2to1=test_report.map_2to1,
            wall_clock_s=time.perf_counter() - t0,
        ))

    return TrainResult(params=params, encoder_config=enc_cfg, bank=bank, memory=memory,
                       reports=reports, config=config,
                       label_reads_after_warmup=audit.reads_after_warmup,
                       final_verdicts=verdicts)


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    n = max(len(parts), 1)
    return LossBreakdown(
        center=sum(p.center for p in parts) / n,
        group=sum(p.group for p in parts) / n,
        instance=sum(p.instance for p in parts) / n,
        classifier=sum(p.classifier for p in parts) / n,
        total=sum(p.total for p in parts) / n,
        classifier_weight=parts[0].classifier_weight if parts else 0.0,
        center_anchors=sum(p.center_anchors for p in parts),
        group_anchors=sum(p.group_anchors for p in parts),
        group_skipped=sum(p.group_skipped for p in parts),
        instance_anchors=sum(p.instance_anchors for p in parts),
        classifier_anchors=sum(p.classifier_anchors for p in parts),
    )


def derive_noise_seed(seed: int, rate: float) -> int:
    """Fixed, documented derivation so sweep cells are independently replayable."""
    return seed * 10007 + int(round(rate * 1000)) + 1


# -- experiment drivers -------------------------------------------------------

# Rows mirror the two ablation axes: correction variants under the full loss,
# then loss-level variants under full correction.
DEFAULT_ABLATION_CELLS: list[tuple[str, dict]] = [
    ("full", {}),
    ("intra_only", {"use_intra_only": True}),
    ("inter_only", {"use_inter_only": True}),
    ("no_center", {"enable_center": False}),
    ("center_only", {"enable_group": False, "enable_instance": False}),
    ("group_only", {"enable_center": False, "enable_instance": False}),
    ("instance_only", {"enable_center": False, "enable_group": False}),
]

CE_BASELINE_OVERRIDES = dict(enable_center=False, enable_group=False,
                             enable_instance=False, enable_correction=False)


def _run_cell(spec: DatasetSpec, rate: float, config: TrainConfig, seed: int) -> TrainResult:
    cell_spec = replace(spec, seed=seed)
    cell_cfg = replace(config, seed=seed)
    dataset = inject_symmetric_noise(generate(cell_spec), rate, derive_noise_seed(seed, rate))
    return run_training(dataset, cell_cfg)


def run_ablation_suite(spec: DatasetSpec, noise_rates: Sequence[float], config: TrainConfig,
                       cells: Sequence[tuple[str, dict]] | None = None,
                       seeds: Sequence[int] | None = None, on_run=None) -> list[dict]:
    """One row per (noise rate, cell, seed) with final metrics.

    ``on_run(cell_name, rate, seed, result)`` is invoked after each cell for
    callers that want to persist per-cell artifacts.
    """
    cells = list(cells) if cells is not None else DEFAULT_ABLATION_CELLS
    seeds = list(seeds) if seeds is not None else [config.seed]
    rows = []
    for rate in noise_rates:
        for name, overrides in cells:
            for seed in seeds:
                result = _run_cell(spec, rate, replace(config, **overrides), seed)
                if on_run is not None:
                    on_run(name, rate, seed, result)
                last = result.final
                rows.append({
                    "noise_rate": rate, "cell": name, "seed": seed,
                    "test_map_1to2": last.test_map_1to2, "test_map_2to1": last.test_map_2to1,
                    "test_map_mean": 0.5 * (last.test_map_1to2 + last.test_map_2to1),
                    "correction_accuracy": last.correction_accuracy,
                    "clean_count": last.clean_count, "noisy_count": last.noisy_count,
                    "unresolved_count": last.unresolved_count,
                })
                logger.info("ablation cell done: rate=%.2f cell=%s seed=%d map=%.3f",
                            rate, name, seed, rows[-1]["test_map_mean"])
    return rows


def compare_with_baseline(spec: DatasetSpec, noise_rates: Sequence[float], config: TrainConfig,
                          seeds: Sequence[int] | None = None, on_run=None) -> list[dict]:
    """Full method vs a plain cross-entropy baseline (no correction, no
    alignment, CE on all samples with given labels), identical seeds."""
    seeds = list(seeds) if seeds is not None else [config.seed]
    rows = []
    for rate in noise_rates:
        per_variant = {}
        for variant, overrides in (("full", {}), ("ce_only", CE_BASELINE_OVERRIDES)):
            maps = []
            for seed in seeds:
                result = _run_cell(spec, rate, replace(config, **overrides), seed)
                if on_run is not None:
                    on_run(variant, rate, seed, result)
                last = result.final
                maps.append(0.5 * (last.test_map_1to2 + last.test_map_2to1))
            per_variant[variant] = float(np.mean(maps))
        rows.append({
            "noise_rate": rate,
            "full_map": per_variant["full"],
            "ce_only_map": per_variant["ce_only"],
            "delta": per_variant["full"] - per_variant["ce_only"],
            "seeds": list(seeds),
        })
        logger.info("compare rate=%.2f full=%.3f ce=%.3f delta=%+.3f", rate,
                    per_variant["full"], per_variant["ce_only"], rows[-1]["delta"])
    return rows


# -- gradient-check suite ------------------------------------------------------


def gradient_check_suite(seed: int = 0, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    """Finite-difference checks for each loss component and the assembled
    objective over all model parameters, on small randomized batches."""
    rng = np.random.default_rng(seed)
    b, k, m, emb = 4, 3, 2, 8
    reports: dict[str, GradCheckReport] = {}

    def unit_rows(a):
        return a / np.linalg.norm(a, axis=1, keepdims=True)

    # center: embeddings and centers jointly
    anchors = rng.normal(size=(b * m, emb))
    centers0 = unit_rows(rng.normal(size=(k, emb)))
    labels = rng.integers(0, k, size=b * m)

    def f_center(leaf):
        z = l2_normalize_rows(_slice2d(leaf, 0, b * m, emb))
        c = _slice2d(leaf, b * m, b * m + k, emb)
        return center_loss(z, labels, c, temperature=0.1)

    reports["center"] = check_gradient(
        f_center, np.concatenate([anchors.ravel(), centers0.ravel()]).reshape(b * m + k, emb),
        tol=tol)

    # group: anchors against a fixed memory snapshot
    mem_feats = unit_rows(rng.normal(size=(10, emb)))
    mem_labels = rng.integers(0, k, size=10)
    g_labels = rng.integers(0, k, size=b * m)

    def f_group(leaf):
        z = l2_normalize_rows(leaf)
        loss, _, _ = group_loss(z, g_labels, mem_feats, mem_labels, temperature=0.1)
        return loss

    reports["group"] = check_gradient(f_group, rng.normal(size=(b * m, emb)), tol=tol)

    # instance: both modality batches jointly
    def f_instance(leaf):
        za = l2_normalize_rows(_slice2d(leaf, 0, b, emb))
        zb = l2_normalize_rows(_slice2d(leaf, b, 2 * b, emb))
        return instance_loss([za, zb], temperature=0.1)

    reports["instance"] = check_gradient(f_instance, rng.normal(size=(2 * b, emb)), tol=tol)

    # classifier: gradient w.r.t. logits through softmax
    c_labels = rng.integers(0, k, size=b)

    def f_classifier(leaf):
        return classifier_loss(softmax_rows(leaf), c_labels)

    reports["classifier"] = check_gradient(f_classifier, rng.normal(size=(b, k)), tol=tol)

    # assembled total over every model parameter, mixed verdicts
    enc_cfg = EncoderConfig(input_dims=(5, 6), n_classes=k, hidden_dim=6, emb_dim=emb)
    params0 = encoders.init_params(enc_cfg, rng)
    manifest = encoders.param_manifest(enc_cfg)
    raw = [rng.normal(size=(b, d)) for d in enc_cfg.input_dims]
    statuses = rng.integers(0, 3, size=(b, m)).astype(np.int8)
    statuses[0, :] = Status.CLEAN  # keep every component populated
    statuses[1, 0] = Status.CORRECTED
    eff = rng.integers(0, k, size=(b, m)).astype(np.int64)
    eff[statuses == Status.UNRESOLVED] = -1
    memory = GroupMemory(k, m, group_size=3, emb_dim=emb)
    for lab in range(k):
        for j in range(m):
            memory.push(lab, j, unit_rows(rng.normal(size=(1, emb)))[0], epoch=0)

    from .autodiff import pack_arrays, unpack_tensor

    def f_total(leaf):
        p = unpack_tensor(leaf, manifest)
        embs = [encoders.embed(p, j, Tensor(raw[j])) for j in range(m)]
        probs = [encoders.predict(p, z) for z in embs]
        total, _ = total_loss(embs, probs, statuses, eff, centers=p["centers"],
                              memory=memory, center_temperature=0.1,
                              memory_temperature=0.1, classifier_weight=1.0)
        return total

    reports["total"] = check_gradient(f_total, pack_arrays([params0[name] for name, _ in manifest]),
                                      tol=tol)
    return reports


def _slice2d(leaf: Tensor, lo: int, hi: int, cols: int) -> Tensor:
    from .autodiff import reshape, slice1d
    flat = reshape(leaf, (leaf.value.size,))
    return reshape(slice1d(flat, lo * cols, hi * cols), (hi - lo, cols))


# -- report serialization ------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv_lines(reports: Sequence[EpochReport]) -> list[str]:
    """Deterministic CSV rows (schema v1); wall-clock intentionally excluded
    so identical runs produce byte-identical files."""
    lines = [",".join(REPORT_COLUMNS)]
    for r in reports:
        lines.append(",".join(_fmt(v) for v in [
            r.epoch, r.lr,
            r.losses.total, r.losses.center, r.losses.group, r.losses.instance,
            r.losses.classifier,
            r.clean_count, r.noisy_count, r.unresolved_count, r.correction_accuracy,
            r.train_map_1to2, r.train_map_2to1, r.test_map_1to2, r.test_map_2to1,
        ]))
    return lines
