"""Synthetic multimodal datasets with controlled symmetric label noise.

Objects live in a shared latent space: each class has a latent prototype,
objects scatter around their prototype, and every modality observes the
latent point through its own fixed random map followed by tanh plus
observation noise. Labels can then be corrupted symmetrically: with
probability ``rate`` an object's given label is resampled uniformly from the
other K-1 classes, the same corrupted label for all of its modalities.

Datasets round-trip through a line-delimited text format (JSON header line,
then one row per object) documented in ``save_dataset``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "DataFormatError",
    "DatasetSpec",
    "Split",
    "MultimodalDataset",
    "generate",
    "inject_symmetric_noise",
    "save_dataset",
    "load_dataset",
]

DATASET_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class DataFormatError(ValueError):
    """A dataset file does not match the expected layout or version."""


@dataclass(frozen=True)
class DatasetSpec:
    """Generation parameters for one synthetic multimodal dataset."""

    n_classes: int = 10
    n_train: int = 500
    n_test: int = 200
    n_modalities: int = 2
    latent_dim: int = 16
    ambient_dims: tuple[int, ...] = (64, 96)
    class_separation: float = 1.0
    within_class_sigma: float = 0.1
    modality_noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_modalities < 2:
            raise ConfigError(f"n_modalities must be >= 2, got {self.n_modalities}")
        if len(self.ambient_dims) != self.n_modalities:
            raise ConfigError(
                f"ambient_dims has {len(self.ambient_dims)} entries for {self.n_modalities} modalities")
        if self.latent_dim < 1 or any(d < 1 for d in self.ambient_dims):
            raise ConfigError("all dimensions must be >= 1")
        if self.n_train < self.n_classes:
            raise ConfigError(f"n_train={self.n_train} cannot cover {self.n_classes} classes")
        if self.n_test < 1:
            raise ConfigError(f"n_test must be >= 1, got {self.n_test}")
        if self.within_class_sigma < 0 or self.modality_noise_sigma < 0:
            raise ConfigError("sigmas must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ambient_dims"] = list(self.ambient_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"dataset: unknown keys {sorted(unknown)}")
        kwargs = dict(d)
        if "ambient_dims" in kwargs:
            kwargs["ambient_dims"] = tuple(kwargs["ambient_dims"])
        spec = cls(**kwargs)
        spec.validate()
        return spec


@dataclass
class Split:
    """One data split: per-modality feature matrices plus label vectors."""

    features: list[np.ndarray]  # one [N, d_j] float64 matrix per modality
    true_labels: np.ndarray     # [N] int64
    given_labels: np.ndarray    # [N] int64, equals true_labels until noise is injected

    @property
    def n(self) -> int:
        return int(self.true_labels.shape[0])


@dataclass
class MultimodalDataset:
    spec: DatasetSpec
    train: Split
    test: Split
    noise_rate: float = 0.0
    noise_seed: int | None = None
    latents: np.ndarray = field(default=None, repr=False)  # [N_train, L], kept for diagnostics

    @property
    def n_modalities(self) -> int:
        return self.spec.n_modalities


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    # round-robin assignment then shuffle: every class is populated, counts differ by <= 1
    labels = np.arange(n, dtype=np.int64) % k
    rng.shuffle(labels)
    return labels


def generate(spec: DatasetSpec) -> MultimodalDataset:
    """Generate a clean dataset (given labels equal true labels).

    Deterministic given the spec: one seeded generator consumed in a fixed
    order (prototypes, modality maps, then per-split labels/latents/noise).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    k, ldim = spec.n_classes, spec.latent_dim
    # prototypes spread ~ class_separation * sqrt(2L) apart in expectation
    prototypes = rng.normal(0.0, spec.class_separation, size=(k, ldim))
    maps = [rng.normal(0.0, 1.0 / np.sqrt(ldim), size=(d, ldim)) for d in spec.ambient_dims]

    def make_split(n: int) -> tuple[Split, np.ndarray]:
        labels = _balanced_labels(n, k, rng)
        latents = prototypes[labels] + rng.normal(0.0, spec.within_class_sigma, size=(n, ldim))
        feats = []
        for a in maps:
            clean_view = np.tanh(latents @ a.T)
            d = a.shape[0]
            feats.append(clean_view + rng.normal(0.0, spec.modality_noise_sigma, size=(n, d)))
        return Split(features=feats, true_labels=labels, given_labels=labels.copy()), latents

    train, train_latents = make_split(spec.n_train)
    test, _ = make_split(spec.n_test)
    return MultimodalDataset(spec=spec, train=train, test=test, latents=train_latents)


def inject_symmetric_noise(dataset: MultimodalDataset, rate: float, seed: int) -> MultimodalDataset:
    """Return a copy whose train given labels are symmetrically corrupted.

    Each training object independently, with probability ``rate``, gets its
    given label resampled uniformly from the K-1 classes different from its
    true label; the corrupted label is shared by all modalities of the
    object. True labels, features, object order and the test split are
    untouched (feature arrays are shared, not copied).
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"noise rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    k = dataset.spec.n_classes
    true = dataset.train.true_labels
    n = true.shape[0]
    flip = rng.random(n) < rate
    offsets = rng.integers(1, k, size=n)  # 1..K-1 never maps a label onto itself
    given = np.where(flip, (true + offsets) % k, true).astype(np.int64)
    train = Split(features=dataset.train.features, true_labels=true, given_labels=given)
    return MultimodalDataset(spec=dataset.spec, train=train, test=dataset.test,
                             noise_rate=rate, noise_seed=seed, latents=dataset.latents)


# -- text serialization -------------------------------------------------------


def _format_row(true_label: int, given_label: int, features: Sequence[np.ndarray], i: int) -> str:
    parts = [str(int(true_label)), str(int(given_label))]
    for f in features:
        parts.extend(repr(float(v)) for v in f[i])
    return " ".join(parts)


def save_dataset(dataset: MultimodalDataset, path: str) -> None:
    """Write a dataset as line-delimited text.

    Layout: line 1 is a JSON header {format, version, spec, noise_rate,
    noise_seed}; then n_train rows for the train split followed by n_test
    rows for the test split. Each row is whitespace-separated:
    ``true_label given_label f^1_1 .. f^1_{d_1} f^2_1 ..`` with floats
    printed via repr for exact round-tripping.
    """
    spec = dataset.spec
    header = {
        "format": "cmalign-dataset",
        "version": DATASET_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "noise_rate": dataset.noise_rate,
        "noise_seed": dataset.noise_seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in (dataset.train, dataset.test):
            for i in range(split.n):
                fh.write(_format_row(split.true_labels[i], split.given_labels[i],
                                     split.features, i) + "\n")


def load_dataset(path: str) -> MultimodalDataset:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"bad header line: {e}") from e
        if header.get("format") != "cmalign-dataset":
            raise DataFormatError(f"not a cmalign dataset file: {header.get('format')!r}")
        if header.get("version") != DATASET_FORMAT_VERSION:
            raise DataFormatError(f"unsupported dataset version {header.get('version')!r}")
        spec = DatasetSpec.from_dict(header["spec"])

        def read_split(n: int) -> Split:
            dims = spec.ambient_dims
            feats = [np.empty((n, d)) for d in dims]
            true = np.empty(n, dtype=np.int64)
            given = np.empty(n, dtype=np.int64)
            for i in range(n):
                line = fh.readline()
                if not line:
                    raise DataFormatError(f"truncated file: expected {n} rows")
                parts = line.split()
                expected = 2 + sum(dims)
                if len(parts) != expected:
                    raise DataFormatError(f"row {i}: expected {expected} fields, got {len(parts)}")
                true[i] = int(parts[0])
                given[i] = int(parts[1])
                offset = 2
                for f, d in zip(feats, dims):
                    f[i] = [float(v) for v in parts[offset:offset + d]]
                    offset += d
            return Split(features=feats, true_labels=true, given_labels=given)

        train = read_split(spec.n_train)
        test = read_split(spec.n_test)
    return MultimodalDataset(spec=spec, train=train, test=test,
                             noise_rate=header.get("noise_rate", 0.0),
                             noise_seed=header.get("noise_seed"))
