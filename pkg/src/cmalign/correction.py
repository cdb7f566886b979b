"""History-based joint label correction.

Every (sample, modality) pair keeps a FIFO of its last ``h`` hardened
self-predictions. Per modality, the most frequent label in that history is
the modality's consistent label (ties break toward the most recently pushed
among the tied labels). The per-object criterion intersects the modalities'
consistent labels: unanimous agreement yields a single candidate label,
which either confirms the given label (clean) or replaces it (corrected);
disagreement leaves the object unresolved.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

__all__ = [
    "Status",
    "NotWarmedUpError",
    "HistoryBank",
    "CorrectionResult",
    "intra_consistency",
    "joint_correct",
    "intra_only_correct",
    "inter_only_correct",
    "correction_accuracy",
]

UNRESOLVED_LABEL = -1


class Status(IntEnum):
    CLEAN = 0
    CORRECTED = 1
    UNRESOLVED = 2


class NotWarmedUpError(RuntimeError):
    """A consistency query hit an empty prediction history."""


class HistoryBank:
    """Per (sample, modality) FIFO of the last ``capacity`` predicted labels.

    All queues advance together: one ``update`` per epoch pushes the argmax
    label of every prediction row (argmax ties resolve to the lowest class
    index). Eviction is strictly first-in first-out.
    """

    def __init__(self, n_samples: int, n_modalities: int, capacity: int = 5):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.n_samples = n_samples
        self.n_modalities = n_modalities
        self.capacity = capacity
        self._buf = np.zeros((n_samples, n_modalities, capacity), dtype=np.int64)
        self._ptr = 0           # next slot to overwrite once full
        self._len = 0
        self._slot_epochs = np.full(capacity, -1, dtype=np.int64)

    def __len__(self) -> int:
        return self._len

    @property
    def is_warm(self) -> bool:
        return self._len > 0

    def update(self, epoch: int, predictions: list[np.ndarray]) -> None:
        """Push argmax labels from per-modality probability rows [N, K]."""
        if len(predictions) != self.n_modalities:
            raise IndexError(f"expected {self.n_modalities} modalities, got {len(predictions)}")
        labels = np.empty((self.n_samples, self.n_modalities), dtype=np.int64)
        for j, probs in enumerate(predictions):
            if probs.shape[0] != self.n_samples:
                raise IndexError(f"modality {j}: {probs.shape[0]} rows for {self.n_samples} samples")
            labels[:, j] = np.argmax(probs, axis=1)
        self.push_labels(epoch, labels)

    def push_labels(self, epoch: int, labels: np.ndarray) -> None:
        """Push already-hardened labels [N, M]."""
        if labels.shape != (self.n_samples, self.n_modalities):
            raise IndexError(f"labels shape {labels.shape} != "
                             f"({self.n_samples}, {self.n_modalities})")
        self._buf[:, :, self._ptr] = labels
        self._slot_epochs[self._ptr] = epoch
        self._ptr = (self._ptr + 1) % self.capacity
        self._len = min(self._len + 1, self.capacity)

    def contents(self, sample: int, modality: int) -> np.ndarray:
        """Stored labels for one queue, oldest to newest."""
        if not (0 <= sample < self.n_samples and 0 <= modality < self.n_modalities):
            raise IndexError(f"(sample={sample}, modality={modality}) out of range")
        if self._len < self.capacity:
            return self._buf[sample, modality, :self._len].copy()
        idx = (np.arange(self.capacity) + self._ptr) % self.capacity
        return self._buf[sample, modality, idx]

    def newest_labels(self) -> np.ndarray:
        """Most recently pushed label per (sample, modality)."""
        if self._len == 0:
            raise NotWarmedUpError("history bank is empty")
        newest = (self._ptr - 1) % self.capacity
        return self._buf[:, :, newest].copy()


def _mode_most_recent(queue: np.ndarray) -> int:
    """Most frequent label; ties go to the tied label seen most recently."""
    counts: dict[int, int] = {}
    last_pos: dict[int, int] = {}
    for pos, lab in enumerate(queue):
        lab = int(lab)
        counts[lab] = counts.get(lab, 0) + 1
        last_pos[lab] = pos
    best = max(counts.values())
    tied = [lab for lab, c in counts.items() if c == best]
    return max(tied, key=lambda lab: last_pos[lab])


def intra_consistency(bank: HistoryBank, sample: int, modality: int) -> int:
    """The modality's consistent label: mode of its history queue."""
    queue = bank.contents(sample, modality)
    if queue.size == 0:
        raise NotWarmedUpError(f"empty history for sample {sample}, modality {modality}")
    return _mode_most_recent(queue)


@dataclass
class CorrectionResult:
    """Vectorized verdicts for a whole training set.

    ``statuses`` and ``effective_labels`` are [N, M]; in per-object modes
    every modality column is identical and ``agreed_labels`` holds the
    unanimous candidate (or -1 where the intersection is empty).
    Effective labels are the given label for clean entries, the candidate
    label for corrected entries, and -1 for unresolved ones.
    """

    intra_labels: np.ndarray      # [N, M]
    statuses: np.ndarray          # [N, M] of Status values
    effective_labels: np.ndarray  # [N, M]
    per_object: bool
    agreed_labels: np.ndarray | None = None  # [N] in per-object modes

    @property
    def n_units(self) -> int:
        """Partition denominator: objects in per-object modes, pairs otherwise."""
        n, m = self.statuses.shape
        return n if self.per_object else n * m

    def _unit_statuses(self) -> np.ndarray:
        return self.statuses[:, 0] if self.per_object else self.statuses.ravel()

    @property
    def clean_count(self) -> int:
        return int((self._unit_statuses() == Status.CLEAN).sum())

    @property
    def noisy_count(self) -> int:
        return self.n_units - self.clean_count

    @property
    def corrected_count(self) -> int:
        return int((self._unit_statuses() == Status.CORRECTED).sum())

    @property
    def unresolved_count(self) -> int:
        return int((self._unit_statuses() == Status.UNRESOLVED).sum())


def _statuses_from_candidates(candidates: np.ndarray, given: np.ndarray,
                              resolved: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    statuses = np.where(~resolved, int(Status.UNRESOLVED),
                        np.where(candidates == given, int(Status.CLEAN), int(Status.CORRECTED)))
    effective = np.where(~resolved, UNRESOLVED_LABEL, candidates)
    return statuses.astype(np.int8), effective.astype(np.int64)


def _intra_matrix(bank: HistoryBank) -> np.ndarray:
    out = np.empty((bank.n_samples, bank.n_modalities), dtype=np.int64)
    for i in range(bank.n_samples):
        for j in range(bank.n_modalities):
            out[i, j] = intra_consistency(bank, i, j)
    return out


def joint_correct(bank: HistoryBank, given_labels: np.ndarray) -> CorrectionResult:
    """Full correction: per-modality consistent labels intersected per object."""
    if not bank.is_warm:
        raise NotWarmedUpError("history bank has no entries yet")
    intra = _intra_matrix(bank)
    unanimous = (intra == intra[:, :1]).all(axis=1)
    candidates = intra[:, 0]
    statuses_obj, effective_obj = _statuses_from_candidates(candidates, given_labels, unanimous)
    m = bank.n_modalities
    agreed = np.where(unanimous, candidates, UNRESOLVED_LABEL)
    return CorrectionResult(
        intra_labels=intra,
        statuses=np.repeat(statuses_obj[:, None], m, axis=1),
        effective_labels=np.repeat(effective_obj[:, None], m, axis=1),
        per_object=True,
        agreed_labels=agreed,
    )


def intra_only_correct(bank: HistoryBank, given_labels: np.ndarray) -> CorrectionResult:
    """Ablation: each modality's consistent label acts alone, no intersection.

    Verdicts become per (sample, modality); every pair is resolved (a single
    modality never disagrees with itself), so no entry is unresolved.
    """
    if not bank.is_warm:
        raise NotWarmedUpError("history bank has no entries yet")
    intra = _intra_matrix(bank)
    given = np.asarray(given_labels)[:, None]
    statuses = np.where(intra == given, int(Status.CLEAN), int(Status.CORRECTED)).astype(np.int8)
    return CorrectionResult(intra_labels=intra, statuses=statuses,
                            effective_labels=intra.astype(np.int64), per_object=False)


def inter_only_correct(bank: HistoryBank, given_labels: np.ndarray) -> CorrectionResult:
    """Ablation: intersect only the newest prediction per modality (no history)."""
    newest = bank.newest_labels()
    unanimous = (newest == newest[:, :1]).all(axis=1)
    candidates = newest[:, 0]
    statuses_obj, effective_obj = _statuses_from_candidates(candidates, given_labels, unanimous)
    m = bank.n_modalities
    agreed = np.where(unanimous, candidates, UNRESOLVED_LABEL)
    return CorrectionResult(
        intra_labels=newest,
        statuses=np.repeat(statuses_obj[:, None], m, axis=1),
        effective_labels=np.repeat(effective_obj[:, None], m, axis=1),
        per_object=True,
        agreed_labels=agreed,
    )


def correction_accuracy(result: CorrectionResult, true_labels: np.ndarray) -> float | None:
    """Fraction of resolved units whose effective label is the true label.

    Unresolved units leave the denominator; returns None when everything is
    unresolved.
    """
    true = np.asarray(true_labels)
    if result.per_object:
        statuses = result.statuses[:, 0]
        effective = result.effective_labels[:, 0]
    else:
        statuses = result.statuses.ravel()
        effective = result.effective_labels.ravel()
        true = np.repeat(true[:, None], result.statuses.shape[1], axis=1).ravel()
    resolved = statuses != Status.UNRESOLVED
    if not resolved.any():
        return None
    return float((effective[resolved] == true[resolved]).mean())
