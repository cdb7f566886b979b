"""Multi-level alignment losses and the per-class feature memory.

Four components, each a -log of a ratio whose numerator terms are a subset
of its denominator terms (so every component is >= 0):

* center:    normalized-softmax pull of an embedding toward its class
             center against all K centers.
* group:     contrastive pull toward the stored features of the anchor's
             class group against all stored features (memory entries are
             gradient constants).
* instance:  label-free pull between the modality views of one object
             against every view in the batch; the self term is kept.
* classifier: cross-entropy of the predicted class distribution at the
             given label.

Each component is averaged over its own applicable anchors only, so its
scale does not depend on the clean/noisy mix. The overall objective is
(center + group + instance) + weight * classifier.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .correction import Status

__all__ = [
    "GroupMemory",
    "LossBreakdown",
    "init_centers",
    "renormalize_centers",
    "center_loss",
    "group_loss",
    "instance_loss",
    "classifier_loss",
    "total_loss",
]

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def init_centers(n_classes: int, emb_dim: int, rng: np.random.Generator) -> np.ndarray:
    centers = rng.normal(0.0, 1.0, size=(n_classes, emb_dim))
    return centers / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)


def renormalize_centers(centers: np.ndarray, eps: float = 1e-12) -> None:
    """Project center rows back onto the unit sphere (call after each optimizer step)."""
    centers /= np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), eps)


class GroupMemory:
    """Per-class, per-modality FIFO of stored unit embeddings.

    Capacity is n_classes * n_modalities * group_size; eviction within one
    (class, modality) queue is strictly first-in first-out. Stored entries
    never carry gradients.
    """

    def __init__(self, n_classes: int, n_modalities: int, group_size: int, emb_dim: int):
        self.n_classes = n_classes
        self.n_modalities = n_modalities
        self.group_size = group_size
        self.emb_dim = emb_dim
        self._buf = np.zeros((n_classes, n_modalities, group_size, emb_dim))
        self._len = np.zeros((n_classes, n_modalities), dtype=np.int64)
        self._ptr = np.zeros((n_classes, n_modalities), dtype=np.int64)
        self._epoch = np.full((n_classes, n_modalities, group_size), -1, dtype=np.int64)

    @property
    def total_count(self) -> int:
        return int(self._len.sum())

    @property
    def capacity(self) -> int:
        return self.n_classes * self.n_modalities * self.group_size

    def class_count(self, label: int) -> int:
        return int(self._len[label].sum())

    def push(self, label: int, modality: int, embedding: np.ndarray, epoch: int) -> None:
        p = self._ptr[label, modality]
        self._buf[label, modality, p] = embedding
        self._epoch[label, modality, p] = epoch
        self._ptr[label, modality] = (p + 1) % self.group_size
        self._len[label, modality] = min(self._len[label, modality] + 1, self.group_size)

    def push_batch(self, embeddings: Sequence[np.ndarray], statuses: np.ndarray,
                   effective_labels: np.ndarray, epoch: int) -> None:
        """Store clean and corrected entries under their effective label;
        unresolved entries are never stored."""
        for j, z in enumerate(embeddings):
            for i in range(z.shape[0]):
                if statuses[i, j] != Status.UNRESOLVED:
                    self.push(int(effective_labels[i, j]), j, z[i], epoch)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored features [T, emb] plus their class labels [T], in a
        fixed (class, modality, FIFO-age) order."""
        feats, labels = [], []
        for k in range(self.n_classes):
            for j in range(self.n_modalities):
                n = self._len[k, j]
                if n == 0:
                    continue
                if n < self.group_size:
                    block = self._buf[k, j, :n]
                else:
                    idx = (np.arange(self.group_size) + self._ptr[k, j]) % self.group_size
                    block = self._buf[k, j, idx]
                feats.append(block)
                labels.append(np.full(n, k, dtype=np.int64))
        if not feats:
            return np.zeros((0, self.emb_dim)), np.zeros(0, dtype=np.int64)
        return np.concatenate(feats, axis=0), np.concatenate(labels)


def _mean_over(per_anchor: Tensor, count: int) -> Tensor:
    return per_anchor.sum() * (1.0 / count)


def center_loss(embeddings: Tensor, labels: np.ndarray, centers: Tensor,
                temperature: float) -> Tensor:
    """Mean over anchors of -log softmax(center-similarity / temperature) at the label."""
    n = embeddings.value.shape[0]
    if n == 0:
        logger.debug("center_loss: empty anchor set, contributes 0")
        return ad.constant(0.0)
    k = centers.value.shape[0]
    sims = ad.scaled_dot(embeddings, centers, 1.0 / temperature)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), np.asarray(labels, dtype=np.intp)] = 1.0
    picked = ad.mul(sims, ad.constant(onehot)).sum(axis=1)
    per_anchor = ad.sub(ad.logsumexp_rows(sims), picked)
    return _mean_over(per_anchor, n)


def group_loss(embeddings: Tensor, labels: np.ndarray, memory_features: np.ndarray,
               memory_labels: np.ndarray, temperature: float) -> tuple[Tensor, int, int]:
    """Contrastive loss against the stored group features.

    Numerator: stored features sharing the anchor's label; denominator: all
    stored features. Anchors whose group is empty are skipped (returned as
    the third element). Gradients reach only the batch embeddings.
    """
    n = embeddings.value.shape[0]
    if n == 0 or memory_features.shape[0] == 0:
        return ad.constant(0.0), 0, n
    member = memory_labels[None, :] == np.asarray(labels)[:, None]
    applicable = member.any(axis=1)
    n_used = int(applicable.sum())
    n_skipped = n - n_used
    if n_used == 0:
        logger.debug("group_loss: no anchor has stored group features yet")
        return ad.constant(0.0), 0, n_skipped
    sims = ad.scaled_dot(embeddings, ad.constant(memory_features), 1.0 / temperature)
    # skipped rows get a dummy all-true mask; their weight below is zero
    numerator_mask = np.where(applicable[:, None], member, True)
    per_anchor = ad.sub(ad.logsumexp_rows(sims), ad.logsumexp_rows(sims, numerator_mask))
    weights = np.where(applicable, 1.0 / n_used, 0.0)
    return ad.mul(per_anchor, ad.constant(weights)).sum(), n_used, n_skipped


def instance_loss(modality_embeddings: Sequence[Tensor], temperature: float) -> Tensor:
    """Label-free cross-modal pull between the views of each object.

    Anchors are all (object, modality) pairs; the numerator sums over the
    anchor object's views in every modality (the self view included), the
    denominator over every view in the batch.
    """
    b = modality_embeddings[0].value.shape[0]
    m = len(modality_embeddings)
    if b == 0:
        return ad.constant(0.0)
    stacked = ad.concat_rows(list(modality_embeddings))  # row j*b + i
    sims = ad.scaled_dot(stacked, stacked, 1.0 / temperature)
    obj = np.tile(np.arange(b), m)
    same_object = obj[:, None] == obj[None, :]
    per_anchor = ad.sub(ad.logsumexp_rows(sims), ad.logsumexp_rows(sims, same_object))
    return _mean_over(per_anchor, b * m)


def classifier_loss(probabilities: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy -log p[label]; probabilities below 1e-12 are clamped."""
    n = probabilities.value.shape[0]
    if n == 0:
        logger.debug("classifier_loss: empty anchor set, contributes 0")
        return ad.constant(0.0)
    k = probabilities.value.shape[1]
    idx = np.asarray(labels, dtype=np.intp)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), idx] = 1.0
    picked = ad.mul(probabilities, ad.constant(onehot)).sum(axis=1)
    n_clamped = int((picked.value < PROB_FLOOR).sum())
    if n_clamped:
        logger.warning("classifier_loss: clamped %d probabilities below %g", n_clamped, PROB_FLOOR)
    per_anchor = -ad.log(ad.clip_min(picked, PROB_FLOOR))
    return _mean_over(per_anchor, n)


@dataclass
class LossBreakdown:
    center: float
    group: float
    instance: float
    classifier: float
    total: float
    classifier_weight: float
    center_anchors: int = 0
    group_anchors: int = 0
    group_skipped: int = 0
    instance_anchors: int = 0
    classifier_anchors: int = 0


def total_loss(modality_embeddings: Sequence[Tensor],
               modality_probabilities: Sequence[Tensor] | None,
               statuses: np.ndarray, effective_labels: np.ndarray,
               centers: Tensor, memory: GroupMemory | None, *,
               center_temperature: float = 0.1, memory_temperature: float = 0.1,
               classifier_weight: float = 1.0,
               enable_center: bool = True, enable_group: bool = True,
               enable_instance: bool = True) -> tuple[Tensor, LossBreakdown]:
    """Assemble the adaptive objective for one batch.

    Routing (per (object, modality) entry): clean entries feed every
    component with their given label; corrected entries feed the group and
    instance components with their corrected label; unresolved entries feed
    only the instance component. ``statuses`` and ``effective_labels`` are
    [B, M] aligned with the embedding batches.
    """
    b = modality_embeddings[0].value.shape[0]
    m = len(modality_embeddings)
    if statuses.shape != (b, m) or effective_labels.shape != (b, m):
        raise ad.ShapeError(f"routing arrays must be shaped ({b}, {m}), "
                            f"got {statuses.shape} and {effective_labels.shape}")

    # flat anchor index j*b + i matches concat_rows order
    status_flat = statuses.T.ravel()
    label_flat = effective_labels.T.ravel()
    clean_idx = np.flatnonzero(status_flat == Status.CLEAN)
    resolved_idx = np.flatnonzero(status_flat != Status.UNRESOLVED)

    stacked = ad.concat_rows(list(modality_embeddings))
    zero = ad.constant(0.0)
    breakdown = LossBreakdown(center=0.0, group=0.0, instance=0.0, classifier=0.0,
                              total=0.0, classifier_weight=classifier_weight)

    l_center = zero
    if enable_center and clean_idx.size:
        l_center = center_loss(ad.take_rows(stacked, clean_idx), label_flat[clean_idx],
                               centers, center_temperature)
        breakdown.center_anchors = int(clean_idx.size)

    l_group = zero
    if enable_group and resolved_idx.size and memory is not None:
        feats, mem_labels = memory.snapshot()
        l_group, n_used, n_skipped = group_loss(ad.take_rows(stacked, resolved_idx),
                                                label_flat[resolved_idx], feats, mem_labels,
                                                memory_temperature)
        breakdown.group_anchors = n_used
        breakdown.group_skipped = n_skipped

    l_instance = zero
    if enable_instance:
        l_instance = instance_loss(modality_embeddings, memory_temperature)
        breakdown.instance_anchors = b * m

    l_classifier = zero
    if classifier_weight != 0.0 and clean_idx.size:
        if modality_probabilities is None:
            raise ValueError("classifier_weight != 0 requires probability rows")
        probs = ad.concat_rows(list(modality_probabilities))
        l_classifier = classifier_loss(ad.take_rows(probs, clean_idx), label_flat[clean_idx])
        breakdown.classifier_anchors = int(clean_idx.size)

    total = ad.add(ad.add(ad.add(l_center, l_group), l_instance),
                   ad.mul(l_classifier, classifier_weight))
    breakdown.center = l_center.item()
    breakdown.group = l_group.item()
    breakdown.instance = l_instance.item()
    breakdown.classifier = l_classifier.item()
    breakdown.total = total.item()
    return total, breakdown
