"""Coarse-to-fine self-distillation: attention-ranked instance selection and its loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

P_START = 0.05
P_MAX = 0.20
P_STEP = 0.01
PATIENCE = 3


def rank_fractions(scores) -> np.ndarray:
    """Fraction r/K for the instance with the r-th smallest score; ties go to the lower index."""
    s = np.asarray(scores).reshape(-1)
    k = s.size
    order = np.argsort(s, kind="stable")
    ranks = np.empty(k, dtype=np.int64)
    ranks[order] = np.arange(1, k + 1)
    return ranks / k


def select_indices(scores, p: float) -> np.ndarray:
    """Indices whose rank fraction exceeds ``1 - p``; at least the top-scoring instance."""
    if not P_START - 1e-12 <= p <= P_MAX + 1e-12:
        raise ValueError(f"selection fraction {p} outside [{P_START}, {P_MAX}]")
    frac = rank_fractions(scores)
    # Integer comparison r > K - floor(p*K) avoids float noise at the boundary.
    k = frac.size
    ranks = np.rint(frac * k).astype(np.int64)
    keep = np.flatnonzero(ranks > k - _count(p, k))
    if keep.size == 0:
        keep = np.array([int(np.argmax(ranks))])
    return keep


def _count(p: float, k: int) -> int:
    """floor(p*K), robust to binary representation of p."""
    return int(np.floor(p * k + 1e-9))


def selection_count(p: float, k: int) -> int:
    return max(_count(p, k), 1)


@dataclass
class InstanceBatch:
    """Selected instance rows (indices into each bag) with their pseudo labels."""

    indices: list[np.ndarray] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    bag_ids: list[int] = field(default_factory=list)

    def add(self, bag_id: int, idx: np.ndarray, label: int) -> None:
        self.indices.append(idx)
        self.labels.append(label)
        self.bag_ids.append(bag_id)

    @property
    def pseudo_labels(self) -> np.ndarray:
        if not self.indices:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.full(len(i), y) for i, y in zip(self.indices, self.labels)])

    def __len__(self) -> int:
        return int(sum(len(i) for i in self.indices))


def select_top_p(label: int, s: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Pick instances by rank on the bag's true-class score column; returns (indices, pseudo labels)."""
    s = np.asarray(s)
    idx = select_indices(s[:, label], p)
    return idx, np.full(idx.size, label, dtype=np.int64)


def assemble(bags, scores: list[np.ndarray], p: float) -> InstanceBatch:
    """Run the selection over a list of bags and concatenate the results."""
    batch = InstanceBatch()
    for bag, s in zip(bags, scores):
        idx, _ = select_top_p(bag.label, s, p)
        batch.add(bag.id, idx, bag.label)
    return batch


@dataclass
class ThresholdSchedule:
    """Selection fraction that widens by one step after ``patience`` epochs without improvement."""

    p: float = P_START
    step: float = P_STEP
    p_max: float = P_MAX
    patience: int = PATIENCE
    counter: int = 0
    best: float = -np.inf

    def step_epoch(self, metric: float) -> float:
        if not np.isfinite(metric):
            raise ValueError("schedule metric must be finite")
        if metric > self.best:
            self.best = metric
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.p = round(min(self.p + self.step, self.p_max), 10)
                self.counter = 0
        return self.p


def schedule_step(sched: ThresholdSchedule, metric: float) -> ThresholdSchedule:
    sched.step_epoch(metric)
    return sched


def instance_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of per-class instance probabilities against one-hot labels."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.shape[0] != y.size:
        raise T.DimensionError(f"instance_loss: {probs.shape[0]} rows vs {y.size} labels")
    target = np.zeros(probs.shape)
    target[np.arange(y.size), y] = 1.0
    return T.binary_cross_entropy(probs, target)
