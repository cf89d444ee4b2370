"""Input checks that turn user arrays into validated bags."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Bag, ConfigurationError
from .tensor import DimensionError


def check_bag_arrays(X, coords=None) -> tuple[list[np.ndarray], list[np.ndarray] | None]:
    """Coerce a sequence of K x D instance matrices (and optional K x 2 coordinates)."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if not isinstance(X, Sequence) or len(X) == 0:
        raise ConfigurationError("X must be a non-empty sequence of K x D arrays")
    feats = []
    dim = None
    for i, x in enumerate(X):
        a = np.asarray(x, dtype=np.float32)
        if a.ndim != 2 or a.shape[0] < 1:
            raise DimensionError(f"bag {i}: expected a K x D array, got shape {a.shape}")
        if dim is None:
            dim = a.shape[1]
        elif a.shape[1] != dim:
            raise DimensionError(f"bag {i}: feature dim {a.shape[1]} != {dim}")
        if not np.isfinite(a).all():
            raise ConfigurationError(f"bag {i}: non-finite feature values")
        feats.append(a)
    if coords is None:
        return feats, None
    if len(coords) != len(feats):
        raise ConfigurationError(f"{len(coords)} coordinate arrays for {len(feats)} bags")
    cs = []
    for i, (a, c) in enumerate(zip(feats, coords)):
        c = np.asarray(c, dtype=np.float32)
        if c.shape != (a.shape[0], 2):
            raise DimensionError(f"bag {i}: coords shape {c.shape} != ({a.shape[0]}, 2)")
        if not np.isfinite(c).all():
            raise ConfigurationError(f"bag {i}: non-finite coordinates")
        cs.append(c)
    return feats, cs


def make_bags(X, y=None, coords=None, instance_truth=None) -> list[Bag]:
    feats, cs = check_bag_arrays(X, coords)
    labels = np.zeros(len(feats), dtype=np.int64) if y is None else np.asarray(y).reshape(-1)
    if labels.size != len(feats):
        raise ConfigurationError(f"{labels.size} labels for {len(feats)} bags")
    truth = [None] * len(feats) if instance_truth is None else instance_truth
    return [
        Bag(f, int(labels[i]), None if cs is None else cs[i], None if truth[i] is None else np.asarray(truth[i], dtype=np.int64), i)
        for i, f in enumerate(feats)
    ]
