"""Central-difference validation of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import CHECK_DTYPE, Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
# Entries whose true gradient is below this magnitude are compared absolutely.
DEFAULT_FLOOR = 1e-6


class GradcheckFailure(AssertionError):
    """Raised when a gradient is non-finite; carries the offending location."""


@dataclass
class GradcheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.max_rel_error.items())
        return f"{status} max_rel_err={self.worst:.3e} ({parts})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    fn: Callable[[dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = DEFAULT_FLOOR,
) -> GradcheckReport:
    """Compare tape gradients of a scalar-valued ``fn`` against central differences.

    ``fn`` receives a dict of float64 tensors built from ``inputs`` and must
    return a scalar tensor.  With ``max_entries`` set, only that many randomly
    chosen coordinates of each input are perturbed.
    """
    base = {k: np.array(v, dtype=CHECK_DTYPE) for k, v in inputs.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    with Tape() as tape:
        out = fn(tensors)
    tape.backward(out)

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)
    for name, arr in base.items():
        analytic = tensors[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        if not np.isfinite(analytic).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
            raise GradcheckFailure(f"non-finite analytic gradient for {name} at {bad}")
        flat_count = arr.size
        if max_entries is not None and flat_count > max_entries:
            picks = rng.choice(flat_count, size=max_entries, replace=False)
        else:
            picks = np.arange(flat_count)
        worst, worst_at = 0.0, ()
        for flat in picks:
            idx = np.unravel_index(int(flat), arr.shape) if arr.shape else ()
            numeric = _central_difference(fn, base, name, idx, step)
            if not np.isfinite(numeric):
                raise GradcheckFailure(f"non-finite numeric gradient for {name} at {idx}")
            err = float(relative_error(np.asarray(analytic[idx]), np.asarray(numeric), floor))
            if err > worst:
                worst, worst_at = err, tuple(int(i) for i in idx)
        report.max_rel_error[name] = worst
        report.worst_index[name] = worst_at
    return report


def _central_difference(fn, base, name, idx, step) -> float:
    def evaluate(delta: float) -> float:
        trial = {k: Tensor(v) for k, v in base.items()}
        data = trial[name].data.copy()
        data[idx] += delta
        trial[name] = Tensor(data)
        return float(fn(trial).data)

    return (evaluate(step) - evaluate(-step)) / (2 * step)
