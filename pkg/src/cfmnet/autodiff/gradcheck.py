"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    coordinates: int
    tolerance: float
    worst: Optional[tuple[int, tuple[int, ...]]] = None
    message: str = ""
    errors: list[float] = field(default_factory=list, repr=False)


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    coords: Optional[Sequence[tuple[int, tuple[int, ...]]]] = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``backward`` gradients of scalar ``f()`` with central differences.

    ``coords`` selects (input index, element index) pairs to probe; by
    default every element of every input is probed.  Errors are relative to
    the larger of the two estimates, with ``floor`` guarding coordinates whose
    true gradient is (numerically) zero.  Run in float64.
    """
    for t in inputs:
        t.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        return GradCheckReport(False, float("inf"), 0, tolerance, message="non-finite loss at the base point")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    if coords is None:
        coords = [(i, idx) for i, t in enumerate(inputs) for idx in np.ndindex(t.shape)]

    errors = []
    worst = None
    worst_err = -1.0
    for i, idx in coords:
        arr = inputs[i].data
        orig = arr[idx]
        arr[idx] = orig + step
        plus = float(f().data)
        arr[idx] = orig - step
        minus = float(f().data)
        arr[idx] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            return GradCheckReport(False, float("inf"), len(errors), tolerance, (i, idx),
                                   f"non-finite loss while probing input {i} at {idx}", errors)
        numeric = (plus - minus) / (2.0 * step)
        err = relative_error(float(analytic[i][idx]), numeric, floor)
        errors.append(err)
        if err > worst_err:
            worst_err, worst = err, (i, idx)

    max_err = max(errors) if errors else 0.0
    passed = max_err < tolerance
    msg = "ok" if passed else f"max relative error {max_err:.3e} at input {worst[0]} index {worst[1]}"
    return GradCheckReport(passed, max_err, len(errors), tolerance, worst, msg, errors)


def sample_coordinates(inputs: Sequence[Tensor], count: int, rng: np.random.Generator
                       ) -> list[tuple[int, tuple[int, ...]]]:
    """Draw ``count`` distinct coordinates uniformly over the concatenation of ``inputs``."""
    sizes = np.array([t.data.size for t in inputs])
    total = int(sizes.sum())
    flat = rng.choice(total, size=min(count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for k in np.sort(flat):
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        out.append((i, np.unravel_index(int(k - offsets[i]), inputs[i].shape)))
    return out
