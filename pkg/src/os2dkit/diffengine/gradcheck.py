"""Finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    n_checked: int = 0
    failures: list[tuple[int, tuple, float]] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def ok(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        status = "ok" if self.ok else f"{len(self.failures)} failures"
        return (f"grad_check: {status}, max rel error {self.max_rel_error:.3e} "
                f"over {self.n_checked} coordinates (tol {self.tolerance:.0e})")


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               tolerance: float = 1e-4, step: float = 1e-3,
               max_coords_per_input: int = 24, rng: np.random.Generator | None = None,
               ) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar function against central differences.

    f is called as f(*inputs) and must be pure and scalar-valued.  For every
    input with requires_grad set, up to max_coords_per_input coordinates are
    perturbed by +-step and the numeric derivative is compared to the analytic
    one with relative error |a - n| / max(|a|, |n|, 1e-3).  The 1e-3 floor
    keeps near-zero gradients from amplifying finite-difference noise.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    out.backward()

    report = GradCheckReport(tolerance=tolerance)
    for input_index, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(analytic).all():
            raise FloatingPointError("grad_check: non-finite analytic gradient")
        n_coords = min(max_coords_per_input, t.size)
        flat_choices = rng.choice(t.size, size=n_coords, replace=False)
        flat = t.data.reshape(-1)
        for fi in flat_choices:
            original = flat[fi]
            with no_grad():
                flat[fi] = original + step
                up = f(*inputs).data.item()
                flat[fi] = original - step
                down = f(*inputs).data.item()
            flat[fi] = original
            numeric = (up - down) / (2.0 * step)
            if not np.isfinite(numeric):
                raise FloatingPointError("grad_check: non-finite numeric gradient")
            a = float(analytic.reshape(-1)[fi])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tolerance:
                coord = np.unravel_index(int(fi), t.shape)
                report.failures.append((input_index, coord, rel))
    return report
