"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .optim import Parameter, finalize_grads, zero_grads
from .tensor import Tensor, backward, no_grad, observe_kinks


@dataclass
class GradCheckReport:
    tolerance: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    excluded: dict[str, int] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        lines = [f"max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"]
        for k, v in self.per_parameter.items():
            lines.append(f"  {k}: {v:.3e} over {self.checked[k]} entries, {self.excluded[k]} excluded")
        return "\n".join(lines)


class _KinkRecorder:
    """Collects every relu/abs/clamp input seen during one forward pass."""

    def __init__(self):
        self.values: list[np.ndarray] = []

    def __call__(self, kind, values):
        self.values.append(np.array(values, copy=True))


def _evaluate(build: Callable[[], Tensor]) -> tuple[float, _KinkRecorder]:
    rec = _KinkRecorder()
    with no_grad(), observe_kinks(rec):
        value = build().item()
    return value, rec


def _near_kink(base: _KinkRecorder, other: _KinkRecorder, margin: float) -> bool:
    """True if a kink input crossed zero or moved to within ``margin`` of it."""
    if len(base.values) != len(other.values):
        return True
    for a, b in zip(base.values, other.values):
        if a.shape != b.shape or not np.array_equal(a > 0, b > 0):
            return True
        moved = a != b
        if np.any(moved & ((np.abs(a) < margin) | (np.abs(b) < margin))):
            return True
    return False


def finite_diff_check(
    build: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    kink_margin: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``build()`` with central differences.

    ``build`` must rebuild the scalar loss from the current parameter values.
    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-6)`` after an
    absolute floor of 1e-9 (entries where both are below it count as exact).
    Entries whose perturbation moves any relu/abs/clamp input across zero, or
    moves one that is within ``kink_margin`` of zero, are excluded.
    ``max_entries`` subsamples large parameters (seeded by ``rng``).
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(params)
    loss = build()
    backward(loss)
    finalize_grads(params)
    analytic = {p.id: p.grad.copy() for p in params}
    _, base_rec = _evaluate(build)

    report = GradCheckReport(tolerance)
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, checked, excluded = 0.0, 0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus, rec_plus = _evaluate(build)
            flat[i] = orig - step
            f_minus, rec_minus = _evaluate(build)
            flat[i] = orig
            if _near_kink(base_rec, rec_plus, kink_margin) or _near_kink(base_rec, rec_minus, kink_margin):
                excluded += 1
                continue
            num = (f_plus - f_minus) / (2.0 * step)
            ana = analytic[p.id].reshape(-1)[i]
            diff = abs(ana - num)
            if diff > 1e-9:
                worst = max(worst, diff / max(abs(ana), abs(num), 1e-6))
            checked += 1
        report.per_parameter[p.id] = worst
        report.checked[p.id] = checked
        report.excluded[p.id] = excluded
    return report
