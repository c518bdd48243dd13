"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{k}: {e:.3e} {'ok' if e < self.tolerance else 'FAIL'}" for k, e in self.max_rel_error.items()]
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    closure: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-8,
    rel_floor: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward-pass gradients of ``closure()`` against central differences.

    ``closure`` must rebuild the loss from the current contents of ``params``.
    With ``max_elements`` set, a seeded random subset of each tensor's entries
    is probed instead of all of them.

    Entries far below the largest gradient entry sit under the round-off
    level of the difference quotient, so the denominator of the relative
    error is floored at ``rel_floor`` times that largest magnitude.
    """
    first = float(closure().data)
    if float(closure().data) != first:
        raise ContractError("closure is not deterministic; seed any dropout or sampling")

    for p in params.values():
        p.zero_grad()
    closure().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    scale = max((float(np.abs(g).max()) for g in analytic.values() if g.size), default=0.0)
    floor = max(floor, rel_floor * scale)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(closure().data)
            flat[i] = orig - step
            fm = float(closure().data)
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * step)
        err = relative_error(analytic[name].reshape(-1)[idx], num, floor)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report
