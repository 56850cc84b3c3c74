"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    rel_errors: np.ndarray
    max_rel_error: float
    frac_within: float
    tol: float
    n_checked: int

    def passed(self, frac: float = 1.0, max_tol: float | None = None) -> bool:
        ok = self.frac_within >= frac
        if max_tol is not None:
            ok = ok and self.max_rel_error <= max_tol
        return ok


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    floor: float = 1e-6,
    max_elements: int = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild the graph on every call and be deterministic.
    Above ``max_elements`` total elements a seeded random subsample is
    checked. Run with float64 parameters for meaningful tolerances.
    """
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sites = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(sites) > max_elements:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(sites), size=max_elements, replace=False)
        sites = [sites[k] for k in np.sort(pick)]

    errs = np.empty(len(sites))
    for k, (i, j) in enumerate(sites):
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f().data)
        flat[j] = orig - h
        fm = float(f().data)
        flat[j] = orig
        numeric = (fp - fm) / (2 * h)
        errs[k] = relative_error(analytic[i].reshape(-1)[j], numeric, floor)
    for p in params:
        p.grad = None
    return GradCheckReport(
        rel_errors=errs,
        max_rel_error=float(errs.max()) if errs.size else 0.0,
        frac_within=float((errs <= tol).mean()) if errs.size else 1.0,
        tol=tol,
        n_checked=len(sites),
    )
