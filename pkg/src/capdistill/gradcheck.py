"""Central finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    nonfinite: int


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def fd_check(f, params, h=1e-6, tol=1e-4, names=None):
    """Compare autodiff gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from the current ``params[i].data`` on every
    call and return a scalar Tensor. Gradients are taken fresh (existing
    ``.grad`` slots are cleared). Returns ``(ok, reports)`` with one
    :class:`ParamReport` per parameter.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    reports = []
    ok = True
    for idx, p in enumerate(params):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f().item()
            flat[j] = orig - h
            fm = f().item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2.0 * h)
        a = analytic[idx]
        finite = np.isfinite(a) & np.isfinite(numeric)
        rel = np.where(finite, _rel(a, numeric), np.inf)
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        max_rel = float(rel[worst]) if rel.size else 0.0
        name = names[idx] if names else (p.name or f"param{idx}")
        reports.append(
            ParamReport(name, max_rel, tuple(int(i) for i in worst), float(a[worst]) if rel.size else 0.0,
                        float(numeric[worst]) if rel.size else 0.0, int((~finite).sum()))
        )
        ok = ok and max_rel <= tol
    return ok, reports
