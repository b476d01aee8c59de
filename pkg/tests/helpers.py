"""Shared test utilities: gradient comparison against the finite-difference
oracle, with the spec tolerance discipline (relative error with an absolute
floor for near-zero entries)."""

import numpy as np

from fhnn.numerics import ParamSet, finite_diff_grad


def grad_gap(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst relative disagreement between two gradient arrays, with error
    below the absolute ``floor`` forgiven (near-zero entries and central
    difference roundoff are compared absolutely)."""
    err = np.maximum(np.abs(analytic - numeric) - floor, 0.0)
    mag = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(err / mag)) if err.size else 0.0


def check_gradients(loss_fn, params: ParamSet, eps: float = 1e-5, tol: float = 1e-4) -> dict[str, float]:
    """Compare accumulated analytic grads in ``params`` against central
    finite differences of ``loss_fn``.  Returns per-parameter worst gaps and
    asserts they all sit within ``tol``."""
    fd = finite_diff_grad(loss_fn, params, eps=eps)
    gaps = {}
    for p in params:
        gaps[p.name] = grad_gap(p.grad, fd[p.name])
    worst = max(gaps.values())
    assert worst <= tol, f"gradient mismatch {worst:.3e} > {tol:g}: " + ", ".join(
        f"{k}={v:.2e}" for k, v in sorted(gaps.items(), key=lambda kv: -kv[1])[:5]
    )
    return gaps
