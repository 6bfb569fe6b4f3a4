"""Elasticity fields as differential objects.

An elasticity field is any callable ``u -> (n, n) matrix`` giving
E_ij = d log v_i / d log p_j at the log-price point ``u`` (context, if any,
is bound into the callable).  This module checks whether such a field is the
Jacobian of some log-demand surface (closure of mixed partials), integrates
it along price paths, and provides the constant-elasticity closed form those
integrals must reproduce.
"""

from __future__ import annotations

import numpy as np

MAX_SEGMENTS = 1 << 20


class QuadratureError(RuntimeError):
    """Line integral failed to converge within the segment budget."""


class FieldEvaluationError(ValueError):
    """Field returned something other than a finite (n, n) matrix."""


def _eval_field(field, u: np.ndarray, n: int) -> np.ndarray:
    E = np.asarray(field(u), dtype=float)
    if E.shape != (n, n) or not np.all(np.isfinite(E)):
        raise FieldEvaluationError(f"field must return finite ({n}, {n}) matrix, got shape {E.shape}")
    return E


def closure_residual(field, u: np.ndarray, i: int, h: float = 1e-3) -> float:
    """Max |d_k E_ij - d_j E_ik| over (j, k) by central differences.

    Zero (up to truncation error) iff row ``i`` of the field has commuting
    mixed partials at ``u``, i.e. locally is the gradient of some scalar
    log-demand surface.
    """
    u = np.asarray(u, dtype=float)
    n = u.size
    _eval_field(field, u, n)  # shape check up front
    D = np.empty((n, n))  # D[k, j] = d E_ij / d u_k
    for k in range(n):
        up, um = u.copy(), u.copy()
        up[k] += h
        um[k] -= h
        D[k] = (_eval_field(field, up, n)[i] - _eval_field(field, um, n)[i]) / (2.0 * h)
    return float(np.max(np.abs(D - D.T)))


def integrate_line(field, i: int, u_start: np.ndarray, u_end: np.ndarray,
                   tol: float = 1e-8, n_seg: int = 8) -> float:
    """∫ sum_j E_ij du_j along the straight segment from u_start to u_end.

    Composite trapezoid with doubling until the estimate moves by less than
    ``tol`` relative (with the same absolute floor).  Raises QuadratureError
    if that never happens within the segment budget.
    """
    a = np.asarray(u_start, dtype=float)
    b = np.asarray(u_end, dtype=float)
    n = a.size
    du = b - a

    def integrand(t: np.ndarray) -> np.ndarray:
        vals = np.empty(t.size)
        for m, tm in enumerate(t):
            vals[m] = _eval_field(field, a + tm * du, n)[i] @ du
        return vals

    def trap(vals: np.ndarray) -> float:
        return (0.5 * (vals[0] + vals[-1]) + vals[1:-1].sum()) / (vals.size - 1)

    f = integrand(np.linspace(0.0, 1.0, n_seg + 1))
    est = trap(f)
    while n_seg <= MAX_SEGMENTS:
        n_seg *= 2
        t_new = (np.arange(n_seg // 2) + 0.5) / (n_seg // 2)  # midpoints of old panels
        f_new = integrand(t_new)
        merged = np.empty(n_seg + 1)  # interleave old samples with new midpoints
        merged[0::2] = f
        merged[1::2] = f_new
        f = merged
        new_est = trap(f)
        if abs(new_est - est) < tol * max(1.0, abs(new_est)):
            return float(new_est)
        est = new_est
    raise QuadratureError(f"no convergence to tol={tol} within {MAX_SEGMENTS} segments")


def integrate_path(field, i: int, waypoints, tol: float = 1e-8) -> float:
    """Sum of line integrals along consecutive waypoints."""
    pts = [np.asarray(p, dtype=float) for p in waypoints]
    if len(pts) < 2:
        raise ValueError("need at least two waypoints")
    return sum(integrate_line(field, i, a, b, tol=tol) for a, b in zip(pts[:-1], pts[1:]))


def path_independence_gap(field, i: int, u_start: np.ndarray, u_end: np.ndarray,
                          via: np.ndarray, tol: float = 1e-9) -> float:
    """|direct integral - integral through ``via``|; ~0 for integrable fields."""
    direct = integrate_line(field, i, u_start, u_end, tol=tol)
    detour = integrate_path(field, i, [u_start, via, u_end], tol=tol)
    return abs(direct - detour)


def reconstruct_demand(field, i: int, v_start: float, u_start: np.ndarray,
                       u_end: np.ndarray, tol: float = 1e-8) -> float:
    """v_i(u_end) = v_i(u_start) * exp(∫ ω_i) for an integrable field."""
    if v_start <= 0:
        raise ValueError("demand level must be positive")
    return float(v_start * np.exp(integrate_line(field, i, u_start, u_end, tol=tol)))


def constant_elasticity_demand(v0: np.ndarray, u0: np.ndarray, E: np.ndarray,
                               u: np.ndarray) -> np.ndarray:
    """Closed-form demand v_i = v0_i * prod_j (p_j / p0_j)^{E_ij}.

    This is the unique demand system whose elasticity field is the constant
    matrix ``E``; line integrals of that field must reproduce it exactly.
    """
    v0 = np.asarray(v0, dtype=float)
    if np.any(v0 <= 0):
        raise ValueError("baseline demands must be positive")
    u0 = np.asarray(u0, dtype=float)
    u = np.asarray(u, dtype=float)
    E = np.asarray(E, dtype=float)
    return v0 * np.exp(E @ (u - u0))


def constant_field(E: np.ndarray):
    """Wrap a constant matrix as an elasticity field callable."""
    E = np.asarray(E, dtype=float)

    def field(u):
        return E

    return field
