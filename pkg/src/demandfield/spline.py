"""Truncated-power cubic spline bases over log-prices.

One basis per product, with knots at equally spaced empirical quantiles of
that product's training log-prices and a scale floor so flat price series
still yield a usable basis.  The basis is C^2, which is what makes analytic
own-price curvature well defined everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 0.2
QUANTILE_LO = 0.05
QUANTILE_HI = 0.95

# r-th derivative of z^3 carries the falling factorial 3!/(3-r)!.
_POLY_COEF = {0: 1.0, 1: 3.0, 2: 6.0}


class SplineFitError(ValueError):
    """Raised when a spline spec cannot be fit from the given sample."""


@dataclass(frozen=True)
class SplineSpec:
    """Frozen description of one product's basis: knots + normalization."""

    knots: np.ndarray  # (K,) nondecreasing, in raw log-price units
    mu: float
    sigma: float

    @property
    def n_basis(self) -> int:
        return len(self.knots)

    def to_dict(self) -> dict:
        return {"knots": [float(v) for v in self.knots], "mu": float(self.mu), "sigma": float(self.sigma)}

    @staticmethod
    def from_dict(d: dict) -> "SplineSpec":
        return SplineSpec(knots=np.asarray(d["knots"], dtype=float), mu=float(d["mu"]), sigma=float(d["sigma"]))


def fit_spline_spec(u_train: np.ndarray, n_knots: int) -> SplineSpec:
    """Place ``n_knots`` knots at equally spaced quantiles of ``u_train``.

    Quantile levels run from 0.05 to 0.95 (a single knot sits at the median).
    The scale is the sample sd floored at 0.2 so constant series stay usable.

    Raises
    ------
    SplineFitError
        on an empty sample, non-finite values, or ``n_knots < 1``.
    """
    u = np.asarray(u_train, dtype=float).ravel()
    if n_knots < 1:
        raise SplineFitError(f"n_knots must be >= 1, got {n_knots}")
    if u.size == 0:
        raise SplineFitError("empty training sample")
    if not np.all(np.isfinite(u)):
        raise SplineFitError("non-finite log-prices in training sample")
    if n_knots == 1:
        taus = np.array([0.5])
    else:
        taus = np.linspace(QUANTILE_LO, QUANTILE_HI, n_knots)
    knots = np.quantile(u, taus)  # linear interpolation between order stats
    sd = float(np.std(u, ddof=1)) if u.size > 1 else 0.0
    return SplineSpec(knots=knots, mu=float(np.mean(u)), sigma=max(sd, SIGMA_FLOOR))


def eval_basis(spec: SplineSpec, u, order: int = 0) -> np.ndarray:
    """Evaluate the basis (or its derivative) at ``u``.

    Parameters
    ----------
    spec : SplineSpec
    u : scalar or array of log-prices
    order : 0, 1 or 2 — value, first or second derivative w.r.t. ``u``.

    Returns
    -------
    ndarray with shape ``u.shape + (K,)``.
    """
    if order not in _POLY_COEF:
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    u = np.asarray(u, dtype=float)
    z = (u[..., None] - spec.knots) / spec.sigma
    z = np.maximum(z, 0.0)
    return _POLY_COEF[order] * spec.sigma ** (-order) * z ** (3 - order)
