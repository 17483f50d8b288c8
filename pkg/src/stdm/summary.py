"""Posterior summaries of scalar quantities described as Gaussian mixtures.

A quantity's posterior is stored as a mixture of Gaussians on an internal
scale together with a monotone transform to the reported scale.  Latent
linear combinations use the identity, hyperparameters their internal
transform, and relative risks ``exp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtr

from . import priors as pr

QUANTILE_PROBS = (0.025, 0.05, 0.5, 0.95, 0.975)
QUANTILE_COLUMNS = ("q0.025", "q0.05", "q0.5", "q0.95", "q0.975")
SUMMARY_COLUMNS = ("parameter", "mean", "sd") + QUANTILE_COLUMNS
GRID_POINTS = 2001
GRID_HALF_WIDTH = 6.0

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(40)
_GH_W = _GH_W / _GH_W.sum()


def _apply(transform: str, v):
    v = np.asarray(v, dtype=float)
    if transform == "identity":
        return v
    if transform == "exp":
        return np.exp(v)
    return np.vectorize(lambda t: pr.to_user(transform, float(t)), otypes=[float])(v)


@dataclass(frozen=True)
class QuantitySummary:
    """Mixture ``sum_k w_k N(loc_k, scale_k^2)`` on the internal scale."""

    name: str
    weights: np.ndarray
    locs: np.ndarray
    scales: np.ndarray
    transform: str = "identity"

    def component_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of each component on the reported scale."""
        m, s = np.asarray(self.locs, float), np.asarray(self.scales, float)
        if self.transform == "identity":
            return m, s ** 2
        if self.transform == "exp":
            mean = np.exp(m + 0.5 * s ** 2)
            return mean, np.expm1(s ** 2) * mean ** 2
        pts = m[:, None] + s[:, None] * _GH_X[None, :]
        vals = _apply(self.transform, pts)
        mean = vals @ _GH_W
        return mean, np.maximum((vals - mean[:, None]) ** 2 @ _GH_W, 0.0)

    @property
    def mean(self) -> float:
        cm, _ = self.component_moments()
        return float(np.dot(self.weights, cm))

    @property
    def var(self) -> float:
        cm, cv = self.component_moments()
        w = np.asarray(self.weights)
        mu = float(np.dot(w, cm))
        return float(np.dot(w, cv) + np.dot(w, (cm - mu) ** 2))

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    def quantiles(self, probs: Sequence[float] = QUANTILE_PROBS) -> np.ndarray:
        return _apply(self.transform, mixture_quantiles(self.weights, self.locs, self.scales, probs))


def mixture_cdf(x, weights, locs, scales) -> np.ndarray:
    x = np.asarray(x, float)[..., None]
    locs, scales = np.asarray(locs, float), np.asarray(scales, float)
    safe = np.where(scales > 0, scales, 1.0)
    comp = np.where(scales > 0, ndtr((x - locs) / safe), (x >= locs).astype(float))
    return comp @ np.asarray(weights, float)


def mixture_quantiles(weights, locs, scales, probs=QUANTILE_PROBS) -> np.ndarray:
    """Quantiles of a Gaussian mixture by inverting its CDF on a shared grid.

    The grid has 2001 points spanning six component SDs beyond the extreme
    components; the CDF is inverted by linear interpolation.
    """
    w = np.asarray(weights, float)
    locs, scales = np.asarray(locs, float), np.asarray(scales, float)
    keep = w > 0
    w, locs, scales = w[keep], locs[keep], scales[keep]
    lo = float(np.min(locs - GRID_HALF_WIDTH * scales))
    hi = float(np.max(locs + GRID_HALF_WIDTH * scales))
    probs = np.asarray(probs, float)
    if hi <= lo:
        return np.full(probs.shape, lo)
    grid = np.linspace(lo, hi, GRID_POINTS)
    F = mixture_cdf(grid, w, locs, scales)
    F = np.maximum.accumulate(F)
    if np.all(scales == 0):
        # purely atomic: step CDF, take the left-continuous inverse
        order = np.argsort(locs)
        c = np.cumsum(w[order])
        return locs[order][np.minimum(np.searchsorted(c, probs - 1e-15), len(c) - 1)]
    # collapse flat stretches so np.interp sees an increasing abscissa
    Fu, first = np.unique(F, return_index=True)
    last = np.append(first[1:] - 1, F.size - 1)
    mid = 0.5 * (grid[first] + grid[last])
    xs = np.where((Fu > 0) & (Fu < 1), grid[first], mid)
    return np.interp(probs, Fu, xs)


def summarize(q: QuantitySummary) -> dict:
    row = {"parameter": q.name, "mean": q.mean, "sd": q.sd}
    row.update(dict(zip(QUANTILE_COLUMNS, q.quantiles())))
    return row


def summary_table(quantities: Sequence[QuantitySummary]) -> pd.DataFrame:
    return pd.DataFrame([summarize(q) for q in quantities], columns=list(SUMMARY_COLUMNS))


def latent_quantities(fit, names: Sequence[str], indices: Sequence[int]) -> list[QuantitySummary]:
    out = []
    for name, i in zip(names, indices):
        w, m, s = fit.gaussian_mixture(i)
        out.append(QuantitySummary(name, w, m, s))
    return out


def hyper_quantities(fit) -> list[QuantitySummary]:
    """Gaussian approximation in the internal coordinates around the mode."""
    out = []
    for i, (name, tr) in enumerate(zip(fit.hyper_names, fit.transforms)):
        sd = math.sqrt(fit.theta_cov[i, i]) if fit.theta_cov is not None else 0.0
        out.append(QuantitySummary(name, np.ones(1), np.array([fit.theta_mode[i]]), np.array([sd]), tr))
    return out
