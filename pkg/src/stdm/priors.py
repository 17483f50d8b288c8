"""Hyperparameter transforms and prior densities.

Every prior here is a density for the *internal* (transformed) coordinate
``theta``; the Jacobian of the transform is included, so the values can be
added directly to a log marginal likelihood evaluated at ``theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, logit


# -- transforms --------------------------------------------------------------

def to_user(transform: str, theta: float) -> float:
    if transform == "log":
        return math.exp(theta)
    if transform == "logit":
        return float(expit(theta))
    if transform == "fisher":
        return math.tanh(theta / 2.0)
    if transform == "identity":
        return theta
    raise ValueError(f"unknown transform {transform!r}")


def to_internal(transform: str, value: float) -> float:
    if transform == "log":
        return math.log(value)
    if transform == "logit":
        return float(logit(value))
    if transform == "fisher":
        return math.log((1.0 + value) / (1.0 - value))
    if transform == "identity":
        return value
    raise ValueError(f"unknown transform {transform!r}")


def log_jacobian(transform: str, theta: float) -> float:
    """log |d user / d theta|."""
    if transform == "log":
        return theta
    if transform == "logit":
        return -_softplus(theta) - _softplus(-theta)
    if transform == "fisher":
        r = math.tanh(theta / 2.0)
        return math.log(0.5 * (1.0 - r * r)) if abs(r) < 1 else -math.inf
    if transform == "identity":
        return 0.0
    raise ValueError(f"unknown transform {transform!r}")


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


# -- priors on the internal scale ----------------------------------------------

@dataclass(frozen=True)
class PCPrecision:
    """PC prior for a precision ``tau`` with ``P(1/sqrt(tau) > u) = alpha``.

    Density ``(lam/2) tau^{-3/2} exp(-lam tau^{-1/2})``, ``lam = -ln(alpha)/u``,
    expressed on ``theta = log tau``.
    """

    u: float
    alpha: float

    def __call__(self, theta: float) -> float:
        lam = -math.log(self.alpha) / self.u
        return math.log(lam / 2.0) - 0.5 * theta - lam * math.exp(-0.5 * theta)


@dataclass(frozen=True)
class PCStdDev:
    """PC prior (exponential) for a standard deviation with ``P(sigma > u) = alpha``, on ``log sigma``."""

    u: float
    alpha: float

    def __call__(self, theta: float) -> float:
        lam = -math.log(self.alpha) / self.u
        return math.log(lam) - lam * math.exp(theta) + theta


@dataclass(frozen=True)
class PCMaternRange:
    """PC prior for a 2-d Matérn range with ``P(range < rho0) = alpha``, on ``log range``.

    Density ``lam rho^{-2} exp(-lam / rho)`` with ``lam = -ln(alpha) rho0``.
    """

    rho0: float
    alpha: float

    def __call__(self, theta: float) -> float:
        lam = -math.log(self.alpha) * self.rho0
        return math.log(lam) - theta - lam * math.exp(-theta)


@dataclass(frozen=True)
class LogGamma:
    """Gamma(shape, rate) on a precision, expressed on ``log tau``."""

    shape: float = 1.0
    rate: float = 5e-5

    def __call__(self, theta: float) -> float:
        a, b = self.shape, self.rate
        return a * math.log(b) - float(gammaln(a)) + a * theta - b * math.exp(theta)


@dataclass(frozen=True)
class Normal:
    """Gaussian on the internal coordinate, parametrized by mean and precision."""

    mean: float = 0.0
    precision: float = 1.0

    def __call__(self, theta: float) -> float:
        return 0.5 * math.log(self.precision / (2 * math.pi)) - 0.5 * self.precision * (theta - self.mean) ** 2


@dataclass(frozen=True)
class Flat:
    def __call__(self, theta: float) -> float:
        return 0.0


@dataclass(frozen=True)
class PCBym2Phi:
    """PC prior for the BYM2 mixing parameter with ``P(phi < u) = alpha``, on ``logit phi``.

    The distance to the base model ``phi = 0`` is ``d(phi) = sqrt(2 KLD(phi))``
    with ``KLD = 0.5 [phi sum(g - 1) - sum log(1 - phi + phi g)]`` where
    ``g`` are the eigenvalues of the generalized inverse of the scaled
    structure.  An exponential prior on ``d`` is mapped to ``phi``.
    """

    u: float
    alpha: float
    gen_inv_eigenvalues: tuple[float, ...] = field(repr=False)

    def _kld(self, phi: float) -> tuple[float, float]:
        gm1 = np.asarray(self.gen_inv_eigenvalues) - 1.0
        a = phi * gm1
        kld = 0.5 * np.sum(a - np.log1p(a))
        dkld = 0.5 * np.sum(gm1 * a / (1.0 + a))
        return float(kld), float(dkld)

    def _rate(self) -> float:
        d_u = math.sqrt(2.0 * max(self._kld(self.u)[0], 0.0))
        return -math.log(1.0 - self.alpha) / d_u

    def __call__(self, theta: float) -> float:
        phi = float(expit(theta))
        if phi <= 0.0 or phi >= 1.0:
            return -math.inf
        kld, dkld = self._kld(phi)
        if kld <= 0.0:
            # below float resolution of the distance; use the small-phi limit
            g = np.asarray(self.gen_inv_eigenvalues)
            c = math.sqrt(0.5 * np.sum((g - 1.0) ** 2))
            d, dd = c * phi, c
        else:
            d = math.sqrt(2.0 * kld)
            dd = dkld / d
        lam = self._rate()
        return math.log(lam) - lam * d + math.log(abs(dd)) + log_jacobian("logit", theta)


def bym2_phi_prior(scaled_structure: np.ndarray, deficiency: int, u: float = 0.5,
                   alpha: float = 2.0 / 3.0) -> PCBym2Phi:
    """Build the phi prior from a scaled structure with a known null-space dimension."""
    evals = np.linalg.eigvalsh(scaled_structure)
    g = np.zeros_like(evals)
    g[deficiency:] = 1.0 / evals[deficiency:]
    return PCBym2Phi(u, alpha, tuple(float(v) for v in g))
