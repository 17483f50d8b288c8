"""Latent Gaussian model inference by Laplace approximation.

A :class:`LatentGaussianModel` couples a latent vector ``x`` (a stack of
independent effect blocks, each with a hyperparameter-dependent precision
and fixed linear constraints) with conditionally independent Gaussian or
Poisson observations ``y_i | eta_i`` where ``eta = M x + offset``.

Constraints are handled by working in coordinates ``x = N z`` where the
columns of ``N`` form an orthonormal basis of the constrained subspace; the
prior of ``z`` is the conditional Gaussian of the block given its
constraints.  Directions left improper after the constraints (flat fixed
effects, the linear trend of an RW2) are counted per block and handled as
flat in the marginal likelihood.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Protocol, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp, ndtri
from scipy.stats import chi2, qmc

from . import priors as pr

GAUSSIAN, POISSON = 0, 1
LOG_2PI = math.log(2 * math.pi)


class LaplaceError(RuntimeError):
    pass


class Block(Protocol):
    name: str

    @property
    def size(self) -> int: ...

    @property
    def constraints(self) -> np.ndarray: ...

    @property
    def null_dim(self) -> int: ...

    def precision(self, params: dict[str, float]) -> np.ndarray: ...


@dataclass(frozen=True)
class FixedEffects:
    """Independent Gaussian priors on the fixed effects; precision 0 means flat."""

    names: tuple[str, ...]
    precisions: tuple[float, ...]
    name: str = "fixed"

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def constraints(self) -> np.ndarray:
        return np.zeros((0, self.size))

    @property
    def null_dim(self) -> int:
        return sum(1 for p in self.precisions if p == 0)

    def precision(self, params):
        return np.diag(np.asarray(self.precisions, dtype=float))


@dataclass(frozen=True)
class ScaledStructure:
    """``tau * R`` for a fixed structure matrix ``R`` (``tau = 1`` when no hyper is named)."""

    name: str
    structure: np.ndarray
    tau: str | None = None
    constraint_rows: np.ndarray | None = None
    improper_dims: int = 0

    @property
    def size(self) -> int:
        return self.structure.shape[0]

    @property
    def constraints(self) -> np.ndarray:
        if self.constraint_rows is None:
            return np.zeros((0, self.size))
        return np.atleast_2d(self.constraint_rows)

    @property
    def null_dim(self) -> int:
        return self.improper_dims

    def precision(self, params):
        return self.structure if self.tau is None else params[self.tau] * self.structure


@dataclass(frozen=True)
class Hyper:
    name: str
    transform: str
    prior: Callable[[float], float]
    initial: float

    @property
    def initial_internal(self) -> float:
        return pr.to_internal(self.transform, self.initial)


def _orthonormal_complement(A: np.ndarray) -> np.ndarray:
    return sla.null_space(A)


@dataclass(frozen=True, eq=False)
class LatentGaussianModel:
    blocks: tuple
    design: np.ndarray
    y: np.ndarray
    family: np.ndarray
    offset: np.ndarray | None = None
    noise_group: np.ndarray | None = None
    noise: tuple[str, ...] = ()
    hypers: tuple[Hyper, ...] = ()
    fixed_params: dict[str, float] = field(default_factory=dict)
    predictor_design: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        design = np.asarray(self.design, dtype=float)
        n_obs = design.shape[0]
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("design", design)
        set_("y", np.asarray(self.y, dtype=float))
        fam = np.asarray(self.family)
        if fam.ndim == 0:
            fam = np.full(n_obs, int(fam))
        set_("family", fam.astype(np.int64))
        set_("offset", np.zeros(n_obs) if self.offset is None else np.asarray(self.offset, float))
        if self.noise_group is None:
            set_("noise_group", np.where(self.family == GAUSSIAN, 0, -1))
        else:
            set_("noise_group", np.asarray(self.noise_group, dtype=np.int64))
        set_("blocks", tuple(self.blocks))
        set_("hypers", tuple(self.hypers))
        if self.y.shape != (n_obs,) or self.offset.shape != (n_obs,) or self.family.shape != (n_obs,):
            raise ValueError("observation arrays must match the design row count")
        if design.shape[1] != self.n_latent:
            raise ValueError(f"design has {design.shape[1]} columns, blocks total {self.n_latent}")
        if not np.all(np.isfinite(design)):
            raise ValueError("design has non-finite entries")
        if np.any((self.family == GAUSSIAN) & (self.noise_group < 0)):
            raise ValueError("Gaussian rows need a noise group")
        if np.any(self.family == GAUSSIAN) and self.noise_group.max() >= len(self.noise):
            raise ValueError("noise group without a named precision")
        pois = self.family == POISSON
        if np.any(pois & ((self.y < 0) | (self.y != np.round(self.y)))):
            raise ValueError("Poisson responses must be nonnegative integers")
        if not np.all(np.isfinite(self.offset)):
            raise ValueError("non-finite offset (is an expected count zero?)")
        names = [h.name for h in self.hypers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate hyperparameter names")
        if self.predictor_design is not None:
            set_("predictor_design", np.asarray(self.predictor_design, float))

    # -- layout ---------------------------------------------------------------

    @cached_property
    def block_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for b in self.blocks:
            out[b.name] = slice(start, start + b.size)
            start += b.size
        return out

    @property
    def n_latent(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]

    @property
    def hyper_names(self) -> tuple[str, ...]:
        return tuple(h.name for h in self.hypers)

    @cached_property
    def _bases(self) -> list[np.ndarray | None]:
        out = []
        for b in self.blocks:
            A = b.constraints
            out.append(_orthonormal_complement(A) if A.shape[0] else None)
        return out

    @cached_property
    def basis(self) -> np.ndarray:
        parts = [np.eye(b.size) if N is None else N for b, N in zip(self.blocks, self._bases)]
        return sla.block_diag(*parts)

    @cached_property
    def constraint_matrix(self) -> np.ndarray:
        rows = []
        for b in self.blocks:
            A = b.constraints
            if A.shape[0]:
                s = self.block_slices[b.name]
                full = np.zeros((A.shape[0], self.n_latent))
                full[:, s] = A
                rows.append(full)
        return np.vstack(rows) if rows else np.zeros((0, self.n_latent))

    @cached_property
    def reduced_design(self) -> np.ndarray:
        return self.design @ self.basis

    @property
    def improper_dims(self) -> int:
        return sum(b.null_dim for b in self.blocks)

    @property
    def n_reduced(self) -> int:
        return self.basis.shape[1]

    # -- hyperparameters --------------------------------------------------------

    def params(self, theta) -> dict[str, float]:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.size != len(self.hypers):
            raise ValueError(f"expected {len(self.hypers)} hyperparameters, got {theta.size}")
        out = dict(self.fixed_params)
        for h, t in zip(self.hypers, theta):
            out[h.name] = pr.to_user(h.transform, float(t))
        return out

    def log_prior_theta(self, theta) -> float:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return float(sum(h.prior(float(t)) for h, t in zip(self.hypers, theta)))

    @property
    def theta_initial(self) -> np.ndarray:
        return np.array([h.initial_internal for h in self.hypers], dtype=float)

    # -- prior and likelihood pieces ----------------------------------------------

    def prior_reduced(self, params) -> tuple[np.ndarray, float]:
        """Precision of ``z`` and its log pseudo-determinant."""
        mats, logdet = [], 0.0
        for b, N in zip(self.blocks, self._bases):
            Q = np.asarray(b.precision(params), dtype=float)
            Qz = Q if N is None else N.T @ Q @ N
            Qz = 0.5 * (Qz + Qz.T)
            k = b.null_dim
            if k == 0:
                try:
                    L = np.linalg.cholesky(Qz)
                except np.linalg.LinAlgError as exc:
                    raise LaplaceError(f"prior precision of block {b.name!r} is not positive definite") from exc
                logdet += 2.0 * float(np.sum(np.log(np.diag(L))))
            else:
                ev = np.linalg.eigvalsh(Qz)[k:]
                if ev.size and ev[0] <= 0:
                    raise LaplaceError(f"prior precision of block {b.name!r} has extra null directions")
                logdet += float(np.sum(np.log(ev)))
            mats.append(Qz)
        return sla.block_diag(*mats), logdet

    def noise_precision(self, params) -> np.ndarray:
        tau = np.array([params[name] for name in self.noise], dtype=float)
        out = np.zeros(self.n_obs)
        g = self.noise_group >= 0
        out[g] = tau[self.noise_group[g]]
        return out

    def pointwise_loglik(self, eta: np.ndarray, tau_obs: np.ndarray) -> np.ndarray:
        """log p(y_i | eta_i); ``eta`` may carry leading sample axes."""
        y = self.y
        gauss = self.family == GAUSSIAN
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            g = 0.5 * np.log(tau_obs) - 0.5 * LOG_2PI - 0.5 * tau_obs * (y - eta) ** 2
            p = y * eta - np.exp(eta) - gammaln(y + 1.0)
        return np.where(gauss, g, p)

    def _score(self, eta, tau_obs):
        gauss = self.family == GAUSSIAN
        with np.errstate(over="ignore"):
            mu = np.exp(np.where(gauss, 0.0, eta))
        grad = np.where(gauss, tau_obs * (self.y - eta), self.y - mu)
        w = np.where(gauss, tau_obs, mu)
        return grad, w


# -- Laplace approximation ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianApprox:
    """Gaussian approximation of ``x | y, theta``.

    Either a Laplace result (``chol`` is the lower Cholesky factor of the
    reduced posterior precision and ``basis`` the constraint basis), or a
    moment-specified Gaussian with an explicit covariance factor.
    """

    theta: np.ndarray
    mean: np.ndarray
    z_mode: np.ndarray | None = None
    chol: np.ndarray | None = None
    basis: np.ndarray | None = None
    log_lik: float = 0.0
    quad: float = 0.0
    logdet_prior: float = 0.0
    logdet_posterior: float = 0.0
    iterations: int = 0
    grad_norm: float = 0.0
    factor: np.ndarray | None = None

    @classmethod
    def from_moments(cls, mean, cov=None, theta=()):
        mean = np.asarray(mean, dtype=float)
        if cov is None:
            F = np.zeros((mean.size, mean.size))
        else:
            cov = np.asarray(cov, dtype=float)
            ev, V = np.linalg.eigh(0.5 * (cov + cov.T))
            F = V * np.sqrt(np.clip(ev, 0.0, None))
        return cls(np.asarray(theta, float), mean, factor=F)

    @cached_property
    def cov_factor(self) -> np.ndarray:
        if self.factor is not None:
            return self.factor
        Linv_T = sla.solve_triangular(self.chol, np.eye(self.chol.shape[0]), lower=True).T
        return Linv_T if self.basis is None else self.basis @ Linv_T

    @property
    def rank(self) -> int:
        return self.cov_factor.shape[1]

    @cached_property
    def variance(self) -> np.ndarray:
        F = self.cov_factor
        return np.einsum("ij,ij->i", F, F)

    def covariance(self) -> np.ndarray:
        F = self.cov_factor
        return F @ F.T

    def draw(self, eps: np.ndarray) -> np.ndarray:
        """Map standard normals of shape (n, rank) to latent draws (n, n_latent)."""
        return self.mean + eps @ self.cov_factor.T


def _chol_regularized(H: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        pass
    eps = 1e-8 * max(float(np.max(np.abs(np.diag(H)))), 1e-300)
    for k in range(8):
        try:
            return np.linalg.cholesky(H + eps * 2 ** k * np.eye(H.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise LaplaceError("Hessian indefinite after regularization")


def laplace_at(model: LatentGaussianModel, theta, z0=None, max_iter: int = 100,
               tol: float = 1e-8, log_joint_trace: list | None = None) -> GaussianApprox:
    """Newton search for the mode of ``log p(y | x, theta) + log p(x | theta)``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    params = model.params(theta)
    Qz, logdet_prior = model.prior_reduced(params)
    tau_obs = model.noise_precision(params)
    if np.any((model.family == GAUSSIAN) & ~(tau_obs > 0)):
        raise LaplaceError("noise precision must be positive")
    B = model.reduced_design
    d = B.shape[1]
    z = np.zeros(d) if z0 is None else np.array(z0, dtype=float)

    def objective(z):
        eta = B @ z + model.offset
        ll = float(np.sum(model.pointwise_loglik(eta, tau_obs)))
        return ll - 0.5 * float(z @ Qz @ z), ll, eta

    f, ll, eta = objective(z)
    if not np.isfinite(f):
        if z0 is not None:
            z = np.zeros(d)
            f, ll, eta = objective(z)
        if not np.isfinite(f):
            raise LaplaceError("non-finite log likelihood at the starting point")
    if log_joint_trace is not None:
        log_joint_trace.append(f)
    it, decrement, stalled = 0, math.inf, False
    while True:
        g_eta, w = model._score(eta, tau_obs)
        grad = B.T @ g_eta - Qz @ z
        H = Qz + (B.T * w) @ B
        L = _chol_regularized(H)
        step = sla.cho_solve((L, True), grad)
        decrement = float(grad @ step)
        if math.sqrt(max(decrement, 0.0)) < tol or stalled or it >= max_iter:
            break
        t, accepted = 1.0, False
        while t > 1e-10:
            zn = z + t * step
            fn, lln, etan = objective(zn)
            if np.isfinite(fn) and fn >= f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        # a step that no longer changes the objective means rounding noise dominates the decrement
        stalled = fn - f <= 1e-14 * max(1.0, abs(f))
        z, f, ll, eta = zn, fn, lln, etan
        if log_joint_trace is not None:
            log_joint_trace.append(f)
        it += 1
    if it >= max_iter and not stalled and math.sqrt(max(decrement, 0.0)) >= tol:
        raise LaplaceError(f"Newton did not converge in {max_iter} iterations")
    gnorm = math.sqrt(max(decrement, 0.0))
    return GaussianApprox(
        theta=theta, mean=model.basis @ z, z_mode=z, chol=L, basis=model.basis,
        log_lik=ll, quad=float(z @ Qz @ z), logdet_prior=logdet_prior,
        logdet_posterior=2.0 * float(np.sum(np.log(np.diag(L)))), iterations=it, grad_norm=gnorm,
    )


def skew_corrected(model: LatentGaussianModel, approx: GaussianApprox) -> GaussianApprox:
    """Shift the mean by the first-order skewness correction of the Laplace mode.

    With ``t_i`` the third derivative of the log likelihood in ``eta_i`` and
    ``v_i`` the approximate variance of ``eta_i``, the posterior mean moves by
    ``0.5 H^{-1} B^T (t * v)``. Gaussian observations have ``t = 0``.
    """
    if approx.chol is None or approx.z_mode is None:
        return approx
    pois = model.family == POISSON
    if not np.any(pois):
        return approx
    B = model.reduced_design
    eta = B @ approx.z_mode + model.offset
    t = np.where(pois, -np.exp(np.where(pois, eta, 0.0)), 0.0)
    rows = np.flatnonzero(pois)
    W = sla.solve_triangular(approx.chol, B[rows].T, lower=True)
    v = np.einsum("ij,ij->j", W, W)
    dz = 0.5 * sla.cho_solve((approx.chol, True), B[rows].T @ (t[rows] * v))
    return replace(approx, mean=approx.mean + approx.basis @ dz)


def log_marginal_likelihood(model: LatentGaussianModel, theta, approx: GaussianApprox) -> float:
    """Laplace identity ``log p(y|x*) + log p(x*|theta) - log p_G(x*|y, theta)``."""
    return (approx.log_lik - 0.5 * approx.quad + 0.5 * approx.logdet_prior
            - 0.5 * approx.logdet_posterior + 0.5 * model.improper_dims * LOG_2PI)


def log_joint(model: LatentGaussianModel, theta, z0=None) -> tuple[float, GaussianApprox]:
    approx = laplace_at(model, theta, z0=z0)
    return log_marginal_likelihood(model, theta, approx) + model.log_prior_theta(theta), approx


# -- hyperparameters -----------------------------------------------------------------

@dataclass(frozen=True)
class HyperMode:
    theta: np.ndarray
    log_joint: float
    converged: bool
    n_iter: int
    n_eval: int
    theta_start: np.ndarray


def optimize_hyper(model: LatentGaussianModel, theta0=None, max_iter: int = 400,
                   xatol: float = 1e-4, fatol: float = 1e-6, simplex_step: float = 0.5) -> HyperMode:
    """Nelder-Mead maximization of ``log p(y | theta) + log p(theta)`` on the internal scale."""
    theta0 = model.theta_initial if theta0 is None else np.atleast_1d(np.asarray(theta0, dtype=float))
    m = theta0.size
    if m == 0:
        lj, _ = log_joint(model, theta0)
        return HyperMode(theta0, lj, True, 0, 1, theta0)
    cache = {"z": None}

    def negobj(t):
        try:
            lj, approx = log_joint(model, t, z0=cache["z"])
        except (LaplaceError, ValueError, np.linalg.LinAlgError, OverflowError):
            return np.inf
        if not np.isfinite(lj):
            return np.inf
        cache["z"] = approx.z_mode
        return -lj

    simplex = np.vstack([theta0] + [theta0 + simplex_step * e for e in np.eye(m)])
    res = minimize(negobj, theta0, method="Nelder-Mead",
                   options=dict(maxiter=max_iter, xatol=xatol, fatol=fatol, initial_simplex=simplex))
    theta = np.asarray(res.x, dtype=float)
    base = negobj(theta0)
    if not np.isfinite(res.fun) or (np.isfinite(base) and res.fun > base):
        theta, fun = theta0, base
    else:
        fun = res.fun
    if not np.isfinite(fun):
        raise LaplaceError("no finite objective value found during hyperparameter search")
    if not res.success:
        warnings.warn(f"hyperparameter search not converged: {res.message}", RuntimeWarning, stacklevel=2)
    return HyperMode(theta, -float(fun), bool(res.success), int(res.nit), int(res.nfev), theta0)


def _hessian(f, x, h):
    m = x.size
    H = np.zeros((m, m))
    f0 = f(x)
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = h
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h ** 2
        for j in range(i):
            ej = np.zeros(m)
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


@dataclass(frozen=True, eq=False)
class ThetaPoint:
    theta: np.ndarray
    weight: float
    approx: GaussianApprox
    log_joint: float


@dataclass(frozen=True, eq=False)
class LgmFit:
    points: tuple[ThetaPoint, ...]
    hyper_names: tuple[str, ...]
    transforms: tuple[str, ...]
    theta_mode: np.ndarray
    theta_cov: np.ndarray | None
    log_mlik: float
    converged: bool = True
    latent_names: tuple[str, ...] = ()
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        w = np.array([p.weight for p in self.points])
        if w.size == 0:
            raise ValueError("fit needs at least one theta point")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("theta weights must be nonnegative and sum to one")

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    def latent_mean(self) -> np.ndarray:
        return sum(p.weight * p.approx.mean for p in self.points)

    def latent_var(self) -> np.ndarray:
        m = self.latent_mean()
        second = sum(p.weight * (p.approx.variance + p.approx.mean ** 2) for p in self.points)
        return np.maximum(second - m ** 2, 0.0) if len(self.points) > 1 else self.points[0].approx.variance

    def latent_sd(self) -> np.ndarray:
        return np.sqrt(self.latent_var())

    def gaussian_mixture(self, index: int | np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mixture weights, means and sds (points along axis 0) of latent entries."""
        w = self.weights
        means = np.array([p.approx.mean[index] for p in self.points])
        sds = np.array([np.sqrt(p.approx.variance[index]) for p in self.points])
        return w, means, sds

    def linear_combination(self, rows: np.ndarray):
        """Mixture components of ``rows @ x`` for each row."""
        rows = np.atleast_2d(rows)
        means = np.array([rows @ p.approx.mean for p in self.points])
        sds = np.array([np.sqrt(np.einsum("ij,ij->i", rows @ p.approx.cov_factor, rows @ p.approx.cov_factor))
                        for p in self.points])
        return self.weights, means, sds

    def with_diagnostics(self, **kw) -> "LgmFit":
        return replace(self, diagnostics={**self.diagnostics, **kw})

    def hyper_user(self) -> dict[str, float]:
        return {n: pr.to_user(t, float(v)) for n, t, v in zip(self.hyper_names, self.transforms, self.theta_mode)}


def _fit_from_points(model, pts, theta_hat, cov, log_mlik, converged, mean_correction=False) -> LgmFit:
    if mean_correction:
        pts = [(t, l, skew_corrected(model, a)) for t, l, a in pts]
    lj = np.array([p[1] for p in pts])
    w = np.exp(lj - lj.max())
    w /= w.sum()
    points = tuple(ThetaPoint(np.asarray(t, float), float(wi), a, float(l)) for (t, l, a), wi in zip(pts, w))
    names = tuple(model.meta.get("latent_names", ()))
    return LgmFit(points, model.hyper_names, tuple(h.transform for h in model.hypers),
                  np.asarray(theta_hat, float), cov, float(log_mlik), converged, names)


def explore_hyper(model: LatentGaussianModel, mode: HyperMode | np.ndarray, strategy: str = "mode",
                  k: int = 2, step: float = 1.0, hessian_step: float = 0.02, n_points: int = 128,
                  df: float = 5.0, inflate: float = 1.2, mean_correction: bool = False) -> LgmFit:
    """Integrate over the hyperparameters around the mode.

    ``strategy="mode"`` keeps the mode alone (empirical Bayes).
    ``strategy="axis"`` adds ``2k`` points per axis at ``+-j * step * sd`` with
    ``sd`` from the curvature at the mode; weights follow the log joint.
    """
    if isinstance(mode, HyperMode):
        theta_hat, converged = mode.theta, mode.converged
    else:
        theta_hat, converged = np.atleast_1d(np.asarray(mode, float)), True
    lj0, a0 = log_joint(model, theta_hat)
    m = theta_hat.size
    cov, log_mlik = None, lj0
    if m:
        def f(t):
            try:
                return log_joint(model, t, z0=a0.z_mode)[0]
            except (LaplaceError, ValueError, np.linalg.LinAlgError):
                return -np.inf
        H = -_hessian(f, theta_hat, hessian_step)
        if not np.all(np.isfinite(H)):
            warnings.warn("curvature at the hyperparameter mode is not finite; no theta covariance",
                          RuntimeWarning, stacklevel=2)
        else:
            ev, V = np.linalg.eigh(0.5 * (H + H.T))
            if ev.min() > 0:
                cov = V @ np.diag(1.0 / ev) @ V.T
                log_mlik = lj0 + 0.5 * m * LOG_2PI - 0.5 * float(np.sum(np.log(ev)))
            else:
                # curvature not negative definite: fall back to a clipped spectrum
                cov = V @ np.diag(1.0 / np.maximum(np.abs(ev), 1e-6)) @ V.T
    pts = [(theta_hat, lj0, a0)]
    if strategy == "axis" and m:
        sd = np.sqrt(np.diag(cov)) if cov is not None else np.ones(m)
        for i in range(m):
            for j in range(1, k + 1):
                for sgn in (-1.0, 1.0):
                    t = theta_hat.copy()
                    t[i] += sgn * j * step * sd[i]
                    try:
                        lj, a = log_joint(model, t, z0=a0.z_mode)
                    except (LaplaceError, ValueError, np.linalg.LinAlgError) as exc:
                        warnings.warn(f"dropping grid point {t}: {exc}", RuntimeWarning, stacklevel=2)
                        continue
                    if np.isfinite(lj):
                        pts.append((t, lj, a))
    elif strategy == "sample" and m:
        return _importance_fit(model, theta_hat, cov, a0, log_mlik, converged, n_points, df, inflate,
                               mean_correction)
    elif strategy not in ("mode", "axis", "sample"):
        raise ValueError(f"unknown exploration strategy {strategy!r}")
    return _fit_from_points(model, pts, theta_hat, cov, log_mlik, converged, mean_correction)


def _importance_fit(model, theta_hat, cov, a0, log_mlik, converged, n_points, df, inflate,
                    mean_correction) -> LgmFit:
    """Self-normalized importance weights over a Student-t cloud around the mode.

    Draws come from a scrambled Sobol sequence with a fixed seed, so the
    design is deterministic.
    """
    m = theta_hat.size
    if cov is None:
        cov = np.eye(m)
    Lc = np.linalg.cholesky(inflate ** 2 * cov + 1e-12 * np.eye(m))
    u = qmc.Sobol(m + 1, scramble=True, seed=0).random(n_points)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    g = ndtri(u[:, :m])
    chi = chi2.ppf(u[:, m], df)
    dev = g * np.sqrt(df / chi)[:, None]
    logq = -0.5 * (df + m) * np.log1p(np.sum(dev ** 2, axis=1) / df)
    pts = []
    for d, lq in zip(dev, logq):
        t = theta_hat + Lc @ d
        try:
            lj, a = log_joint(model, t, z0=a0.z_mode)
        except (LaplaceError, ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(lj):
            pts.append((t, lj - lq, a))
    if not pts:
        raise LaplaceError("no importance point has a finite log joint")
    return _fit_from_points(model, pts, theta_hat, cov, log_mlik, converged, mean_correction)


def fit_lgm(model: LatentGaussianModel, theta0=None, strategy: str = "mode", restarts: int = 0,
            **kw) -> tuple[LgmFit, list[HyperMode]]:
    """optimize_hyper (optionally restarted from its own mode) followed by explore_hyper."""
    modes = [optimize_hyper(model, theta0)]
    for _ in range(restarts):
        modes.append(optimize_hyper(model, modes[-1].theta))
    return explore_hyper(model, modes[-1], strategy, **kw), modes


# -- sampling and predictive diagnostics -----------------------------------------------------

def sample_latent_indexed(fit: LgmFit, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(fit.points), size=n, p=fit.weights)
    r = max(p.approx.rank for p in fit.points)
    eps = rng.standard_normal((n, r))
    out = np.empty((n, fit.points[0].approx.mean.size))
    for k, p in enumerate(fit.points):
        sel = idx == k
        if np.any(sel):
            out[sel] = p.approx.draw(eps[sel, :p.approx.rank])
    return out, idx


def sample_latent(fit: LgmFit, n: int, seed) -> np.ndarray:
    return sample_latent_indexed(fit, n, seed)[0]


def _pointwise_logdens(fit: LgmFit, model: LatentGaussianModel, n_samples: int, seed) -> np.ndarray:
    x, idx = sample_latent_indexed(fit, n_samples, seed)
    eta = x @ model.design.T + model.offset
    taus = np.array([model.noise_precision(model.params(p.theta)) for p in fit.points])
    return model.pointwise_loglik(eta, taus[idx])


@dataclass(frozen=True)
class WaicResult:
    waic: float
    lppd: float
    p_waic: float
    pointwise: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class CpoResult:
    neg_sum_log_cpo: float
    log_cpo: np.ndarray = field(repr=False)
    flagged: tuple[int, ...] = ()


def waic_from_logdens(ld: np.ndarray) -> WaicResult:
    S = ld.shape[0]
    lppd_i = logsumexp(ld, axis=0) - math.log(S)
    p_i = np.var(ld, axis=0, ddof=1) if S > 1 else np.zeros(ld.shape[1])
    lppd, p = float(np.sum(lppd_i)), float(np.sum(p_i))
    return WaicResult(-2.0 * (lppd - p), lppd, p, -2.0 * (lppd_i - p_i))


def cpo_from_logdens(ld: np.ndarray) -> CpoResult:
    S = ld.shape[0]
    log_cpo = -(logsumexp(-ld, axis=0) - math.log(S))
    flagged = tuple(int(i) for i in np.flatnonzero(~np.isfinite(log_cpo) | (log_cpo < -700)))
    finite = np.where(np.isfinite(log_cpo), log_cpo, -700.0)
    return CpoResult(-float(np.sum(finite)), log_cpo, flagged)


def waic(fit: LgmFit, model: LatentGaussianModel, n_samples: int = 1000, seed=0) -> WaicResult:
    """WAIC = -2 (lppd - p_waic) with p_waic the summed posterior variance of log densities."""
    return waic_from_logdens(_pointwise_logdens(fit, model, n_samples, seed))


def cpo_sum(fit: LgmFit, model: LatentGaussianModel, n_samples: int = 1000, seed=0) -> CpoResult:
    """-sum log CPO_i with CPO_i the harmonic mean of p(y_i | x_s)."""
    return cpo_from_logdens(_pointwise_logdens(fit, model, n_samples, seed))


def predictive_diagnostics(fit: LgmFit, model: LatentGaussianModel, n_samples: int = 1000, seed=0) -> LgmFit:
    ld = _pointwise_logdens(fit, model, n_samples, seed)
    w, c = waic_from_logdens(ld), cpo_from_logdens(ld)
    return fit.with_diagnostics(mlik=fit.log_mlik, waic=w.waic, p_waic=w.p_waic, cpo=c.neg_sum_log_cpo,
                                cpo_flagged=c.flagged)
