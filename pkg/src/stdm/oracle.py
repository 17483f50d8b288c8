"""Metropolis-within-Gibbs sampler used as a reference for the Laplace engine.

Each iteration makes two moves on the reduced coordinates ``z`` (``x = N z``):

* a joint move: an adaptive random walk on the internal hyperparameters,
  with ``z`` carried along by the map that keeps its standardized residual
  against the Laplace approximation fixed;
* a latent move: a preconditioned Crank-Nicolson step whose reference
  measure is the Laplace Gaussian at the current hyperparameters.

Both moves are exact Metropolis-Hastings updates of the joint posterior;
the Laplace approximation only shapes the proposals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import lgm
from .parallel import as_seed_sequence, ordered_map

TARGET_JOINT = 0.234
TARGET_LATENT = 0.4
MIN_ACCEPTANCE = 0.05
MAX_LATENT_DIM = 500


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ChainOutput:
    """Post-burn-in draws of several chains.

    ``theta`` has shape (chains, n, m) on the internal scale and ``latent``
    (chains, n, n_latent).
    """

    hyper_names: tuple[str, ...]
    latent_names: tuple[str, ...]
    theta: np.ndarray
    latent: np.ndarray
    acceptance: dict
    rhat: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.latent.shape[0]

    @property
    def n_draws(self) -> int:
        return self.latent.shape[1]

    def pooled_latent(self) -> np.ndarray:
        return self.latent.reshape(-1, self.latent.shape[-1])

    def pooled_theta(self) -> np.ndarray:
        return self.theta.reshape(-1, self.theta.shape[-1])

    def latent_mean(self) -> np.ndarray:
        return self.pooled_latent().mean(axis=0)

    def latent_sd(self) -> np.ndarray:
        return self.pooled_latent().std(axis=0, ddof=1)

    def latent_mcse(self) -> np.ndarray:
        return batch_means_se(self.latent)

    def max_rhat(self) -> float:
        return max(self.rhat.values()) if self.rhat else math.nan


def split_rhat(draws: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction for draws of shape (chains, n, ...)."""
    c, n = draws.shape[:2]
    h = n // 2
    x = np.concatenate([draws[:, :h], draws[:, h:2 * h]], axis=0)
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = h * means.var(axis=0, ddof=1)
    var_plus = (h - 1) / h * W + B / h
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    return np.where(W > 0, r, 1.0)


def batch_means_se(draws: np.ndarray, n_batches: int = 20) -> np.ndarray:
    """Monte Carlo standard error of the pooled mean, batch means within each chain."""
    c, n = draws.shape[:2]
    b = n // n_batches
    if b < 1:
        raise ValueError("too few draws for batch means")
    x = draws[:, :b * n_batches].reshape(c, n_batches, b, *draws.shape[2:]).mean(axis=2)
    x = x.reshape(c * n_batches, *draws.shape[2:])
    return x.std(axis=0, ddof=1) / math.sqrt(c * n_batches)


class _Target:
    """Unnormalized log posterior of ``(theta, z)`` and the Laplace proposals."""

    def __init__(self, model: lgm.LatentGaussianModel):
        self.model = model
        self.B = model.reduced_design

    def log_post(self, theta, z, Qz, logdet_prior, tau_obs) -> float:
        eta = self.B @ z + self.model.offset
        ll = float(np.sum(self.model.pointwise_loglik(eta, tau_obs)))
        return ll - 0.5 * float(z @ Qz @ z) + 0.5 * logdet_prior + self.model.log_prior_theta(theta)

    def state(self, theta, z_warm):
        params = self.model.params(theta)
        Qz, ld = self.model.prior_reduced(params)
        tau = self.model.noise_precision(params)
        approx = lgm.laplace_at(self.model, theta, z0=z_warm)
        return {"theta": np.array(theta, float), "Qz": Qz, "ld": ld, "tau": tau,
                "m": approx.z_mode, "L": approx.chol,
                "half_logdet_H": 0.5 * approx.logdet_posterior}

    def log_post_state(self, st, z) -> float:
        return self.log_post(st["theta"], z, st["Qz"], st["ld"], st["tau"])


def _standardize(st, z):
    return st["L"].T @ (z - st["m"])


def _unstandardize(st, u):
    return st["m"] + sla.solve_triangular(st["L"].T, u, lower=False)


@dataclass(frozen=True)
class _ChainJob:
    model: lgm.LatentGaussianModel
    theta0: np.ndarray
    z0: np.ndarray
    prop_cov: np.ndarray
    iterations: int
    burn_in: int

    def __call__(self, seed):
        return _run_chain(self, np.random.default_rng(seed))


def _run_chain(job: _ChainJob, rng: np.random.Generator):
    tgt = _Target(job.model)
    m = job.theta0.size
    st = tgt.state(job.theta0, job.z0)
    z = job.z0.copy()
    lp = tgt.log_post_state(st, z)
    d = z.size
    scale = 2.38 ** 2 / max(m, 1)
    C = np.array(job.prop_cov, float) if m else np.zeros((0, 0))
    beta = 0.5
    n_keep = job.iterations - job.burn_in
    th_out = np.empty((n_keep, m))
    z_out = np.empty((n_keep, d))
    acc_j = acc_l = 0
    hist = []
    for it in range(job.iterations):
        burning = it < job.burn_in
        # joint move
        if m:
            Lc = np.linalg.cholesky(scale * C + 1e-10 * np.eye(m))
            th_new = st["theta"] + Lc @ rng.standard_normal(m)
            a = 0.0
            try:
                st_new = tgt.state(th_new, st["m"])
                z_new = _unstandardize(st_new, _standardize(st, z))
                lp_new = tgt.log_post_state(st_new, z_new)
                log_r = lp_new - lp + st["half_logdet_H"] - st_new["half_logdet_H"]
                if np.isfinite(log_r) and math.log(rng.uniform()) < log_r:
                    st, z, lp = st_new, z_new, lp_new
                    acc_j += not burning
                a = min(1.0, math.exp(min(log_r, 0.0))) if np.isfinite(log_r) else 0.0
            except (lgm.LaplaceError, ValueError, np.linalg.LinAlgError):
                rng.uniform()
            if burning:
                scale *= math.exp((a - TARGET_JOINT) / math.sqrt(it + 1))
                hist.append(st["theta"].copy())
                if it + 1 >= job.burn_in // 2 and len(hist) > 5 * m and (it + 1) % 50 == 0:
                    C = np.cov(np.array(hist[len(hist) // 2:]).T).reshape(m, m) + 1e-8 * np.eye(m)
        # latent move: pCN around the Laplace mode
        u = _standardize(st, z)
        u_new = math.sqrt(1 - beta ** 2) * u + beta * rng.standard_normal(d)
        z_new = _unstandardize(st, u_new)
        lp_new = tgt.log_post_state(st, z_new)
        log_r = (lp_new - lp) - 0.5 * float(u @ u - u_new @ u_new)
        if np.isfinite(log_r) and math.log(rng.uniform()) < log_r:
            z, lp = z_new, lp_new
            acc_l += not burning
        if burning:
            a = min(1.0, math.exp(min(log_r, 0.0))) if np.isfinite(log_r) else 0.0
            beta = float(np.clip(beta * math.exp((a - TARGET_LATENT) / math.sqrt(it + 1)), 1e-3, 1.0))
        else:
            th_out[it - job.burn_in] = st["theta"]
            z_out[it - job.burn_in] = z
    acc = {"joint": acc_j / n_keep if m else math.nan, "latent": acc_l / n_keep}
    return th_out, z_out, acc


def mcmc_fit(model: lgm.LatentGaussianModel, iterations: int = 6000, burn_in: int = 2000, seed=0,
             chains: int = 4, jobs: int = 1, start: lgm.LgmFit | None = None) -> ChainOutput:
    """Run ``chains`` independent chains and pool their post-burn-in draws.

    Chains start from over-dispersed draws around a Laplace fit (computed if
    ``start`` is not given). Raises :class:`OracleError` when a move's
    post-adaptation acceptance rate is below 0.05.
    """
    if iterations <= burn_in:
        raise ValueError("iterations must exceed burn_in")
    if model.n_reduced > MAX_LATENT_DIM:
        raise ValueError(f"latent dimension {model.n_reduced} exceeds {MAX_LATENT_DIM}")
    ss = as_seed_sequence(seed)
    init_ss, *chain_ss = ss.spawn(chains + 1)
    if start is None:
        start, _ = lgm.fit_lgm(model, restarts=1)
    rng = np.random.default_rng(init_ss)
    m = start.theta_mode.size
    cov = start.theta_cov if start.theta_cov is not None else 0.25 * np.eye(m)
    p0 = start.points[0].approx
    jobs_ = []
    for _ in range(chains):
        th = start.theta_mode + (np.linalg.cholesky(cov + 1e-10 * np.eye(m)) @ rng.standard_normal(m) if m else 0.0)
        L = p0.chol
        z = p0.z_mode + sla.solve_triangular(L.T, rng.standard_normal(L.shape[0]), lower=False)
        jobs_.append(_ChainJob(model, np.atleast_1d(np.asarray(th, float)), z, cov, iterations, burn_in))
    results = ordered_map(_run_per_chain, list(zip(jobs_, chain_ss)), jobs)
    theta = np.stack([r[0] for r in results])
    zs = np.stack([r[1] for r in results])
    latent = zs @ model.basis.T
    acc = {k: [r[2][k] for r in results] for k in ("joint", "latent")}
    for k, v in acc.items():
        if m == 0 and k == "joint":
            continue
        if min(v) < MIN_ACCEPTANCE:
            raise OracleError(f"{k} acceptance {min(v):.3f} below {MIN_ACCEPTANCE}")
    rh = {}
    names = tuple(model.meta.get("latent_names", ())) or tuple(f"x[{i}]" for i in range(latent.shape[-1]))
    for i, n in enumerate(model.hyper_names):
        rh[n] = float(split_rhat(theta[..., i]))
    rl = split_rhat(latent)
    for n, v in zip(names, rl):
        rh[n] = float(v)
    return ChainOutput(model.hyper_names, names, theta, latent, acc, rh)


def _run_per_chain(arg):
    job, ss = arg
    return job(ss)


def mcmc_converged(model: lgm.LatentGaussianModel, iterations: int = 6000, burn_in: int = 2000, seed=0,
                   chains: int = 4, jobs: int = 1, threshold: float = 1.05, start=None) -> ChainOutput:
    """``mcmc_fit``, rerun once at four times the length if any split R-hat exceeds ``threshold``."""
    out = mcmc_fit(model, iterations, burn_in, seed, chains, jobs, start)
    if out.max_rhat() < threshold:
        return out
    return mcmc_fit(model, 4 * iterations, 4 * burn_in, seed, chains, jobs, start)
