"""Stage-2 Poisson disease model over an areal graph.

``y(i, t) ~ Poisson(E(i, t) lambda(i, t))`` with
``log lambda = gamma0 + gamma^T z + psi(i) + zeta(t) + nu(t) + upsilon(i, t)``:
a BYM2 spatial effect, iid and RW2 time effects, and one of four
space-time interaction structures.  Cells follow the area-fastest layout
``t * S + i``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
import pandas as pd

from . import gmrf, lgm
from . import priors as pr
from .formula import HEALTH_PRESETS, Formula, resolve
from .graph import AdjacencyGraph, ScaledIcar, scaled_icar_from_graph
from .summary import QuantitySummary, hyper_quantities, latent_quantities, summary_table


class HealthError(ValueError):
    pass


# -- data -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CasePanel:
    """Cases and populations on a complete areas x times panel, arrays of shape (T, S).

    Missing case counts are NaN and are left out of the likelihood.
    """

    area_ids: tuple[str, ...]
    cases: np.ndarray
    population: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.cases, dtype=float)
        n = np.asarray(self.population, dtype=float)
        object.__setattr__(self, "cases", y)
        object.__setattr__(self, "population", n)
        if y.ndim != 2 or y.shape != n.shape:
            raise HealthError("cases and population must be (T, S) arrays of equal shape")
        if y.shape[1] != len(self.area_ids):
            raise HealthError("area_ids length does not match the panel width")
        obs = ~np.isnan(y)
        if np.any(y[obs] < 0) or np.any(y[obs] != np.round(y[obs])):
            raise HealthError("cases must be nonnegative integers")
        if not np.all(n > 0):
            raise HealthError("populations must be positive")

    @property
    def T(self) -> int:
        return self.cases.shape[0]

    @property
    def S(self) -> int:
        return self.cases.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.cases)


@dataclass(frozen=True, eq=False)
class ExpectedTable:
    E: np.ndarray
    rate: np.ndarray
    zero_times: tuple[int, ...] = ()


def expected_cases(panel: CasePanel) -> ExpectedTable:
    """Internal standardization: ``E = n * rate_t`` with ``rate_t`` the pooled rate at time t."""
    y = np.where(panel.missing, 0.0, panel.cases)
    n = np.where(panel.missing, 0.0, panel.population)
    tot_n = n.sum(axis=1)
    if np.any(tot_n <= 0):
        raise HealthError("a time point has no observed population")
    rate = y.sum(axis=1) / tot_n
    zero = tuple(int(t) for t in np.flatnonzero(rate == 0))
    if zero:
        warnings.warn(f"times {[t + 1 for t in zero]} have zero total cases; their cells leave the likelihood",
                      RuntimeWarning, stacklevel=2)
    return ExpectedTable(panel.population * rate[:, None], rate, zero)


def sir(panel: CasePanel, expected: ExpectedTable) -> tuple[np.ndarray, np.ndarray]:
    """Standardized incidence ratio ``y / E`` and its classical SD ``sqrt(y) / E``; NaN where undefined."""
    E = expected.E
    ok = (E > 0) & ~panel.missing
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(ok, panel.cases / E, np.nan)
        sd = np.where(ok, np.sqrt(panel.cases) / E, np.nan)
    return s, sd


# -- latent blocks ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Bym2Block:
    name: str
    spec: gmrf.Bym2Spec
    tau: str = "tau_psi"
    phi: str = "phi"

    @property
    def size(self) -> int:
        return 2 * self.spec.n_areas

    @property
    def constraints(self) -> np.ndarray:
        A_u = self.spec.scaled_icar.constraints
        return np.hstack([np.zeros_like(A_u), A_u])

    @property
    def null_dim(self) -> int:
        return 0

    @cached_property
    def _structure(self) -> np.ndarray:
        return self.spec.scaled_icar.structure.toarray()

    def precision(self, params):
        # dense equivalent of gmrf.bym2_precision
        tau, phi = params[self.tau], params[self.phi]
        if not 0.0 <= phi <= gmrf.PHI_MAX:
            raise lgm.LaplaceError("phi outside [0, 1)")
        n = self.spec.n_areas
        Q = np.zeros((2 * n, 2 * n))
        idx = np.arange(n)
        Q[idx, idx] = tau / (1.0 - phi)
        Q[idx, n + idx] = Q[n + idx, idx] = -np.sqrt(phi * tau) / (1.0 - phi)
        Q[n:, n:] = self._structure
        Q[n + idx, n + idx] += phi / (1.0 - phi)
        return Q


def _ar1_dense(T: int, rho: float) -> np.ndarray:
    return gmrf.ar1_precision(T, rho).Q.toarray() if T == 1 else _ar1_tridiag(T, rho)


def _ar1_tridiag(T, rho):
    Q = np.zeros((T, T))
    i = np.arange(T)
    Q[i, i] = 1.0 + rho * rho
    Q[0, 0] = Q[-1, -1] = 1.0
    Q[i[:-1], i[1:]] = Q[i[1:], i[:-1]] = -rho
    return Q / (1.0 - rho * rho)


@dataclass(frozen=True, eq=False)
class InteractionBlock:
    name: str
    kind: str
    S: int
    T: int
    icar: ScaledIcar | None
    tau: str = "tau_upsilon"
    rho: str = "rho_upsilon"

    @property
    def size(self) -> int:
        return self.S * self.T

    @cached_property
    def constraints(self) -> np.ndarray:
        rho = 0.0 if self.kind in ("II", "IV") else None
        return gmrf.interaction_structure(self.kind, self.S, self.T, self.icar, rho).Q.constraints

    @property
    def null_dim(self) -> int:
        return 0

    @cached_property
    def _spatial(self) -> np.ndarray:
        return np.eye(self.S) if self.kind in ("I", "II") else self.icar.structure.toarray()

    def precision(self, params):
        # dense equivalent of gmrf.interaction_structure scaled by tau
        tau = params[self.tau]
        if self.kind in ("II", "IV"):
            rho = params[self.rho]
            if not abs(rho) < 1:
                raise lgm.LaplaceError("interaction AR coefficient outside (-1, 1)")
            temporal = _ar1_dense(self.T, rho)
        else:
            temporal = np.eye(self.T)
        if self.kind == "I":
            return tau * np.eye(self.S * self.T)
        return tau * np.kron(temporal, self._spatial)


# -- model specification and assembly --------------------------------------------------

@dataclass(frozen=True)
class HealthSpec:
    formula: str = ""
    bym2: bool = True
    rw2: bool = True
    iid_time: bool = True
    interaction: str | None = "I"
    component_intercepts: bool = True
    fixed_precision: float = 1e-3
    psi_u: float = 1.0
    psi_alpha: float = 0.01
    phi_u: float = 0.5
    phi_alpha: float = 2.0 / 3.0
    gamma_shape: float = 1.0
    gamma_rate: float = 5e-5
    rho_precision: float = 0.15
    fixed: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.interaction is not None and self.interaction not in gmrf.KINDS:
            raise ValueError(f"unknown interaction kind {self.interaction!r}")

    @property
    def parsed_formula(self) -> Formula:
        return resolve(self.formula, HEALTH_PRESETS)


def _cell_values(v, T: int, S: int, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape == (S,):
        a = np.broadcast_to(a, (T, S))
    elif a.shape == (T,):
        a = np.broadcast_to(a[:, None], (T, S))
    try:
        return np.broadcast_to(a, (T, S)).ravel()
    except ValueError:
        raise HealthError(f"covariate {name!r} has shape {a.shape}, expected (T, S)={T, S}") from None


def fixed_effect_design(spec: HealthSpec, graph: AdjacencyGraph | None, covariates, T: int, S: int):
    """Columns (intercept, component intercepts, formula terms) over all cells."""
    names, cols = ["intercept"], [np.ones(T * S)]
    if spec.component_intercepts and graph is not None:
        lab = scaled_icar_from_graph(graph).labeling
        area = np.tile(np.arange(S), T)
        for c in lab.connected[1:]:
            names.append(f"component_{c}")
            cols.append(np.isin(area, lab.members[c]).astype(float))
    f = spec.parsed_formula
    f.check(covariates)
    if f.terms:
        table = {c: _cell_values(covariates[c], T, S, c) for c in f.columns}
        Z = f.design(table)
        names += list(f.labels)
        cols += list(Z.T)
    return tuple(names), np.column_stack(cols)


def assemble_health(spec: HealthSpec, panel: CasePanel, expected: ExpectedTable,
                    covariates: Mapping[str, np.ndarray] | None, graph: AdjacencyGraph | None) -> lgm.LatentGaussianModel:
    T, S = panel.T, panel.S
    covariates = {} if covariates is None else covariates
    needs_graph = spec.bym2 or spec.interaction in ("III", "IV") or spec.component_intercepts
    if needs_graph:
        if graph is None:
            raise HealthError("model needs the adjacency graph")
        if graph.n_areas != S:
            raise HealthError(f"graph has {graph.n_areas} areas but the panel has {S}")
    icar = scaled_icar_from_graph(graph) if graph is not None else None
    names, Xf = fixed_effect_design(spec, graph, covariates, T, S)
    n_cells = T * S
    precs = (0.0,) + (spec.fixed_precision,) * (len(names) - 1)
    blocks: list = [lgm.FixedEffects(names, precs)]
    cols = [Xf]
    hyp: list[lgm.Hyper] = []
    lg = pr.LogGamma(spec.gamma_shape, spec.gamma_rate)
    area = np.tile(np.arange(S), T)
    time = np.repeat(np.arange(T), S)
    latent_names = list(names)
    if spec.bym2:
        blk = Bym2Block("psi", gmrf.Bym2Spec(S, icar))
        blocks.append(blk)
        D = np.zeros((n_cells, 2 * S))
        D[np.arange(n_cells), area] = 1.0
        cols.append(D)
        hyp += [lgm.Hyper("tau_psi", "log", pr.PCPrecision(spec.psi_u, spec.psi_alpha), 1.0),
                lgm.Hyper("phi", "logit", pr.bym2_phi_prior(icar.structure.toarray(), icar.rank_deficiency,
                                                              spec.phi_u, spec.phi_alpha), 0.5)]
        latent_names += [f"psi[{i}]" for i in range(S)] + [f"u[{i}]" for i in range(S)]
    if spec.rw2:
        rw = gmrf.rw2_structure(T)
        blocks.append(lgm.ScaledStructure("nu", rw.dense(), "tau_nu", rw.constraints, 1))
        D = np.zeros((n_cells, T))
        D[np.arange(n_cells), time] = 1.0
        cols.append(D)
        hyp.append(lgm.Hyper("tau_nu", "log", lg, 10.0))
        latent_names += [f"nu[{t + 1}]" for t in range(T)]
    if spec.iid_time:
        blocks.append(lgm.ScaledStructure("zeta", np.eye(T), "tau_zeta"))
        D = np.zeros((n_cells, T))
        D[np.arange(n_cells), time] = 1.0
        cols.append(D)
        hyp.append(lgm.Hyper("tau_zeta", "log", lg, 10.0))
        latent_names += [f"zeta[{t + 1}]" for t in range(T)]
    if spec.interaction is not None:
        blocks.append(InteractionBlock("upsilon", spec.interaction, S, T, icar))
        cols.append(np.eye(n_cells))
        hyp.append(lgm.Hyper("tau_upsilon", "log", lg, 10.0))
        if spec.interaction in ("II", "IV"):
            hyp.append(lgm.Hyper("rho_upsilon", "fisher", pr.Normal(0.0, spec.rho_precision), 0.5))
        latent_names += [f"upsilon[{i},{t + 1}]" for t in range(T) for i in range(S)]
    fixed_params = dict(spec.fixed)
    hyp = [h for h in hyp if h.name not in fixed_params]
    full = np.hstack(cols)
    E = expected.E.ravel()
    y = panel.cases.ravel()
    keep = (E > 0) & ~np.isnan(y)
    if not np.any(keep):
        raise HealthError("no cells with positive expected count and observed cases")
    meta = dict(stage="health", area_ids=tuple(panel.area_ids), T=T, S=S, interaction=spec.interaction,
                fixed_names=names, latent_names=tuple(latent_names), observed_cells=np.flatnonzero(keep),
                formula=str(spec.parsed_formula))
    return lgm.LatentGaussianModel(tuple(blocks), full[keep], y[keep], lgm.POISSON, offset=np.log(E[keep]),
                                   noise_group=np.full(int(keep.sum()), -1), hypers=tuple(hyp),
                                   fixed_params=fixed_params, predictor_design=full, meta=meta)


# -- fitting and summaries ------------------------------------------------------------

def fit_health(model: lgm.LatentGaussianModel, theta0=None, strategy: str = "mode", restarts: int = 1,
               diagnostics: bool = True, n_samples: int = 1000, seed: int = 0, mean_correction: bool = True):
    """optimize_hyper then explore_hyper, with MLik, WAIC and CPO attached.

    ``mean_correction`` shifts each Gaussian approximation by the first-order
    skewness correction of the Poisson likelihood. Returns the fit and the
    list of hyperparameter search results.
    """
    fit, modes = lgm.fit_lgm(model, theta0, strategy, restarts, mean_correction=mean_correction)
    if diagnostics:
        fit = lgm.predictive_diagnostics(fit, model, n_samples, seed)
    return fit, modes


def predictor_draws(fit: lgm.LgmFit, model: lgm.LatentGaussianModel, n: int = 1000, seed=0) -> np.ndarray:
    """Draws of ``log lambda`` (no offset) for every cell, shape (n, T*S)."""
    x = lgm.sample_latent(fit, n, seed)
    return x @ model.predictor_design.T


def _cell_frame(model) -> pd.DataFrame:
    T, S = model.meta["T"], model.meta["S"]
    ids = model.meta["area_ids"]
    return pd.DataFrame({"area_id": np.tile(np.asarray(ids, dtype=object), T),
                         "time_index": np.repeat(np.arange(1, T + 1), S)})


def risk_summary_from_draws(eta: np.ndarray) -> dict[str, np.ndarray]:
    lam = np.exp(eta)
    sd = lam.std(axis=0, ddof=1) if lam.shape[0] > 1 else np.zeros(lam.shape[1])
    return {"mean": lam.mean(axis=0), "sd": sd,
            "q025": np.quantile(lam, 0.025, axis=0), "q975": np.quantile(lam, 0.975, axis=0)}


def exceedance_from_draws(eta: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """P(lambda > threshold) per cell, from shared draws of ``log lambda``."""
    return np.mean(eta > np.log(threshold), axis=0)


def risk_estimates(fit, model, n_samples: int = 1000, seed=0, threshold: float | None = None) -> pd.DataFrame:
    eta = predictor_draws(fit, model, n_samples, seed)
    df = _cell_frame(model)
    for k, v in risk_summary_from_draws(eta).items():
        df[k] = v
    if threshold is not None:
        df["prob_exceed"] = exceedance_from_draws(eta, threshold)
    return df


def exceedance(fit, model, threshold: float = 1.0, n_samples: int = 1000, seed=0) -> pd.DataFrame:
    eta = predictor_draws(fit, model, n_samples, seed)
    df = _cell_frame(model)
    df["prob_exceed"] = exceedance_from_draws(eta, threshold)
    return df


def fixed_quantities(fit, model) -> list[QuantitySummary]:
    names = model.meta["fixed_names"]
    return latent_quantities(fit, names, range(len(names)))


def cell_quantities(fit, model) -> list[QuantitySummary]:
    """Relative risk of every cell as a log-normal mixture."""
    w, means, sds = fit.linear_combination(model.predictor_design)
    cells = _cell_frame(model)
    names = [f"lambda[{a},{t}]" for a, t in zip(cells.area_id, cells.time_index)]
    return [QuantitySummary(n, w, means[:, k], sds[:, k], "exp") for k, n in enumerate(names)]


def fit_summary(fit, model) -> pd.DataFrame:
    return summary_table(fixed_quantities(fit, model) + hyper_quantities(fit))


def component_draws(fit, model, n: int = 1000, seed=0) -> dict[str, np.ndarray]:
    """Per-draw, per-cell contributions of each predictor component, shape (n, T*S).

    Fixed effects contribute ``gamma_k x_k`` for every non-intercept term;
    random effects contribute their value at the cell.
    """
    x = lgm.sample_latent(fit, n, seed)
    X = model.predictor_design
    out: dict[str, np.ndarray] = {}
    for k, name in enumerate(model.meta["fixed_names"]):
        if k:
            out[name] = x[:, k:k + 1] * X[:, k]
    for b in model.blocks[1:]:
        s = model.block_slices[b.name]
        out[b.name] = x[:, s] @ X[:, s].T
    return out
