"""Stage-1 climate field: Matérn in space, AR1 in time, with optional data fusion.

The latent field is ``x(s, t) = beta0 + z(s, t)^T beta + xi(s, t)`` with
``xi_t = phi1 xi_{t-1} + omega_t``, ``omega_t`` a Matérn (nu = 1) field, and
``xi_1`` stationary.  Stations observe ``x`` with iid noise; a gridded source
observes ``alpha0 + alpha1 x`` with its own noise, where ``alpha0`` is a
second AR1-Matérn field on the same nodes.  Fits are conditional on
``alpha1`` and combined over a grid of ``alpha1`` values by model averaging.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import Delaunay, cKDTree
from scipy.spatial.distance import cdist
from scipy.special import k1, logsumexp

from . import lgm
from . import priors as pr
from .formula import CLIMATE_PRESETS, Formula, resolve
from .parallel import as_seed_sequence, ordered_map

DENSE_LIMIT = 4000
DEFAULT_ALPHA1_GRID = tuple(round(0.6 + 0.1 * i, 10) for i in range(9))


class Stage1Error(ValueError):
    pass


# -- Matérn covariance --------------------------------------------------------

def kappa_from_range(range_km: float) -> float:
    """``kappa = sqrt(8 nu) / range`` with ``nu = 1``."""
    if not range_km > 0:
        raise ValueError("range must be positive")
    return math.sqrt(8.0) / range_km


def range_from_kappa(kappa: float) -> float:
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    return math.sqrt(8.0) / kappa


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    range: float
    nu: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not self.range > 0:
            raise ValueError("range must be positive")
        if self.nu != 1.0:
            raise ValueError("only nu = 1 is supported")

    @property
    def kappa(self) -> float:
        return kappa_from_range(self.range)

    @classmethod
    def from_kappa(cls, sigma2: float, kappa: float) -> "MaternParams":
        return cls(sigma2, range_from_kappa(kappa))


def matern_cov(d, p: MaternParams):
    """``sigma2 (kappa d) K_1(kappa d)``, equal to ``sigma2`` at ``d = 0``."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    x = p.kappa * d
    with np.errstate(invalid="ignore", over="ignore"):
        out = p.sigma2 * x * k1(x)
    out = np.where(x == 0, p.sigma2, out)
    # K_1 underflows to 0 (x K_1 -> nan) far beyond the range
    out = np.where(np.isnan(out), 0.0, out)
    return out if out.ndim else float(out)


def matern_matrix(coords: np.ndarray, p: MaternParams, targets: np.ndarray | None = None) -> np.ndarray:
    coords = np.atleast_2d(np.asarray(coords, float))
    other = coords if targets is None else np.atleast_2d(np.asarray(targets, float))
    return matern_cov(cdist(other, coords), p)


# -- AR1 in time ----------------------------------------------------------------

def ar1_stationary_covariance(T: int, phi: float) -> np.ndarray:
    """``phi^|t-u| / (1 - phi^2)``: AR1 with unit innovation variance started stationary."""
    if not abs(phi) < 1:
        raise ValueError("|phi| must be < 1")
    t = np.arange(T)
    return phi ** np.abs(t[:, None] - t[None, :]) / (1.0 - phi * phi)


def ar1_innovation_precision(T: int, phi: float) -> np.ndarray:
    """Inverse of :func:`ar1_stationary_covariance`."""
    if not abs(phi) < 1:
        raise ValueError("|phi| must be < 1")
    Q = np.zeros((T, T))
    idx = np.arange(T)
    Q[idx, idx] = 1.0 + phi * phi
    Q[0, 0] = Q[-1, -1] = 1.0
    if T == 1:
        Q[0, 0] = 1.0 - phi * phi
    Q[idx[:-1], idx[1:]] = Q[idx[1:], idx[:-1]] = -phi
    return Q


@dataclass(frozen=True)
class StFieldSpec:
    nodes: np.ndarray
    T: int
    matern: MaternParams
    ar: float
    design: np.ndarray | None = None

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, float))
        object.__setattr__(self, "nodes", nodes)
        if nodes.shape[0] == 0 or nodes.shape[1] != 2:
            raise ValueError("nodes must be a nonempty (n, 2) array")
        if not abs(self.ar) < 1:
            raise ValueError("|phi| must be < 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.design is not None and np.asarray(self.design).shape[0] != nodes.shape[0] * self.T:
            raise ValueError("design rows must equal nodes x T")


def st_joint_covariance(spec: StFieldSpec, dense_limit: int = DENSE_LIMIT) -> np.ndarray:
    """Dense covariance of ``xi`` over nodes x times (node index fastest)."""
    n = spec.nodes.shape[0] * spec.T
    if n > dense_limit:
        raise Stage1Error(f"{n} field values exceed the dense limit {dense_limit}; use grid_spde_precision")
    return np.kron(ar1_stationary_covariance(spec.T, spec.ar), matern_matrix(spec.nodes, spec.matern))


# -- lattice SPDE -----------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    nx: int
    ny: int
    h: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("lattice must be at least 3 x 3")
        if not self.h > 0:
            raise ValueError("lattice spacing must be positive")

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def nodes(self) -> np.ndarray:
        x = self.origin[0] + self.h * np.arange(self.nx)
        y = self.origin[1] + self.h * np.arange(self.ny)
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def index(self, ix, iy):
        return np.asarray(iy) * self.nx + np.asarray(ix)

    @property
    def centre(self) -> int:
        return int(self.index(self.nx // 2, self.ny // 2))


def _neumann_laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], shape=(n, n), format="csr") / (h * h)


def spde_operator(lattice: Lattice, kappa: float) -> sp.csr_matrix:
    """``kappa^2 I - Delta_h`` with the 5-point stencil and reflecting boundary."""
    Lx = _neumann_laplacian_1d(lattice.nx, lattice.h)
    Ly = _neumann_laplacian_1d(lattice.ny, lattice.h)
    lap = sp.kron(sp.identity(lattice.ny), Lx) + sp.kron(Ly, sp.identity(lattice.nx))
    return (kappa * kappa * sp.identity(lattice.n) - lap).tocsr()


def grid_spde_precision(lattice: Lattice, p: MaternParams) -> sp.csr_matrix:
    """Precision ``c (kappa^2 I - Delta_h)^2`` with ``c`` set so the centre node has variance ``sigma2``."""
    K = spde_operator(lattice, p.kappa)
    Q0 = (K @ K).tocsr()
    e = np.zeros(lattice.n)
    e[lattice.centre] = 1.0
    v0 = float(spla.spsolve(Q0.tocsc(), e)[lattice.centre])
    return (Q0 * (v0 / p.sigma2)).tocsr()


# -- projection -----------------------------------------------------------------

@dataclass(frozen=True)
class ProjectionMatrix:
    matrix: sp.csr_matrix
    fallback: tuple[int, ...] = ()

    @property
    def shape(self):
        return self.matrix.shape


def _bilinear(lattice: Lattice, targets: np.ndarray, allow_fallback: bool) -> ProjectionMatrix:
    u = (targets[:, 0] - lattice.origin[0]) / lattice.h
    v = (targets[:, 1] - lattice.origin[1]) / lattice.h
    tol = 1e-9
    outside = (u < -tol) | (u > lattice.nx - 1 + tol) | (v < -tol) | (v > lattice.ny - 1 + tol)
    if np.any(outside) and not allow_fallback:
        raise Stage1Error(f"{int(outside.sum())} targets outside the lattice")
    u = np.clip(u, 0.0, lattice.nx - 1)
    v = np.clip(v, 0.0, lattice.ny - 1)
    i0 = np.minimum(np.floor(u).astype(int), lattice.nx - 2)
    j0 = np.minimum(np.floor(v).astype(int), lattice.ny - 2)
    fu, fv = u - i0, v - j0
    rows, cols, vals = [], [], []
    r = np.arange(targets.shape[0])
    for di, dj, w in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        keep = w > 0
        rows.append(r[keep])
        cols.append(lattice.index(i0[keep] + di, j0[keep] + dj))
        vals.append(w[keep])
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(targets.shape[0], lattice.n))
    return ProjectionMatrix(M, tuple(int(i) for i in np.flatnonzero(outside)))


def projection(nodes: np.ndarray | Lattice, targets, allow_fallback: bool = True) -> ProjectionMatrix:
    """Interpolation weights from field nodes to target locations.

    Lattices use bilinear weights; scattered nodes use the nearest node.
    Targets outside the lattice (or outside the convex hull of scattered
    nodes) are snapped to the nearest node and reported in ``fallback``.
    """
    targets = np.atleast_2d(np.asarray(targets, float))
    if targets.size == 0:
        raise Stage1Error("no targets to project to")
    if isinstance(nodes, Lattice):
        return _bilinear(nodes, targets, allow_fallback)
    nodes = np.atleast_2d(np.asarray(nodes, float))
    _, idx = cKDTree(nodes).query(targets)
    M = sp.csr_matrix((np.ones(targets.shape[0]), (np.arange(targets.shape[0]), idx)),
                      shape=(targets.shape[0], nodes.shape[0]))
    flagged: tuple[int, ...] = ()
    if nodes.shape[0] >= 3:
        try:
            inside = Delaunay(nodes).find_simplex(targets) >= 0
            flagged = tuple(int(i) for i in np.flatnonzero(~inside))
        except Exception:  # collinear nodes have no triangulation
            flagged = ()
    if flagged and not allow_fallback:
        raise Stage1Error(f"{len(flagged)} targets outside the node hull")
    return ProjectionMatrix(M, flagged)


# -- latent block -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SeparableField:
    """AR1-in-time, Matérn-in-space field over ``nodes x T`` values."""

    name: str
    nodes: np.ndarray
    T: int
    sigma: str
    range: str
    phi: str
    lattice: Lattice | None = None
    jitter: float = 1e-8

    @property
    def size(self) -> int:
        return self.nodes.shape[0] * self.T

    @property
    def constraints(self) -> np.ndarray:
        return np.zeros((0, self.size))

    @property
    def null_dim(self) -> int:
        return 0

    def matern(self, params) -> MaternParams:
        return MaternParams(params[self.sigma] ** 2, params[self.range])

    def spatial_precision(self, params) -> np.ndarray:
        p = self.matern(params)
        if self.lattice is not None:
            return grid_spde_precision(self.lattice, p).toarray()
        C = matern_matrix(self.nodes, p) + self.jitter * p.sigma2 * np.eye(self.nodes.shape[0])
        L = np.linalg.cholesky(C)
        Linv = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True)
        return Linv.T @ Linv

    def precision(self, params) -> np.ndarray:
        phi = params[self.phi]
        if not abs(phi) < 1:
            raise lgm.LaplaceError("AR coefficient outside (-1, 1)")
        return np.kron(ar1_innovation_precision(self.T, phi), self.spatial_precision(params))


# -- assembly ---------------------------------------------------------------------

STATION_COLUMNS = ("station_id", "lon_km", "lat_km", "time_index", "value")
GRIDDED_COLUMNS = ("cell_id", "lon_km", "lat_km", "time_index", "value")


@dataclass(frozen=True)
class Stage1Spec:
    family: str = "stations"
    formula: str = ""
    alpha1_grid: tuple[float, ...] = DEFAULT_ALPHA1_GRID
    lattice: Lattice | None = None
    sigma0: float | None = None
    range0: float | None = None
    fixed_precision: float = 1e-3
    ar_prior_precision: float = 0.15
    noise_u: float = 1.0
    noise_alpha: float = 0.5
    fixed: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("stations", "fusion"):
            raise ValueError(f"unknown stage-1 family {self.family!r}")
        if not self.alpha1_grid:
            raise ValueError("alpha1 grid must be nonempty")

    @property
    def parsed_formula(self) -> Formula:
        return resolve(self.formula, CLIMATE_PRESETS)


def _check_times(df: pd.DataFrame, what: str) -> int:
    t = np.asarray(df["time_index"])
    if t.size == 0:
        raise Stage1Error(f"{what} has no rows")
    if np.any(t != np.round(t)) or t.min() < 1:
        raise Stage1Error(f"{what} time_index must be integers starting at 1")
    present = np.unique(t.astype(int))
    T = int(present.max())
    if present.size != T:
        missing = sorted(set(range(1, T + 1)) - set(present.tolist()))
        raise Stage1Error(f"{what} time index has gaps: missing {missing}")
    return T


def _unique_coords(*frames) -> np.ndarray:
    pts = np.vstack([f[["lon_km", "lat_km"]].to_numpy(float) for f in frames if f is not None])
    return np.unique(pts, axis=0)


def _node_rows(nodes_or_lattice, coords) -> sp.csr_matrix:
    if isinstance(nodes_or_lattice, Lattice):
        return projection(nodes_or_lattice, coords).matrix
    nodes = nodes_or_lattice
    tree = cKDTree(nodes)
    dist, idx = tree.query(coords)
    if np.any(dist > 1e-9):
        raise Stage1Error("observation location missing from the node set")
    return sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), nodes.shape[0]))


def _field_columns(B: sp.csr_matrix, t: np.ndarray, n_nodes: int, T: int) -> np.ndarray:
    out = np.zeros((B.shape[0], n_nodes * T))
    Bd = B.toarray()
    for k in range(T):
        sel = t == k + 1
        out[sel, k * n_nodes:(k + 1) * n_nodes] = Bd[sel]
    return out


def default_priors(spec: Stage1Spec, stations: pd.DataFrame, nodes: np.ndarray):
    sigma0 = spec.sigma0 if spec.sigma0 is not None else float(np.std(stations["value"], ddof=1))
    if not sigma0 > 0:
        sigma0 = 1.0
    if spec.range0 is not None:
        range0 = spec.range0
    else:
        d = cdist(nodes, nodes).max() if nodes.shape[0] > 1 else 1.0
        range0 = d / 3.0 if d > 0 else 1.0
    return sigma0, range0


def assemble_stage1(spec: Stage1Spec, stations: pd.DataFrame, gridded: pd.DataFrame | None = None,
                    alpha1: float = 1.0) -> lgm.LatentGaussianModel:
    """Latent Gaussian model for the stations-only or (conditional on ``alpha1``) fusion model."""
    for c in STATION_COLUMNS[1:]:
        if c not in stations:
            raise Stage1Error(f"stations table lacks column {c!r}")
    fusion = spec.family == "fusion"
    if fusion:
        if gridded is None:
            raise Stage1Error("fusion model needs a gridded source")
        for c in GRIDDED_COLUMNS[1:]:
            if c not in gridded:
                raise Stage1Error(f"gridded table lacks column {c!r}")
    T = _check_times(stations, "stations")
    if fusion:
        Tg = _check_times(gridded, "gridded source")
        if Tg != T:
            raise Stage1Error(f"stations cover {T} times but the gridded source covers {Tg}")
    f = spec.parsed_formula
    f.check(stations.columns)
    Z1 = f.design({c: stations[c].to_numpy() for c in f.columns}, len(stations))
    if fusion:
        f.check(gridded.columns)
        Z2 = f.design({c: gridded[c].to_numpy() for c in f.columns}, len(gridded))
    nodes_src = spec.lattice if spec.lattice is not None else _unique_coords(stations, gridded if fusion else None)
    nodes = spec.lattice.nodes if spec.lattice is not None else nodes_src
    n_nodes = nodes.shape[0]
    if n_nodes * T * (2 if fusion else 1) > DENSE_LIMIT:
        raise Stage1Error("latent field exceeds the dense limit; use a coarser lattice")
    p = Z1.shape[1]
    fixed = lgm.FixedEffects(("beta0", *f.labels), (0.0,) + (spec.fixed_precision,) * p)
    xi = SeparableField("xi", nodes, T, "sigma1", "range1", "phi1", spec.lattice)
    blocks = [fixed, xi]
    t1 = stations["time_index"].to_numpy().astype(int)
    B1 = _node_rows(nodes_src, stations[["lon_km", "lat_km"]].to_numpy(float))
    X1 = np.hstack([np.ones((len(stations), 1)), Z1, _field_columns(B1, t1, n_nodes, T)])
    rows, y, group = [X1], [stations["value"].to_numpy(float)], [np.zeros(len(stations), int)]
    sigma0, range0 = default_priors(spec, stations, nodes)
    hyp = [
        lgm.Hyper("sigma1", "log", pr.PCStdDev(sigma0, 0.5), sigma0),
        lgm.Hyper("range1", "log", pr.PCMaternRange(range0, 0.5), range0),
        lgm.Hyper("phi1", "fisher", pr.Normal(0.0, spec.ar_prior_precision), 0.5),
        lgm.Hyper("tau_e1", "log", pr.PCPrecision(spec.noise_u, spec.noise_alpha), 4.0 / sigma0 ** 2),
    ]
    noise = ("tau_e1",)
    if fusion:
        a0 = SeparableField("alpha0", nodes, T, "sigma2", "range2", "phi2", spec.lattice)
        blocks.append(a0)
        X1 = np.hstack([X1, np.zeros((X1.shape[0], a0.size))])
        rows[0] = X1
        t2 = gridded["time_index"].to_numpy().astype(int)
        B2 = _node_rows(nodes_src, gridded[["lon_km", "lat_km"]].to_numpy(float))
        F2 = _field_columns(B2, t2, n_nodes, T)
        X2 = np.hstack([alpha1 * np.ones((len(gridded), 1)), alpha1 * Z2, alpha1 * F2, F2])
        rows.append(X2)
        y.append(gridded["value"].to_numpy(float))
        group.append(np.ones(len(gridded), int))
        hyp += [
            lgm.Hyper("sigma2", "log", pr.PCStdDev(sigma0, 0.5), 0.5 * sigma0),
            lgm.Hyper("range2", "log", pr.PCMaternRange(range0, 0.5), range0),
            lgm.Hyper("phi2", "fisher", pr.Normal(0.0, spec.ar_prior_precision), 0.5),
            lgm.Hyper("tau_e2", "log", pr.PCPrecision(spec.noise_u, spec.noise_alpha), 4.0 / sigma0 ** 2),
        ]
        noise = ("tau_e1", "tau_e2")
    fixed_params = dict(spec.fixed)
    hyp = [h for h in hyp if h.name not in fixed_params]
    latent_names = list(fixed.names)
    for b in blocks[1:]:
        latent_names += [f"{b.name}[{i},{t + 1}]" for t in range(T) for i in range(n_nodes)]
    meta = dict(stage="climate", family=spec.family, alpha1=float(alpha1), T=T, n_nodes=n_nodes,
                formula=str(f), latent_names=tuple(latent_names), range_convention="range = sqrt(8 nu) / kappa")
    y_all = np.concatenate(y)
    return lgm.LatentGaussianModel(tuple(blocks), np.vstack(rows), y_all, lgm.GAUSSIAN,
                                   noise_group=np.concatenate(group), noise=noise, hypers=tuple(hyp),
                                   fixed_params=fixed_params, meta=meta)


# -- fitting and prediction --------------------------------------------------------------

def bma_weights(log_mlik: Sequence[float], log_prior: Sequence[float] | None = None) -> np.ndarray:
    """Normalized ``exp(log_mlik + log_prior)`` computed with log-sum-exp."""
    a = np.asarray(log_mlik, dtype=float)
    if a.size == 0:
        raise ValueError("need at least one model")
    if log_prior is not None:
        a = a + np.asarray(log_prior, dtype=float)
    # shift by the max first so adding a constant leaves the result bit-identical
    a = a - np.max(a)
    w = np.exp(a - logsumexp(a))
    return w / w.sum()


@dataclass(frozen=True, eq=False)
class Stage1Component:
    alpha1: float
    model: lgm.LatentGaussianModel
    fit: lgm.LgmFit
    weight: float


@dataclass(frozen=True, eq=False)
class Stage1Fit:
    spec: Stage1Spec
    components: tuple[Stage1Component, ...]
    nodes: np.ndarray
    T: int
    formula: Formula
    dropped: tuple[float, ...] = ()

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def alpha1(self) -> np.ndarray:
        return np.array([c.alpha1 for c in self.components])


def _fit_one(args):
    spec, stations, gridded, a, strategy = args
    model = assemble_stage1(spec, stations, gridded, a)
    fit, _ = lgm.fit_lgm(model, strategy=strategy, restarts=1)
    return a, model, fit


def fit_stage1(spec: Stage1Spec, stations: pd.DataFrame, gridded: pd.DataFrame | None = None,
               strategy: str = "mode", jobs: int = 1) -> Stage1Fit:
    """Fit the stations-only model, or the fusion model once per alpha1 value with BMA weights."""
    grid = spec.alpha1_grid if spec.family == "fusion" else (1.0,)
    tasks = [(spec, stations, gridded, float(a), strategy) for a in grid]
    results, dropped = [], []
    for task, res in zip(tasks, ordered_map(_fit_one, tasks, jobs, catch=(lgm.LaplaceError, np.linalg.LinAlgError))):
        if isinstance(res, Exception):
            warnings.warn(f"conditional fit at alpha1={task[3]} failed: {res}", RuntimeWarning, stacklevel=2)
            dropped.append(task[3])
        else:
            results.append(res)
    if not results:
        raise Stage1Error("all conditional stage-1 fits failed")
    w = bma_weights([r[2].log_mlik for r in results]) if len(results) > 1 else np.ones(1)
    comps = tuple(Stage1Component(a, m, f, float(wi)) for (a, m, f), wi in zip(results, w))
    m0 = comps[0].model
    xi = m0.blocks[1]
    return Stage1Fit(spec, comps, xi.nodes, xi.T, spec.parsed_formula, tuple(dropped))


def target_map(component: Stage1Component, targets: np.ndarray) -> np.ndarray:
    """Linear map from field nodes to targets.

    Lattices use bilinear interpolation.  Scattered (dense-mode) nodes use
    simple-kriging weights at the fitted hyperparameter mode, the exact
    conditional mean under the separable covariance.
    """
    xi: SeparableField = component.model.blocks[1]
    targets = np.atleast_2d(np.asarray(targets, float))
    if xi.lattice is not None:
        return projection(xi.lattice, targets).matrix.toarray()
    params = component.model.params(component.fit.theta_mode)
    p = xi.matern(params)
    C = matern_matrix(xi.nodes, p) + xi.jitter * p.sigma2 * np.eye(xi.nodes.shape[0])
    c_star = matern_matrix(xi.nodes, p, targets)
    return sla.solve(C, c_star.T, assume_a="pos").T


def _target_design(fit: Stage1Fit, comp: Stage1Component, targets, covariates) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-effect design (T, n, 1 + p) and node map (n, nodes) for the targets."""
    n = targets.shape[0]
    f = fit.formula
    f.check(covariates)
    if f.terms:
        cols = {c: np.broadcast_to(np.asarray(covariates[c], float), (fit.T, n)).ravel() for c in f.columns}
        Z = f.design(cols).reshape(fit.T, n, -1)
    else:
        Z = np.zeros((fit.T, n, 0))
    X = np.concatenate([np.ones((fit.T, n, 1)), Z], axis=2)
    return X, target_map(comp, targets)


def _predict_from_latent(fit: Stage1Fit, x: np.ndarray, X: np.ndarray, Bt: np.ndarray) -> np.ndarray:
    n_fixed = X.shape[2]
    beta = x[:n_fixed]
    n_nodes = fit.nodes.shape[0]
    xi = x[n_fixed:n_fixed + n_nodes * fit.T].reshape(fit.T, n_nodes)
    return X @ beta + xi @ Bt.T


def predict_components(fit: Stage1Fit, targets, covariates: Mapping[str, np.ndarray] | None = None,
                       mode: str = "mean", seed=None) -> list[np.ndarray]:
    """Per-component predictions ``x(s*, t)`` as arrays of shape (T, n_targets).

    ``mode="mean"`` uses posterior means; ``mode="sample"`` one joint
    posterior draw per component (seeded per component).
    """
    targets = np.atleast_2d(np.asarray(targets, float))
    covariates = {} if covariates is None else covariates
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    if mode == "sample" and seed is None:
        raise ValueError("sample mode needs a seed")
    seeds = as_seed_sequence(seed).spawn(len(fit.components)) if mode == "sample" else [None] * len(fit.components)
    out = []
    for comp, ss in zip(fit.components, seeds):
        X, Bt = _target_design(fit, comp, targets, covariates)
        x = comp.fit.latent_mean() if mode == "mean" else lgm.sample_latent(comp.fit, 1, ss)[0]
        out.append(_predict_from_latent(fit, x, X, Bt))
    return out


def predict_points(fit: Stage1Fit, targets, covariates=None, mode: str = "mean", seed=None) -> np.ndarray:
    """Model-averaged predictions, shape (T, n_targets)."""
    parts = predict_components(fit, targets, covariates, mode, seed)
    w = fit.weights
    out = parts[0].copy()
    for wl, p in zip(w[1:], parts[1:]):
        out += wl * (p - parts[0])
    return out
