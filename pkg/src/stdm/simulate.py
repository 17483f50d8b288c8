"""Synthetic data generators for both stages."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from . import gmrf
from .climate import MaternParams, ar1_stationary_covariance, matern_matrix
from .graph import AdjacencyGraph, scaled_icar_from_graph
from .health import CasePanel, HealthSpec, fixed_effect_design

ETA_CLIP = 20.0


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    params: dict
    fields: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"params": self.params, "fields": {k: np.asarray(v).tolist() for k, v in self.fields.items()}}


# -- stage 1 -----------------------------------------------------------------------

@dataclass(frozen=True)
class ClimateTruth:
    beta0: float = 0.0
    sigma1: float = 1.0
    range1: float = 60.0
    phi1: float = 0.5
    sigma_e1: float = 0.2
    alpha1: float = 1.0
    sigma2: float = 0.5
    range2: float = 80.0
    phi2: float = 0.5
    sigma_e2: float = 0.3


def _separable_draw(rng, coords, T, sigma, range_, phi):
    Cs = matern_matrix(coords, MaternParams(sigma ** 2, range_)) + 1e-10 * sigma ** 2 * np.eye(len(coords))
    Ls = np.linalg.cholesky(Cs)
    Lt = np.linalg.cholesky(ar1_stationary_covariance(T, phi))
    E = rng.standard_normal((len(coords), T))
    return (Ls @ E @ Lt.T).T  # (T, n)


def simulate_stage1(truth: ClimateTruth, stations, grid_cells, T: int, seed, targets=None):
    """Draw the latent climate and both observation sources.

    Returns ``(stations_df, gridded_df, SyntheticTruth)``; the truth holds
    the noise-free climate ``x`` at stations, cells and the optional targets.
    """
    rng = np.random.default_rng(seed)
    stations = np.atleast_2d(np.asarray(stations, float))
    cells = np.zeros((0, 2)) if grid_cells is None else np.atleast_2d(np.asarray(grid_cells, float))
    tg = np.zeros((0, 2)) if targets is None else np.atleast_2d(np.asarray(targets, float))
    pts = np.vstack([stations, cells, tg])
    ns, nc = len(stations), len(cells)
    xi = _separable_draw(rng, pts, T, truth.sigma1, truth.range1, truth.phi1)
    x = truth.beta0 + xi
    a0 = _separable_draw(rng, pts[ns:ns + nc], T, truth.sigma2, truth.range2, truth.phi2) if nc else np.zeros((T, 0))
    e1 = rng.standard_normal((T, ns)) * truth.sigma_e1
    e2 = rng.standard_normal((T, nc)) * truth.sigma_e2
    w1 = x[:, :ns] + e1
    w2 = a0 + truth.alpha1 * x[:, ns:ns + nc] + e2
    st = pd.DataFrame({"station_id": np.tile(np.arange(ns), T), "lon_km": np.tile(stations[:, 0], T),
                       "lat_km": np.tile(stations[:, 1], T), "time_index": np.repeat(np.arange(1, T + 1), ns),
                       "value": w1.ravel()})
    gd = pd.DataFrame({"cell_id": np.tile(np.arange(nc), T), "lon_km": np.tile(cells[:, 0], T),
                       "lat_km": np.tile(cells[:, 1], T), "time_index": np.repeat(np.arange(1, T + 1), nc),
                       "value": w2.ravel()})
    fields = {"x_stations": x[:, :ns], "x_cells": x[:, ns:ns + nc], "x_targets": x[:, ns + nc:], "alpha0": a0}
    return st, gd, SyntheticTruth(asdict(truth), fields)


# -- stage 2 -----------------------------------------------------------------------

@dataclass(frozen=True)
class HealthTruth:
    gamma: Mapping[str, float] = field(default_factory=lambda: {"intercept": 0.0})
    tau_psi: float = 4.0
    phi: float = 0.5
    tau_nu: float = 50.0
    tau_zeta: float = 50.0
    tau_upsilon: float = 10.0
    rho_upsilon: float = 0.7


def _rw2_draw(rng, T, tau):
    # the linear trend is improper: draw with both the level and the slope pinned to zero
    rw = gmrf.rw2_structure(T)
    A = np.vstack([np.ones(T), np.arange(T) - (T - 1) / 2.0])
    spec = gmrf.PrecisionSpec(rw.Q * tau, 2, A)
    return gmrf.sample_gmrf(spec, rng)


def simulate_health(truth: HealthTruth, spec: HealthSpec, graph: AdjacencyGraph, expected: np.ndarray,
                    seed, covariates: Mapping[str, np.ndarray] | None = None, area_ids=None):
    """Draw the random effects, form the predictor and Poisson counts.

    ``expected`` is the (T, S) array of expected counts used as the offset.
    Returns ``(CasePanel, SyntheticTruth)``; the panel's populations equal
    ``expected`` so internal standardization recovers the same ratios up to
    a per-time rescaling.
    """
    rng = np.random.default_rng(seed)
    E = np.asarray(expected, float)
    T, S = E.shape
    covariates = {} if covariates is None else covariates
    names, Xf = fixed_effect_design(spec, graph, covariates, T, S)
    gamma = np.array([truth.gamma.get(n, 0.0) for n in names])
    eta = Xf @ gamma
    fields: dict[str, np.ndarray] = {}
    icar = scaled_icar_from_graph(graph)
    if spec.bym2:
        u = gmrf.sample_gmrf(gmrf.PrecisionSpec(icar.structure, icar.rank_deficiency, icar.constraints), rng)
        v = rng.standard_normal(S)
        psi = (np.sqrt(1 - truth.phi) * v + np.sqrt(truth.phi) * u) / np.sqrt(truth.tau_psi)
        fields["psi"] = psi
        eta = eta + np.tile(psi, T)
    if spec.rw2:
        nu = _rw2_draw(rng, T, truth.tau_nu)
        fields["nu"] = nu
        eta = eta + np.repeat(nu, S)
    if spec.iid_time:
        zeta = rng.standard_normal(T) / np.sqrt(truth.tau_zeta)
        fields["zeta"] = zeta
        eta = eta + np.repeat(zeta, S)
    if spec.interaction is not None:
        rho = truth.rho_upsilon if spec.interaction in ("II", "IV") else None
        inter = gmrf.interaction_structure(spec.interaction, S, T, icar, rho)
        q = inter.Q
        ups = gmrf.sample_gmrf(gmrf.PrecisionSpec(q.Q * truth.tau_upsilon, q.rank_deficiency, q.constraints), rng)
        fields["upsilon"] = ups
        eta = eta + ups
    if np.any(np.abs(eta) > ETA_CLIP):
        warnings.warn(f"linear predictor clipped at +-{ETA_CLIP}", RuntimeWarning, stacklevel=2)
        eta = np.clip(eta, -ETA_CLIP, ETA_CLIP)
    y = rng.poisson(E.ravel() * np.exp(eta)).reshape(T, S)
    fields["eta"] = eta
    ids = tuple(area_ids) if area_ids is not None else tuple(str(i) for i in range(S))
    params = {"gamma": dict(truth.gamma), **{k: v for k, v in asdict(truth).items() if k != "gamma"},
              "interaction": spec.interaction}
    return CasePanel(ids, y.astype(float), E.copy()), SyntheticTruth(params, fields)


def lattice_graph(nrow: int, ncol: int, singletons: int = 0) -> AdjacencyGraph:
    """Rook-adjacency grid of ``nrow x ncol`` areas plus isolated areas appended at the end."""
    edges = []
    for r in range(nrow):
        for c in range(ncol):
            i = r * ncol + c
            if c + 1 < ncol:
                edges.append((i, i + 1))
            if r + 1 < nrow:
                edges.append((i, i + ncol))
    return AdjacencyGraph.from_edges(nrow * ncol + singletons, edges)


# -- end-to-end synthetic study ------------------------------------------------------

@dataclass(frozen=True)
class StudyDesign:
    """Geometry of a synthetic two-stage study.

    Areas form an ``nrow x ncol`` rook grid of ``block_km`` squares plus
    isolated squares placed beyond the grid; each area holds
    ``points_per_side^2`` prediction points.
    """

    nrow: int = 3
    ncol: int = 3
    singletons: int = 1
    block_km: float = 40.0
    points_per_side: int = 3
    n_stations: int = 15
    cells_per_side: int = 4
    T: int = 6
    expected: float = 40.0


@dataclass(frozen=True, eq=False)
class SyntheticStudy:
    graph: AdjacencyGraph
    stations: pd.DataFrame
    gridded: pd.DataFrame
    grid: pd.DataFrame
    cases: pd.DataFrame
    expected: np.ndarray
    true_block_climate: np.ndarray
    climate_truth: SyntheticTruth
    health_truth: SyntheticTruth


def _area_origins(d: StudyDesign) -> np.ndarray:
    out = [(c * d.block_km, r * d.block_km) for r in range(d.nrow) for c in range(d.ncol)]
    for k in range(d.singletons):
        out.append(((d.ncol + 1 + k) * d.block_km, (d.nrow + 1) * d.block_km))
    return np.array(out, dtype=float)


def synthetic_study(seed, design: StudyDesign = StudyDesign(), climate_truth: ClimateTruth = ClimateTruth(),
                    health_truth: HealthTruth | None = None, health_spec: HealthSpec | None = None,
                    climate_name: str = "temperature") -> SyntheticStudy:
    """Simulate stations, gridded source, prediction grid and case counts.

    The health predictor uses the block average of the true climate at the
    prediction points under the covariate name ``climate_name``.
    """
    ss_geo, ss_clim, ss_health = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(ss_geo)
    d = design
    graph = lattice_graph(d.nrow, d.ncol, d.singletons)
    origins = _area_origins(d)
    S = len(origins)
    offs = (np.arange(d.points_per_side) + 0.5) * d.block_km / d.points_per_side
    ox, oy = np.meshgrid(offs, offs)
    local = np.column_stack([ox.ravel(), oy.ravel()])
    pts = np.vstack([o + local for o in origins])
    block = np.repeat(np.arange(S), len(local))
    lo, hi = pts.min(axis=0) - 0.5 * d.block_km / d.points_per_side, pts.max(axis=0) + 0.5 * d.block_km / d.points_per_side
    stations = rng.uniform(lo, hi, size=(d.n_stations, 2))
    cx = np.linspace(lo[0], hi[0], d.cells_per_side + 2)[1:-1]
    cy = np.linspace(lo[1], hi[1], d.cells_per_side + 2)[1:-1]
    CX, CY = np.meshgrid(cx, cy)
    cells = np.column_stack([CX.ravel(), CY.ravel()])
    st, gd, ctruth = simulate_stage1(climate_truth, stations, cells, d.T, ss_clim, targets=pts)
    x_pts = ctruth.fields["x_targets"]
    xb = np.column_stack([x_pts[:, block == k].mean(axis=1) for k in range(S)])
    hspec = health_spec if health_spec is not None else HealthSpec(formula=climate_name, interaction="II")
    htruth = health_truth if health_truth is not None else HealthTruth(gamma={"intercept": 0.0, climate_name: 0.3})
    E = np.full((d.T, S), float(d.expected))
    panel, htr = simulate_health(htruth, hspec, graph, E, ss_health, {climate_name: xb},
                                 area_ids=[str(i) for i in range(S)])
    grid = pd.DataFrame({"point_id": np.arange(len(pts)), "lon_km": pts[:, 0], "lat_km": pts[:, 1],
                         "block_id": block.astype(str)})
    cases = pd.DataFrame({"area_id": np.tile(np.arange(S), d.T), "time_index": np.repeat(np.arange(1, d.T + 1), S),
                          "cases": panel.cases.ravel().astype(int), "population": E.ravel()})
    return SyntheticStudy(graph, st, gd, grid, cases, E, xb, ctruth, htr)


def study_panel(study: SyntheticStudy) -> CasePanel:
    """Case panel of a synthetic study in (T, S) layout."""
    S = study.graph.n_areas
    T = study.expected.shape[0]
    y = study.cases["cases"].to_numpy(float).reshape(T, S)
    return CasePanel(tuple(str(i) for i in range(S)), y, study.expected.copy())


def study_inputs(study: SyntheticStudy, stage1_fit, health_spec: HealthSpec, climate_name: str = "temperature",
                 expected=None, n_component_draws: int = 200):
    """Two-stage inputs for a synthetic study and a fitted stage-1 model.

    The expected counts default to the simulation offsets, which are known
    exactly here; pass an ``ExpectedTable`` to use another standardization.
    """
    from .bridge import BlockAssignment, ClimateSource, TwoStageInputs
    from .health import ExpectedTable

    panel = study_panel(study)
    if expected is None:
        expected = ExpectedTable(study.expected.copy(), np.ones(study.expected.shape[0]))
    assign = BlockAssignment.from_labels(study.grid["block_id"].to_numpy(str), panel.area_ids)
    xy = study.grid[["lon_km", "lat_km"]].to_numpy(float)
    src = {climate_name: ClimateSource(stage1_fit)}
    return TwoStageInputs(src, xy, assign, health_spec, panel, expected, study.graph,
                          n_component_draws=n_component_draws)
