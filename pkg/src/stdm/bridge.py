"""Linking the stages: block averages, plug-in and resampling pipelines, posterior mixtures."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import climate, health, lgm
from .parallel import as_seed_sequence, ordered_map
from .summary import QUANTILE_COLUMNS, QuantitySummary, hyper_quantities, mixture_cdf, mixture_quantiles


class TwoStageError(RuntimeError):
    pass


# -- block averaging ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlockAssignment:
    """Block membership of prediction points; ``block_of[k]`` indexes ``block_ids``."""

    block_of: np.ndarray
    block_ids: tuple[str, ...]

    def __post_init__(self):
        b = np.asarray(self.block_of, dtype=np.int64)
        object.__setattr__(self, "block_of", b)
        if b.size and (b.min() < 0 or b.max() >= len(self.block_ids)):
            raise ValueError("block index out of range")

    @classmethod
    def from_labels(cls, labels: Sequence, block_ids: Sequence | None = None) -> "BlockAssignment":
        labels = [str(v) for v in labels]
        ids = tuple(str(b) for b in block_ids) if block_ids is not None else tuple(sorted(set(labels)))
        pos = {b: k for k, b in enumerate(ids)}
        unknown = sorted(set(labels) - set(pos))
        if unknown:
            raise ValueError(f"points assigned to unknown blocks: {unknown}")
        return cls(np.array([pos[v] for v in labels], dtype=np.int64), ids)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.block_of, minlength=len(self.block_ids))

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.block_of == k)


def block_average(values: np.ndarray, assign: BlockAssignment) -> np.ndarray:
    """Mean of the member points of each block, shape (T, n_blocks).

    Member values are sorted before summation, so the result does not
    depend on point order.
    """
    values = np.atleast_2d(np.asarray(values, float))
    if values.shape[1] != assign.block_of.size:
        raise ValueError("values and assignment disagree on the number of points")
    counts = assign.counts
    empty = [assign.block_ids[k] for k in np.flatnonzero(counts == 0)]
    if empty:
        raise ValueError(f"blocks without prediction points: {empty}")
    out = np.empty((values.shape[0], len(assign.block_ids)))
    for k in range(len(assign.block_ids)):
        v = np.sort(values[:, assign.members(k)], axis=1)
        out[:, k] = v.sum(axis=1) / counts[k]
    return out


def weighted_block_average(per_model: Sequence[np.ndarray], w: Sequence[float], assign: BlockAssignment) -> np.ndarray:
    """Model-weighted block averages ``sum_l w_l block_average(x_l)``.

    No extra ``1/L`` factor: the weights already sum to one.  The sum is
    formed relative to the first table so identical tables reproduce its
    block average exactly.
    """
    w = np.asarray(w, dtype=float)
    if len(per_model) != w.size or w.size == 0:
        raise ValueError("one weight per table is required")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must sum to one")
    base = block_average(per_model[0], assign)
    out = base.copy()
    for wl, x in zip(w[1:], per_model[1:]):
        out += wl * block_average(np.asarray(x, float) - per_model[0], assign)
    return out


# -- posterior mixtures --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MixtureQuantity:
    name: str
    component_means: np.ndarray
    component_vars: np.ndarray
    mixture: QuantitySummary

    @property
    def J(self) -> int:
        return self.component_means.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.component_means))

    @property
    def within(self) -> float:
        return float(np.mean(self.component_vars))

    @property
    def between(self) -> float:
        return float(np.var(self.component_means))

    @property
    def var(self) -> float:
        return self.within + self.between

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    def quantiles(self, probs=(0.025, 0.05, 0.5, 0.95, 0.975)) -> np.ndarray:
        return self.mixture.quantiles(probs)


def mixture_summarize(components: Sequence[Sequence[QuantitySummary]]) -> list[MixtureQuantity]:
    """Equal-weight mixture over resamples of every summarized quantity."""
    if not components:
        raise ValueError("mixture needs at least one component")
    names = [q.name for q in components[0]]
    for c in components[1:]:
        if [q.name for q in c] != names:
            raise ValueError("components summarize different quantities")
    J = len(components)
    out = []
    for k, name in enumerate(names):
        qs = [c[k] for c in components]
        mom = [q.component_moments() for q in qs]
        means = np.array([float(np.dot(q.weights, m)) for q, (m, _) in zip(qs, mom)])
        var = np.array([float(np.dot(q.weights, v) + np.dot(q.weights, (m - mu) ** 2))
                        for q, (m, v), mu in zip(qs, mom, means)])
        transforms = {q.transform for q in qs}
        if len(transforms) != 1:
            raise ValueError(f"quantity {name!r} mixes transforms")
        mix = QuantitySummary(name, np.concatenate([np.asarray(q.weights) / J for q in qs]),
                              np.concatenate([q.locs for q in qs]), np.concatenate([q.scales for q in qs]),
                              transforms.pop())
        out.append(MixtureQuantity(name, means, var, mix))
    return out


def mixture_table(mix: Sequence[MixtureQuantity]) -> pd.DataFrame:
    rows = []
    for q in mix:
        rows.append({"parameter": q.name, "mean": q.mean, "sd": q.sd,
                     **dict(zip(QUANTILE_COLUMNS, q.quantiles()))})
    return pd.DataFrame(rows, columns=["parameter", "mean", "sd", *QUANTILE_COLUMNS])


def stability_trace(per_resample: Sequence[Sequence[QuantitySummary]], names: Sequence[str]) -> pd.DataFrame:
    """Mixture mean and SD of selected quantities after each resample, with the max relative SD change."""
    rows, prev = [], None
    for j in range(1, len(per_resample) + 1):
        mix = {q.name: q for q in mixture_summarize(per_resample[:j]) if q.name in names}
        sds = np.array([mix[n].sd for n in names])
        change = float(np.max(np.abs(sds - prev) / np.where(sds > 0, sds, 1.0))) if prev is not None else math.nan
        row = {"resamples": j, "max_rel_sd_change": change}
        for n in names:
            q = mix[n]
            lo, hi = q.quantiles((0.025, 0.975))
            row.update({f"{n}.mean": q.mean, f"{n}.sd": q.sd, f"{n}.q0.025": lo, f"{n}.q0.975": hi})
        rows.append(row)
        prev = sds
    return pd.DataFrame(rows)


def risk_table(cells: Sequence[MixtureQuantity], area_ids, T: int, threshold: float = 1.0) -> pd.DataFrame:
    """Relative-risk summaries of the cell mixtures, with exceedance probability of ``threshold``."""
    S = len(area_ids)
    rows = []
    for k, q in enumerate(cells):
        m = q.mixture
        q025, q975 = q.quantiles((0.025, 0.975))
        p = 1.0 - float(mixture_cdf(math.log(threshold), m.weights, m.locs, m.scales))
        rows.append({"area_id": area_ids[k % S], "time_index": k // S + 1, "mean": q.mean, "sd": q.sd,
                     "q025": q025, "q975": q975, "prob_exceed": p})
    return pd.DataFrame(rows)


# -- cross-resample covariance ---------------------------------------------------------

def cross_resample_covariance(per_resample: Sequence[Mapping[str, np.ndarray]], fixed: Sequence[str],
                              random: Sequence[str]) -> dict[str, pd.DataFrame]:
    """Posterior covariance of predictor components, per cell, averaged over cells and resamples.

    Each resample maps a component name to draws of shape (n_draws, n_cells).
    Returns the fixed-fixed, random-random and random-by-fixed tables.
    """
    names = list(fixed) + list(random)
    if not per_resample:
        raise ValueError("no resamples")
    acc = np.zeros((len(names), len(names)))
    for draws in per_resample:
        arrs = [np.atleast_2d(np.asarray(draws[n], float)).reshape(np.shape(draws[n])[0], -1) for n in names]
        n = arrs[0].shape[0]
        if n < 2:
            raise ValueError("cross-resample covariance needs at least 2 draws per resample")
        centred = [a - a.mean(axis=0) for a in arrs]
        for i in range(len(names)):
            for j in range(i, len(names)):
                c = float(np.mean(np.sum(centred[i] * centred[j], axis=0) / (n - 1)))
                acc[i, j] += c
                acc[j, i] = acc[i, j]
    acc /= len(per_resample)
    full = pd.DataFrame(acc, index=names, columns=names)
    return {"fixed": full.loc[list(fixed), list(fixed)], "random": full.loc[list(random), list(random)],
            "cross": full.loc[list(random), list(fixed)]}


def covariance_to_correlation(C: pd.DataFrame) -> pd.DataFrame:
    d = np.sqrt(np.diag(C.to_numpy()))
    return C / np.outer(d, d)


# -- pipelines -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClimateSource:
    """A fitted stage-1 model feeding one health covariate column."""

    fit: climate.Stage1Fit
    target_covariates: Mapping[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class TwoStageInputs:
    climate: Mapping[str, ClimateSource]
    targets: np.ndarray
    assign: BlockAssignment
    health_spec: health.HealthSpec
    panel: health.CasePanel
    expected: health.ExpectedTable
    graph: object
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    n_component_draws: int = 200

    def __post_init__(self):
        if tuple(self.assign.block_ids) != tuple(self.panel.area_ids):
            raise TwoStageError("block ids of the prediction grid must match the panel's area ids in order")


def block_covariates(inputs: TwoStageInputs, mode: str = "mean", seed=None) -> dict[str, np.ndarray]:
    """Block-averaged climate tables (T, S) for every climate source."""
    out = {}
    seeds = as_seed_sequence(seed).spawn(len(inputs.climate)) if mode == "sample" else [None] * len(inputs.climate)
    for (name, src), ss in zip(inputs.climate.items(), seeds):
        parts = climate.predict_components(src.fit, inputs.targets, src.target_covariates, mode, ss)
        out[name] = weighted_block_average(parts, src.fit.weights, inputs.assign)
    return out


@dataclass(frozen=True, eq=False)
class HealthRun:
    fit: lgm.LgmFit
    model: lgm.LatentGaussianModel
    modes: list
    block_values: dict[str, np.ndarray]
    provenance: dict


def summaries(fit: lgm.LgmFit, model: lgm.LatentGaussianModel) -> list[QuantitySummary]:
    """Fixed effects, hyperparameters and cell risks of one health fit."""
    return health.fixed_quantities(fit, model) + hyper_quantities(fit) + health.cell_quantities(fit, model)


def _stage1_provenance(inputs: TwoStageInputs) -> dict:
    return {name: {"family": src.fit.spec.family, "alpha1": [float(a) for a in src.fit.alpha1],
                   "weights": [float(w) for w in src.fit.weights],
                   "log_mlik": [float(c.fit.log_mlik) for c in src.fit.components]}
            for name, src in inputs.climate.items()}


def fit_with_covariates(inputs: TwoStageInputs, block_values: Mapping[str, np.ndarray], theta0=None,
                        restarts: int = 1, diagnostics: bool = True, strategy: str = "mode"):
    cov = {**inputs.covariates, **block_values}
    model = health.assemble_health(inputs.health_spec, inputs.panel, inputs.expected, cov, inputs.graph)
    fit, modes = health.fit_health(model, theta0, strategy=strategy, restarts=restarts, diagnostics=diagnostics)
    return fit, model, modes


def run_plugin(inputs: TwoStageInputs, strategy: str = "mode") -> HealthRun:
    """Posterior-mean point predictions, block averages, one health fit."""
    bv = block_covariates(inputs, "mean")
    fit, model, modes = fit_with_covariates(inputs, bv, strategy=strategy)
    prov = {"method": "plugin", "stage1": _stage1_provenance(inputs), "log_mlik": float(fit.log_mlik)}
    return HealthRun(fit, model, modes, bv, prov)


@dataclass(frozen=True, eq=False)
class ResampleOutput:
    j: int
    summaries: list
    components: dict
    log_mlik: float
    block_values: dict


@dataclass(frozen=True, eq=False)
class ResamplingResult:
    mixture: list[MixtureQuantity]
    outputs: tuple[ResampleOutput, ...]
    J_requested: int
    dropped: tuple[int, ...]
    trace: pd.DataFrame
    provenance: dict
    fixed_names: tuple[str, ...]
    random_names: tuple[str, ...]

    @property
    def J_effective(self) -> int:
        return len(self.outputs)

    def quantity(self, name: str) -> MixtureQuantity:
        for q in self.mixture:
            if q.name == name:
                return q
        raise KeyError(name)

    def covariance(self) -> dict[str, pd.DataFrame]:
        return cross_resample_covariance([o.components for o in self.outputs], self.fixed_names[1:], self.random_names)


class _ResampleJob:
    def __init__(self, inputs, theta0, force_mean, strategy):
        self.inputs, self.theta0, self.force_mean, self.strategy = inputs, theta0, force_mean, strategy

    def __call__(self, arg):
        j, ss = arg
        mode = "mean" if self.force_mean else "sample"
        s_clim, s_comp = ss.spawn(2)
        bv = block_covariates(self.inputs, mode, s_clim)
        fit, model, _ = fit_with_covariates(self.inputs, bv, self.theta0, restarts=0, diagnostics=False,
                                            strategy=self.strategy)
        comps = health.component_draws(fit, model, self.inputs.n_component_draws, s_comp)
        return ResampleOutput(j, summaries(fit, model), comps, float(fit.log_mlik), bv)


def run_resampling(inputs: TwoStageInputs, J: int, seed, jobs: int = 1, force_mean: bool = False,
                   plugin: HealthRun | None = None, strategy: str = "mode") -> ResamplingResult:
    """J stage-1 posterior draws, J health fits, equal-weight posterior mixture.

    Each health fit starts its hyperparameter search at the plug-in fit's
    first-pass mode.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    if seed is None:
        raise ValueError("resampling needs a seed")
    plugin = run_plugin(inputs, strategy) if plugin is None else plugin
    theta0 = plugin.modes[0].theta
    job = _ResampleJob(inputs, theta0, force_mean, strategy)
    children = as_seed_sequence(seed).spawn(J)
    results = ordered_map(job, list(enumerate(children)), jobs,
                          catch=(lgm.LaplaceError, np.linalg.LinAlgError, ValueError))
    outputs, dropped = [], []
    for j, r in enumerate(results):
        if isinstance(r, Exception):
            warnings.warn(f"resample {j} failed: {r}", RuntimeWarning, stacklevel=2)
            dropped.append(j)
        else:
            outputs.append(r)
    if not outputs:
        raise TwoStageError("every resample failed")
    mix = mixture_summarize([o.summaries for o in outputs])
    fixed_names = tuple(plugin.model.meta["fixed_names"])
    trace = stability_trace([o.summaries for o in outputs], list(fixed_names))
    random_names = tuple(b.name for b in plugin.model.blocks[1:])
    prov = {"method": "resample", "J": J, "J_effective": len(outputs), "seed": int(seed) if np.isscalar(seed) else str(seed),
            "force_mean": bool(force_mean), "dropped": dropped, "stage1": _stage1_provenance(inputs),
            "log_mlik": [o.log_mlik for o in outputs], "stability": trace["max_rel_sd_change"].tolist()}
    return ResamplingResult(mix, tuple(outputs), J, tuple(dropped), trace, prov, fixed_names, random_names)


def plugin_mixture(run: HealthRun) -> list[MixtureQuantity]:
    """The plug-in posterior in the mixture representation (J = 1)."""
    return mixture_summarize([summaries(run.fit, run.model)])
