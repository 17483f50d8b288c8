"""Command-line front end.

Exit codes: 0 success, 2 validation or configuration error, 3 numerical
failure, 4 file I/O error. Outputs carry no timestamps, so reruns with the
same inputs and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import bridge, climate, config, health, io, lgm, simulate
from .formula import HEALTH_PRESETS, FormulaError, resolve
from .gmrf import GmrfError
from .graph import StructuralError
from .summary import hyper_quantities, latent_quantities, summary_table

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

VALIDATION_ERRORS = (config.ConfigError, io.ValidationError, FormulaError, health.HealthError, StructuralError,
                     climate.Stage1Error, KeyError)
NUMERICAL_ERRORS = (lgm.LaplaceError, GmrfError, np.linalg.LinAlgError, bridge.TwoStageError, FloatingPointError)


class UsageError(config.ConfigError):
    pass


# -- shared loading --------------------------------------------------------------------

def _require(cfg: config.RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg.paths, n) is None]
    if missing:
        raise UsageError(f"config needs paths: {', '.join(missing)}")


def _out_dir(cfg: config.RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise io.DataIOError(f"{out}: {exc}") from exc
    return out


def _load_health_inputs(cfg: config.RunConfig, need_covariates: bool):
    graph = io.read_graph(cfg.paths.graph)
    panel = io.read_cases(cfg.paths.cases, graph)
    cov = io.read_covariates(cfg.paths.covariates, panel) if cfg.paths.covariates else {}
    if need_covariates:
        cols = [c for c in config_formula_columns(cfg) if c not in cov]
        if cols:
            raise io.ValidationError([io.Issue(str(cfg.paths.covariates or "covariates"), None,
                                               f"formula column {c!r} not found") for c in cols])
    return graph, panel, cov


def config_formula_columns(cfg: config.RunConfig) -> list[str]:
    return list(resolve(cfg.health.formula, HEALTH_PRESETS).columns)


def _grid_covariates(grid: pd.DataFrame) -> dict[str, np.ndarray]:
    return {c: grid[c].to_numpy(float) for c in grid.columns if c not in io.GRID_COLUMNS}


def _stage1_fit(cfg: config.RunConfig) -> climate.Stage1Fit:
    _require(cfg, "stations")
    stations = io.read_stations(cfg.paths.stations)
    gridded = None
    if cfg.stage1.family == "fusion":
        _require(cfg, "gridded")
        gridded = io.read_gridded(cfg.paths.gridded)
    return climate.fit_stage1(cfg.stage1.to_spec(), stations, gridded, jobs=cfg.jobs)


def _assignment(grid: pd.DataFrame, panel: health.CasePanel) -> bridge.BlockAssignment:
    labels = grid.sort_values("point_id")["block_id"].to_numpy(str)
    unknown = sorted(set(labels) - set(panel.area_ids))
    if unknown:
        raise io.ValidationError([io.Issue("grid", None, f"block_id {u!r} is not an area of the case panel")
                                  for u in unknown])
    empty = [a for a in panel.area_ids if a not in set(labels)]
    if empty:
        raise io.ValidationError([io.Issue("grid", None, f"area {a} has no prediction points") for a in empty])
    return bridge.BlockAssignment.from_labels(labels, panel.area_ids)


# -- output tables ---------------------------------------------------------------------

def stage1_tables(fit: climate.Stage1Fit) -> tuple[pd.DataFrame, pd.DataFrame]:
    rows = []
    for comp in fit.components:
        names = comp.model.meta["latent_names"]
        fixed = comp.model.blocks[0]
        qs = latent_quantities(comp.fit, names[:fixed.size], range(fixed.size)) + hyper_quantities(comp.fit)
        t = summary_table(qs)
        t.insert(0, "alpha1", comp.alpha1)
        rows.append(t)
    bma = pd.DataFrame({"alpha1": [c.alpha1 for c in fit.components],
                        "log_mlik": [c.fit.log_mlik for c in fit.components], "weight": fit.weights})
    return pd.concat(rows, ignore_index=True), bma


def comparison_row(kind, fit: lgm.LgmFit) -> dict:
    d = fit.diagnostics
    return {"interaction": kind, "mlik": fit.log_mlik, "waic": d.get("waic"), "p_waic": d.get("p_waic"),
            "cpo": d.get("cpo")}


def sir_tables(panel, expected, risk: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    s, sd = health.sir(panel, expected)
    T, S = panel.T, panel.S
    base = pd.DataFrame({"area_id": np.tile(np.array([int(a) for a in panel.area_ids]), T),
                         "time_index": np.repeat(np.arange(1, T + 1), S)})
    scatter = base.assign(cases=panel.cases.ravel(), expected=expected.E.ravel(), sir=s.ravel(),
                          model_mean=risk["mean"].to_numpy(), model_q025=risk["q025"].to_numpy(),
                          model_q975=risk["q975"].to_numpy())
    sdc = base.assign(classical_sd=sd.ravel(), model_sd=risk["sd"].to_numpy())
    with np.errstate(divide="ignore", invalid="ignore"):
        sdc["ratio"] = sdc["model_sd"] / sdc["classical_sd"]
    return scatter, sdc


def _mixture_outputs(mix, model, panel, threshold):
    n_cells = panel.T * panel.S
    params, cells = mix[:-n_cells], mix[-n_cells:]
    return bridge.mixture_table(params), bridge.risk_table(cells, panel.area_ids, panel.T, threshold)


def _write_health_outputs(out: Path, summary_df, risk, panel, expected, boundaries=None):
    io.write_csv(summary_df, out / "summary.csv")
    io.write_csv(risk, out / "risk.csv")
    if boundaries:
        io.join_geojson(boundaries, risk, out / "risk.geojson")
    scatter, sdc = sir_tables(panel, expected, risk)
    io.write_csv(scatter, out / "sir_vs_model.csv")
    io.write_csv(sdc, out / "sd_comparison.csv")


def _sweep(cfg, panel, expected, cov, graph, kinds):
    rows, fits = [], {}
    for kind in kinds:
        spec = cfg.health.to_spec(kind)
        model = health.assemble_health(spec, panel, expected, cov, graph)
        fit, modes = health.fit_health(model, strategy=cfg.health.strategy, n_samples=cfg.health.n_samples,
                                       seed=cfg.seed if cfg.seed is not None else 0)
        fits[kind] = (fit, model, modes)
        rows.append(comparison_row(kind, fit))
    table = pd.DataFrame(rows)
    best = kinds[int(np.argmin(table["waic"].to_numpy()))] if len(kinds) > 1 else kinds[0]
    return table, fits, best


# -- commands --------------------------------------------------------------------------

def cmd_validate(cfg: config.RunConfig) -> int:
    issues: list[io.Issue] = []
    graph = panel = None

    def attempt(fn, *a):
        try:
            return fn(*a)
        except io.ValidationError as exc:
            issues.extend(exc.issues)
        except io.DataIOError as exc:
            issues.append(io.Issue(str(exc), None, "cannot read"))
        return None

    p = cfg.paths
    if p.graph:
        graph = attempt(io.read_graph, p.graph)
    if p.cases:
        panel = attempt(io.read_cases, p.cases, graph)
    if p.covariates and panel is not None:
        attempt(io.read_covariates, p.covariates, panel)
    if p.stations:
        attempt(io.read_stations, p.stations)
    if p.gridded:
        attempt(io.read_gridded, p.gridded)
    if p.grid:
        grid = attempt(io.read_prediction_grid, p.grid)
        if grid is not None and panel is not None:
            attempt(_assignment, grid, panel)
    if cfg.stage1.family == "fusion" and not p.gridded:
        issues.append(io.Issue("config", None, "fusion stage 1 needs paths.gridded"))
    for i in issues:
        print(i)
    if not issues:
        print("ok")
    return EXIT_VALIDATION if issues else EXIT_OK


def cmd_simulate(cfg: config.RunConfig) -> int:
    if cfg.seed is None:
        raise UsageError("simulate needs a seed (--seed or seed: in the config)")
    sim = cfg.simulation
    name = cfg.stage1.covariate
    spec = cfg.health.to_spec("II" if cfg.health.interaction == "sweep" else None)
    study = simulate.synthetic_study(cfg.seed, sim.design, sim.climate, sim.health_truth(), spec, name)
    out = _out_dir(cfg)
    io.write_graph(study.graph, out / "graph.txt")
    io.write_csv(study.stations, out / "stations.csv")
    io.write_csv(study.gridded, out / "gridded.csv")
    io.write_csv(study.grid, out / "grid.csv")
    io.write_csv(study.cases, out / "cases.csv")
    ids = [str(i) for i in range(study.graph.n_areas)]
    io.write_csv(io.covariate_frame({name: study.true_block_climate}, ids), out / "covariates_true.csv")
    io.write_json({"seed": cfg.seed, "climate": study.climate_truth.to_json_dict(),
                   "health": study.health_truth.to_json_dict(),
                   "block_climate": study.true_block_climate.tolist()}, out / "truth.json")
    run = replace(cfg, paths=config.PathsConfig(graph="graph.txt", cases="cases.csv", stations="stations.csv",
                                                gridded="gridded.csv", grid="grid.csv"), out="results")
    (out / "config.yaml").write_text(config.dump(run), encoding="utf-8")
    print(f"wrote synthetic study to {out}")
    return EXIT_OK


def cmd_fit_stage1(cfg: config.RunConfig) -> int:
    fit = _stage1_fit(cfg)
    out = _out_dir(cfg)
    summ, bma = stage1_tables(fit)
    io.write_csv(summ, out / "stage1_summary.csv")
    io.write_csv(bma, out / "bma_weights.csv")
    prov = {"command": "fit-stage1", "family": fit.spec.family, "alpha1": list(fit.alpha1),
            "weights": fit.weights.tolist(), "dropped": list(fit.dropped), "config": cfg.to_dict()}
    if cfg.paths.grid:
        grid = io.read_prediction_grid(cfg.paths.grid).sort_values("point_id")
        xy = grid[["lon_km", "lat_km"]].to_numpy(float)
        pred = climate.predict_points(fit, xy, _grid_covariates(grid))
        T, n = pred.shape
        io.write_csv(pd.DataFrame({"point_id": np.tile(grid["point_id"].to_numpy(), T),
                                   "time_index": np.repeat(np.arange(1, T + 1), n), "mean": pred.ravel()}),
                     out / "point_predictions.csv")
        if cfg.paths.graph and cfg.paths.cases:
            graph = io.read_graph(cfg.paths.graph)
            panel = io.read_cases(cfg.paths.cases, graph)
            assign = _assignment(grid, panel)
            parts = climate.predict_components(fit, xy, _grid_covariates(grid))
            bv = bridge.weighted_block_average(parts, fit.weights, assign)
            io.write_csv(io.covariate_frame({cfg.stage1.covariate: bv}, panel.area_ids), out / "block_climate.csv")
    io.write_json(prov, out / "provenance.json")
    print(summ.to_string(index=False))
    return EXIT_OK


def cmd_fit_health(cfg: config.RunConfig) -> int:
    _require(cfg, "graph", "cases")
    graph, panel, cov = _load_health_inputs(cfg, need_covariates=True)
    expected = health.expected_cases(panel)
    out = _out_dir(cfg)
    table, fits, best = _sweep(cfg, panel, expected, cov, graph, cfg.health.kinds())
    if len(table) > 1:
        io.write_csv(table, out / "model_comparison.csv")
    fit, model, _ = fits[best]
    mix = bridge.mixture_summarize([bridge.summaries(fit, model)])
    summ, risk = _mixture_outputs(mix, model, panel, cfg.health.threshold)
    _write_health_outputs(out, summ, risk, panel, expected, cfg.paths.boundaries)
    io.write_json({"command": "fit-health", "interaction": best, "log_mlik": fit.log_mlik,
                   "diagnostics": _diag(fit), "config": cfg.to_dict()}, out / "provenance.json")
    print(table.to_string(index=False))
    print(summ.to_string(index=False))
    return EXIT_OK


def _diag(fit):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in fit.diagnostics.items()}


def cmd_two_stage(cfg: config.RunConfig) -> int:
    _require(cfg, "graph", "cases", "grid", "stations")
    graph, panel, cov = _load_health_inputs(cfg, need_covariates=False)
    grid = io.read_prediction_grid(cfg.paths.grid).sort_values("point_id")
    assign = _assignment(grid, panel)
    s1 = _stage1_fit(cfg)
    name = cfg.stage1.covariate
    missing = [c for c in config_formula_columns(cfg) if c not in cov and c != name]
    if missing:
        raise io.ValidationError([io.Issue(str(cfg.paths.covariates or "covariates"), None,
                                           f"formula column {c!r} not found") for c in missing])
    expected = health.expected_cases(panel)
    xy = grid[["lon_km", "lat_km"]].to_numpy(float)
    out = _out_dir(cfg)
    kinds = cfg.health.kinds()
    kind = kinds[0]
    src = {name: bridge.ClimateSource(s1, _grid_covariates(grid))}
    if len(kinds) > 1:
        probe = bridge.TwoStageInputs(src, xy, assign, cfg.health.to_spec(kinds[0]), panel, expected, graph, cov)
        bv = bridge.block_covariates(probe, "mean")
        table, _, kind = _sweep(cfg, panel, expected, {**cov, **bv}, graph, kinds)
        io.write_csv(table, out / "model_comparison.csv")
        print(table.to_string(index=False))
    inputs = bridge.TwoStageInputs(src, xy, assign, cfg.health.to_spec(kind), panel, expected, graph, cov,
                                   n_component_draws=cfg.propagation.component_draws)
    strategy = cfg.health.strategy
    plugin = bridge.run_plugin(inputs, strategy)
    io.write_csv(io.covariate_frame(plugin.block_values, panel.area_ids), out / "block_climate.csv")
    prov = {"command": "two-stage", "interaction": kind, "stage1": plugin.provenance["stage1"],
            "config": cfg.to_dict()}
    if cfg.propagation.method == "plugin":
        mix = bridge.plugin_mixture(plugin)
        prov.update(method="plugin", log_mlik=plugin.fit.log_mlik)
    else:
        res = bridge.run_resampling(inputs, cfg.propagation.J, cfg.seed, cfg.jobs, cfg.propagation.force_mean,
                                    plugin, strategy)
        mix = res.mixture
        io.write_csv(res.trace, out / "trace.csv")
        if all(len(next(iter(o.components.values()))) >= 2 for o in res.outputs):
            for key, df in res.covariance().items():
                io.write_csv(df.reset_index(names="component"), out / f"covariance_{key}.csv")
        prov.update({k: v for k, v in res.provenance.items() if k != "stage1"})
    summ, risk = _mixture_outputs(mix, plugin.model, panel, cfg.health.threshold)
    _write_health_outputs(out, summ, risk, panel, expected, cfg.paths.boundaries)
    io.write_json(prov, out / "provenance.json")
    print(summ.to_string(index=False))
    return EXIT_OK


def cmd_report(cfg: config.RunConfig) -> int:
    out = Path(cfg.out)
    if not out.is_dir():
        raise io.DataIOError(f"{out}: no such output directory")
    shown = 0
    for fname in ("model_comparison.csv", "bma_weights.csv", "stage1_summary.csv", "summary.csv", "trace.csv"):
        path = out / fname
        if path.exists():
            print(f"== {fname}")
            print(pd.read_csv(path).to_string(index=False))
            shown += 1
    risk = out / "risk.csv"
    if risk.exists():
        r = pd.read_csv(risk)
        top = r.sort_values(["prob_exceed", "mean"], ascending=False).head(10)
        print("== risk.csv (top 10 by exceedance probability)")
        print(top.to_string(index=False))
        shown += 1
    if not shown:
        print(f"no result tables in {out}")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "fit-stage1": cmd_fit_stage1,
            "fit-health": cmd_fit_health, "two-stage": cmd_two_stage, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stdm", description="Two-stage spatio-temporal disease mapping.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--jobs", type=int, help="parallel worker processes")
        p.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
        p.add_argument("--out", type=Path, help="output directory")
    c = sub.add_parser("config")
    c.add_argument("--print-defaults", action="store_true", help="print the default configuration")
    return ap


def _resolve_config(args) -> config.RunConfig:
    cfg = config.load(args.config) if args.config else config.from_dict({})
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    elif args.config:
        cfg.out = str((args.config.parent / cfg.out)) if not Path(cfg.out).is_absolute() else cfg.out
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config":
        print(config.defaults_yaml(), end="")
        return EXIT_OK
    try:
        cfg = _resolve_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except io.DataIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
