"""Readers and writers for the stage CSV files and the graph file.

Every reader collects problems as :class:`Issue` records naming the file
and the 1-based line (the header is line 1) and raises
:class:`ValidationError` holding all of them. Floats are written with
``repr`` precision so tables round-trip losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .graph import AdjacencyGraph, GraphParseError, format_graph, parse_graph
from .health import CasePanel

STATIONS_COLUMNS = ("station_id", "lon_km", "lat_km", "time_index", "value")
GRIDDED_COLUMNS = ("cell_id", "lon_km", "lat_km", "time_index", "value")
GRID_COLUMNS = ("point_id", "lon_km", "lat_km", "block_id")
CASES_COLUMNS = ("area_id", "time_index", "cases", "population")
COVARIATE_KEYS = ("area_id", "time_index")
RISK_COLUMNS = ("area_id", "time_index", "mean", "sd", "q025", "q975", "prob_exceed")


@dataclass(frozen=True)
class Issue:
    file: str
    line: int | None
    message: str

    def __str__(self) -> str:
        where = f"{self.file}:{self.line}" if self.line is not None else self.file
        return f"{where}: {self.message}"


class ValidationError(ValueError):
    def __init__(self, issues: Sequence[Issue]):
        self.issues = tuple(issues)
        super().__init__("\n".join(str(i) for i in self.issues))


class DataIOError(OSError):
    """A file could not be read or written."""


def _line(row_index) -> int:
    return int(row_index) + 2


def _read_table(path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path, dtype={"block_id": str})
    except FileNotFoundError as exc:
        raise DataIOError(f"{path}: file not found") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ValidationError([Issue(str(path), None, f"unreadable CSV: {exc}")]) from exc


def _require_columns(df: pd.DataFrame, cols: Iterable[str], name: str) -> list[Issue]:
    missing = [c for c in cols if c not in df.columns]
    return [Issue(name, 1, f"missing column {c!r}") for c in missing]


def _check_numeric(df, cols, name, integer=(), allow_missing=()) -> list[Issue]:
    issues = []
    for c in cols:
        vals = pd.to_numeric(df[c], errors="coerce")
        bad = vals.isna() & (df[c].notna() | (c not in allow_missing))
        for i in np.flatnonzero(bad.to_numpy()):
            issues.append(Issue(name, _line(i), f"column {c!r} has non-numeric or missing value {df[c].iloc[i]!r}"))
        if c in integer:
            ok = vals.notna().to_numpy()
            frac = ok & (np.mod(vals.fillna(0).to_numpy(), 1) != 0)
            for i in np.flatnonzero(frac):
                issues.append(Issue(name, _line(i), f"column {c!r} must be an integer, got {df[c].iloc[i]!r}"))
        df[c] = vals
    return issues


def _time_axis(df, name) -> tuple[np.ndarray, list[Issue]]:
    times = np.unique(df["time_index"].dropna().to_numpy())
    if times.size and not np.array_equal(times, np.arange(times[0], times[0] + times.size)):
        gaps = sorted(set(range(int(times[0]), int(times[-1]) + 1)) - set(int(t) for t in times))
        return times, [Issue(name, None, f"time_index has gaps at {gaps}")]
    return times, []


def _panel_shape_issues(df, key, times, name) -> list[Issue]:
    issues = []
    dup = df.duplicated(subset=[key, "time_index"], keep="first").to_numpy()
    for i in np.flatnonzero(dup):
        issues.append(Issue(name, _line(i), f"duplicate row for {key}={df[key].iloc[i]}, time_index={df['time_index'].iloc[i]}"))
    counts = df.drop_duplicates(subset=[key, "time_index"]).groupby(key)["time_index"].nunique()
    for k, n in counts.items():
        if n != times.size:
            issues.append(Issue(name, None, f"{key} {k} has {n} of {times.size} time points"))
    return issues


# -- graph ---------------------------------------------------------------------------

def read_graph(path) -> AdjacencyGraph:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataIOError(f"{path}: file not found") from exc
    try:
        return parse_graph(text)
    except GraphParseError as exc:
        raise ValidationError([Issue(str(path), exc.line, exc.message)]) from exc


def write_graph(graph: AdjacencyGraph, path) -> None:
    Path(path).write_text(format_graph(graph), encoding="utf-8")


# -- stage 1 -------------------------------------------------------------------------

def _read_point_series(path, cols, key) -> pd.DataFrame:
    name = str(path)
    df = _read_table(path)
    issues = _require_columns(df, cols, name)
    if issues:
        raise ValidationError(issues)
    issues += _check_numeric(df, [c for c in cols if c != key] + [key], name, integer=(key, "time_index"))
    if not issues:
        times, gap = _time_axis(df, name)
        issues += gap
        dup = df.duplicated(subset=[key, "time_index"]).to_numpy()
        for i in np.flatnonzero(dup):
            issues.append(Issue(name, _line(i), f"duplicate row for {key}={df[key].iloc[i]}"))
        loc = df.groupby(key)[["lon_km", "lat_km"]].nunique()
        for k in loc.index[(loc > 1).any(axis=1)]:
            issues.append(Issue(name, None, f"{key} {k} changes location over time"))
    if issues:
        raise ValidationError(issues)
    df[key] = df[key].astype(int)
    df["time_index"] = df["time_index"].astype(int)
    return df


def read_stations(path) -> pd.DataFrame:
    """Station series ``station_id,lon_km,lat_km,time_index,value[,covariates...]``."""
    return _read_point_series(path, STATIONS_COLUMNS, "station_id")


def read_gridded(path) -> pd.DataFrame:
    """Gridded source ``cell_id,lon_km,lat_km,time_index,value``."""
    return _read_point_series(path, GRIDDED_COLUMNS, "cell_id")


def read_prediction_grid(path) -> pd.DataFrame:
    """Prediction points ``point_id,lon_km,lat_km,block_id[,covariates...]``; ``block_id`` is kept as text."""
    name = str(path)
    df = _read_table(path)
    issues = _require_columns(df, GRID_COLUMNS, name)
    if issues:
        raise ValidationError(issues)
    issues += _check_numeric(df, ["point_id", "lon_km", "lat_km"], name, integer=("point_id",))
    for i in np.flatnonzero(df["block_id"].isna().to_numpy()):
        issues.append(Issue(name, _line(i), "missing block_id"))
    for i in np.flatnonzero(df.duplicated(subset=["point_id"]).to_numpy()):
        issues.append(Issue(name, _line(i), f"duplicate point_id {df['point_id'].iloc[i]}"))
    if issues:
        raise ValidationError(issues)
    df["point_id"] = df["point_id"].astype(int)
    df["block_id"] = df["block_id"].astype(str)
    return df


# -- stage 2 -------------------------------------------------------------------------

def read_cases(path, graph: AdjacencyGraph | None = None) -> CasePanel:
    """Case panel ``area_id,time_index,cases,population``.

    ``area_id`` is the 0-based graph index. Empty ``cases`` are missing
    observations. The panel must be rectangular with contiguous time indices.
    """
    name = str(path)
    df = _read_table(path)
    issues = _require_columns(df, CASES_COLUMNS, name)
    if issues:
        raise ValidationError(issues)
    issues += _check_numeric(df, list(CASES_COLUMNS), name, integer=("area_id", "time_index", "cases"),
                             allow_missing=("cases",))
    if issues:
        raise ValidationError(issues)
    for i in np.flatnonzero((df["cases"] < 0).to_numpy()):
        issues.append(Issue(name, _line(i), f"negative case count {df['cases'].iloc[i]}"))
    for i in np.flatnonzero(~(df["population"] >= 0).to_numpy()):
        issues.append(Issue(name, _line(i), f"negative population {df['population'].iloc[i]}"))
    if graph is not None:
        unknown = ~df["area_id"].isin(np.arange(graph.n_areas))
        for i in np.flatnonzero(unknown.to_numpy()):
            issues.append(Issue(name, _line(i), f"unknown area_id {int(df['area_id'].iloc[i])} "
                                                f"(graph has {graph.n_areas} areas)"))
    times, gap = _time_axis(df, name)
    issues += gap + _panel_shape_issues(df, "area_id", times, name)
    areas = np.unique(df["area_id"].to_numpy()).astype(int)
    if graph is not None and not issues and areas.size != graph.n_areas:
        missing = sorted(set(range(graph.n_areas)) - set(areas.tolist()))
        issues.append(Issue(name, None, f"areas {missing} of the graph have no rows"))
    if not issues and not np.array_equal(areas, np.arange(areas.size)):
        issues.append(Issue(name, None, "area_id values must be 0..S-1"))
    if issues:
        raise ValidationError(issues)
    S, T = areas.size, times.size
    d = df.sort_values(["time_index", "area_id"])
    cases = d["cases"].to_numpy(float).reshape(T, S)
    pop = d["population"].to_numpy(float).reshape(T, S)
    return CasePanel(tuple(str(a) for a in areas), cases, pop)


def read_covariates(path, panel: CasePanel | None = None) -> dict[str, np.ndarray]:
    """Wide covariate table ``area_id,time_index,<name>...`` as (T, S) arrays."""
    name = str(path)
    df = _read_table(path)
    issues = _require_columns(df, COVARIATE_KEYS, name)
    if issues:
        raise ValidationError(issues)
    value_cols = [c for c in df.columns if c not in COVARIATE_KEYS]
    issues += _check_numeric(df, list(COVARIATE_KEYS) + value_cols, name, integer=COVARIATE_KEYS)
    if issues:
        raise ValidationError(issues)
    times, gap = _time_axis(df, name)
    issues += gap + _panel_shape_issues(df, "area_id", times, name)
    areas = np.unique(df["area_id"].to_numpy()).astype(int)
    if panel is not None:
        if areas.size != panel.S or times.size != panel.T:
            issues.append(Issue(name, None, f"covariates cover {areas.size} areas x {times.size} times, "
                                            f"cases cover {panel.S} x {panel.T}"))
        elif [str(a) for a in areas] != list(panel.area_ids):
            issues.append(Issue(name, None, "covariate area_ids differ from the case panel"))
    if issues:
        raise ValidationError(issues)
    d = df.sort_values(["time_index", "area_id"])
    T, S = times.size, areas.size
    return {c: d[c].to_numpy(float).reshape(T, S) for c in value_cols}


def panel_frame(panel: CasePanel) -> pd.DataFrame:
    T, S = panel.T, panel.S
    return pd.DataFrame({"area_id": np.tile(np.array([int(a) for a in panel.area_ids]), T),
                         "time_index": np.repeat(np.arange(1, T + 1), S),
                         "cases": pd.array(np.where(np.isnan(panel.cases.ravel()), pd.NA, panel.cases.ravel()),
                                           dtype="Int64"),
                         "population": panel.population.ravel()})


def covariate_frame(covariates: dict[str, np.ndarray], area_ids: Sequence) -> pd.DataFrame:
    arrays = {k: np.asarray(v, float) for k, v in covariates.items()}
    S = len(area_ids)
    T = next(iter(arrays.values())).shape[0] if arrays else 0
    out = {"area_id": np.tile(np.array([int(a) for a in area_ids]), T), "time_index": np.repeat(np.arange(1, T + 1), S)}
    out.update({k: v.reshape(T * S) for k, v in arrays.items()})
    return pd.DataFrame(out)


# -- generic output ------------------------------------------------------------------

def write_csv(df: pd.DataFrame, path) -> None:
    """Write with a header, no index, ``\\n`` line endings and full float precision."""
    try:
        df.to_csv(path, index=False, lineterminator="\n")
    except OSError as exc:
        raise DataIOError(f"{path}: {exc}") from exc


def write_json(obj, path) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                              encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"{path}: {exc}") from exc


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def join_geojson(boundaries_path, table: pd.DataFrame, path, key: str = "area_id") -> None:
    """Copy a FeatureCollection, adding ``<column>_t<time>`` properties from ``table`` by area id."""
    try:
        gj = json.loads(Path(boundaries_path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataIOError(f"{boundaries_path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError([Issue(str(boundaries_path), exc.lineno, f"invalid JSON: {exc.msg}")]) from exc
    feats = gj.get("features") if isinstance(gj, dict) else None
    if not isinstance(feats, list):
        raise ValidationError([Issue(str(boundaries_path), None, "expected a GeoJSON FeatureCollection")])
    values = [c for c in table.columns if c not in (key, "time_index")]
    by_area: dict[str, dict] = {}
    for row in table.itertuples(index=False):
        r = row._asdict()
        props = by_area.setdefault(str(r[key]), {})
        for c in values:
            props[f"{c}_t{int(r['time_index'])}"] = r[c]
    for f in feats:
        aid = str((f.get("properties") or {}).get(key))
        if aid in by_area:
            f["properties"] = {**f["properties"], **by_area[aid]}
    write_json(gj, path)
