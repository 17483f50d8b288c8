import json

import numpy as np
import pandas as pd
import pytest

from stdm import io
from stdm.graph import AdjacencyGraph
from stdm.health import CasePanel


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_graph_round_trip(tmp_path):
    g = AdjacencyGraph.from_edges(4, [(0, 1), (1, 2)])
    io.write_graph(g, tmp_path / "g.adj")
    assert io.read_graph(tmp_path / "g.adj") == g


def test_asymmetric_graph_named(tmp_path):
    p = _write(tmp_path, "bad.adj", "3\n0 1 1\n1 1 0\n2 1 1\n")
    with pytest.raises(io.ValidationError) as exc:
        io.read_graph(p)
    assert "bad.adj:4" in str(exc.value) and "asymmetric" in str(exc.value)


def test_missing_file(tmp_path):
    with pytest.raises(io.DataIOError):
        io.read_graph(tmp_path / "nope.adj")
    with pytest.raises(io.DataIOError):
        io.read_stations(tmp_path / "nope.csv")


def test_cases_round_trip(tmp_path):
    cases = np.array([[1.0, np.nan, 3.0], [0.0, 5.0, 6.0]])
    panel = CasePanel(("0", "1", "2"), cases, np.full((2, 3), 100.0))
    io.write_csv(io.panel_frame(panel), tmp_path / "c.csv")
    back = io.read_cases(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.cases, cases)
    np.testing.assert_array_equal(back.population, panel.population)
    assert back.area_ids == panel.area_ids


def test_unknown_area_named(tmp_path):
    p = _write(tmp_path, "c.csv", "area_id,time_index,cases,population\n0,1,2,10\n5,1,1,10\n")
    with pytest.raises(io.ValidationError) as exc:
        io.read_cases(p, AdjacencyGraph.from_edges(2, [(0, 1)]))
    assert "c.csv:3" in str(exc.value) and "unknown area_id 5" in str(exc.value)


@pytest.mark.parametrize("body, fragment", [
    ("0,1,x,10\n", "non-numeric"),
    ("0,1,1.5,10\n", "integer"),
    ("0,1,-1,10\n", "negative case"),
    ("0,1,1,10\n0,1,1,10\n", "duplicate"),
    ("0,1,1,10\n0,3,1,10\n", "gaps"),
])
def test_case_errors(tmp_path, body, fragment):
    p = _write(tmp_path, "c.csv", "area_id,time_index,cases,population\n" + body)
    with pytest.raises(io.ValidationError, match=fragment):
        io.read_cases(p)


def test_missing_column(tmp_path):
    p = _write(tmp_path, "c.csv", "area_id,time_index,cases\n0,1,1\n")
    with pytest.raises(io.ValidationError, match="population"):
        io.read_cases(p)


def test_covariates_round_trip(tmp_path):
    cov = {"temp": np.arange(6.0).reshape(2, 3), "rain": np.ones((2, 3))}
    io.write_csv(io.covariate_frame(cov, ["0", "1", "2"]), tmp_path / "v.csv")
    panel = CasePanel(("0", "1", "2"), np.ones((2, 3)), np.ones((2, 3)))
    back = io.read_covariates(tmp_path / "v.csv", panel)
    for k in cov:
        np.testing.assert_array_equal(back[k], cov[k])


def test_covariates_shape_mismatch(tmp_path):
    io.write_csv(io.covariate_frame({"t": np.ones((1, 3))}, ["0", "1", "2"]), tmp_path / "v.csv")
    panel = CasePanel(("0", "1", "2"), np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(io.ValidationError, match="cover"):
        io.read_covariates(tmp_path / "v.csv", panel)


def test_stations_round_trip(tmp_path):
    df = pd.DataFrame({"station_id": [0, 1, 0, 1], "lon_km": [1.0, 2.0, 1.0, 2.0], "lat_km": [3.0, 4.0, 3.0, 4.0],
                       "time_index": [1, 1, 2, 2], "value": [0.1, 0.2, 0.3, 1 / 3]})
    io.write_csv(df, tmp_path / "s.csv")
    back = io.read_stations(tmp_path / "s.csv")
    pd.testing.assert_frame_equal(back, df)


def test_station_moves(tmp_path):
    p = _write(tmp_path, "s.csv", "station_id,lon_km,lat_km,time_index,value\n0,1,1,1,0\n0,2,1,2,0\n")
    with pytest.raises(io.ValidationError, match="changes location"):
        io.read_stations(p)


def test_grid_keeps_block_text(tmp_path):
    p = _write(tmp_path, "g.csv", "point_id,lon_km,lat_km,block_id\n0,1,1,007\n1,2,2,8\n")
    g = io.read_prediction_grid(p)
    assert g["block_id"].tolist() == ["007", "8"]


def test_write_json_numpy(tmp_path):
    io.write_json({"a": np.float64(1.5), "b": np.arange(2), "c": (1, 2)}, tmp_path / "x.json")
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": 1.5, "b": [0, 1], "c": [1, 2]}


def test_join_geojson(tmp_path):
    gj = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"area_id": 0}, "geometry": None},
        {"type": "Feature", "properties": {"area_id": "1", "name": "b"}, "geometry": None}]}
    src = _write(tmp_path, "b.geojson", json.dumps(gj))
    table = pd.DataFrame({"area_id": ["0", "1", "0", "1"], "time_index": [1, 1, 2, 2], "mean": [1.0, 2.0, 3.0, 4.0]})
    io.join_geojson(src, table, tmp_path / "out.geojson")
    out = json.loads((tmp_path / "out.geojson").read_text())
    assert out["features"][0]["properties"] == {"area_id": 0, "mean_t1": 1.0, "mean_t2": 3.0}
    assert out["features"][1]["properties"]["name"] == "b"
    assert out["features"][1]["properties"]["mean_t2"] == 4.0


@pytest.mark.parametrize("text", ["{not json", json.dumps({"type": "Feature"})])
def test_join_geojson_rejects(tmp_path, text):
    src = _write(tmp_path, "b.geojson", text)
    with pytest.raises(io.ValidationError):
        io.join_geojson(src, pd.DataFrame({"area_id": [], "time_index": []}), tmp_path / "o.geojson")
