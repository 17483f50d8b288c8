import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stdm.formula import CLIMATE_PRESETS, HEALTH_PRESETS, Formula, FormulaError, MissingColumnError, resolve

TABLE = {"t": np.array([1.0, 2.0, 3.0]), "r": np.array([1.0, np.e, np.e ** 2]), "c": np.array([0.0, 1.0, 1.0])}


def test_empty_formula():
    f = Formula.parse("")
    assert f.terms == () and f.design(TABLE, 3).shape == (3, 0)


def test_terms_and_design():
    f = Formula.parse("t + t^2 + log(r) + log(r):c")
    assert f.labels == ("t", "t^2", "log(r)", "log(r):c")
    assert f.columns == ("t", "r", "c")
    np.testing.assert_allclose(f.design(TABLE), [[1, 1, 0, 0], [2, 4, 1, 1], [3, 9, 2, 2]])


@pytest.mark.parametrize("text", ["t +", "a:b:c", "exp(t)", "t + t", "2t"])
def test_rejects(text):
    with pytest.raises(FormulaError):
        Formula.parse(text)


def test_missing_column_named():
    with pytest.raises(MissingColumnError, match="zz"):
        Formula.parse("t + zz").design(TABLE)


def test_log_of_nonpositive():
    with pytest.raises(FormulaError):
        Formula.parse("log(c)").design(TABLE)


@pytest.mark.parametrize("presets", [CLIMATE_PRESETS, HEALTH_PRESETS])
def test_presets_parse(presets):
    for name, text in presets.items():
        assert resolve(name, presets) == Formula.parse(text)


def test_temperature_rain_preset_has_seven_terms():
    assert len(resolve("temp_rain", HEALTH_PRESETS).terms) == 7


@given(st.lists(st.sampled_from(["t", "r", "c", "log(r)", "t^2", "t:c"]), unique=True, min_size=1))
def test_str_round_trip(terms):
    f = Formula.parse(" + ".join(terms))
    assert Formula.parse(str(f)) == f
