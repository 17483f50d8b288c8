import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stdm import bridge as br, climate as cl, health as hl
from stdm.summary import QuantitySummary

from conftest import degenerate_stage1


def _assign(labels):
    return br.BlockAssignment.from_labels(labels)


class TestBlockAverage:
    def test_mean(self):
        assert br.block_average(np.array([[2.0, 4.0, 6.0, 9.0]]), _assign("aaab"))[0].tolist() == [4.0, 9.0]

    def test_single_point_identity(self):
        v = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(br.block_average(v, _assign("abcd")), v)

    @given(st.integers(0, 10_000))
    def test_permutation_exact(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, 12)
        labels[:3] = [0, 1, 2]
        v = rng.normal(size=(2, 12))
        perm = rng.permutation(12)
        a = br.block_average(v, br.BlockAssignment(labels, ("0", "1", "2")))
        b = br.block_average(v[:, perm], br.BlockAssignment(labels[perm], ("0", "1", "2")))
        np.testing.assert_array_equal(a, b)

    @given(arrays(np.int64, (2, 7), elements=st.integers(-1000, 1000)), st.integers(-8, 8), st.integers(-50, 50))
    def test_affine_exact_on_representable_values(self, v, a, b):
        # power-of-two block sizes keep the division exact; other sizes agree to one rounding
        asg = _assign("aabbbbc")
        v = v.astype(float)
        np.testing.assert_array_equal(br.block_average(a * v + b, asg), a * br.block_average(v, asg) + b)

    @given(st.integers(0, 1000), st.floats(-10, 10), st.floats(-10, 10))
    def test_affine_general(self, seed, a, b):
        v = np.random.default_rng(seed).normal(size=(2, 6))
        asg = _assign("aabbbc")
        np.testing.assert_allclose(br.block_average(a * v + b, asg), a * br.block_average(v, asg) + b,
                                   rtol=1e-12, atol=1e-12)

    def test_empty_block(self):
        with pytest.raises(ValueError, match="without prediction points"):
            br.block_average(np.ones((1, 2)), br.BlockAssignment.from_labels("aa", ("a", "b")))

    def test_unknown_block(self):
        with pytest.raises(ValueError, match="unknown blocks"):
            br.BlockAssignment.from_labels("ac", ("a", "b"))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            br.block_average(np.ones((1, 3)), _assign("ab"))


class TestWeighted:
    def test_single_table(self):
        v = np.random.default_rng(1).normal(size=(2, 5))
        asg = _assign("aabbc")
        np.testing.assert_array_equal(br.weighted_block_average([v], [1.0], asg), br.block_average(v, asg))

    @given(st.lists(st.floats(0.01, 1), min_size=2, max_size=5))
    def test_identical_tables(self, w):
        w = np.array(w) / np.sum(w)
        if abs(w.sum() - 1) > 1e-12:
            return
        v = np.random.default_rng(2).normal(size=(2, 5))
        asg = _assign("aabbc")
        np.testing.assert_array_equal(br.weighted_block_average([v] * len(w), w, asg), br.block_average(v, asg))

    def test_halves(self):
        asg = _assign("a")
        assert br.weighted_block_average([np.array([[2.0]]), np.array([[4.0]])], [0.5, 0.5], asg)[0, 0] == 3.0

    @pytest.mark.parametrize("w", [[1.0], [0.5, 0.6]])
    def test_rejects(self, w):
        with pytest.raises(ValueError):
            br.weighted_block_average([np.ones((1, 1))] * 2, w, _assign("a"))


def _q(name, locs, scales, weights=None, transform="identity"):
    locs = np.atleast_1d(np.asarray(locs, float))
    w = np.full(locs.size, 1 / locs.size) if weights is None else np.asarray(weights, float)
    return QuantitySummary(name, w, locs, np.atleast_1d(np.asarray(scales, float)), transform)


class TestMixture:
    def test_total_variance(self):
        m = br.mixture_summarize([[_q("g", 1, 1)], [_q("g", 3, 1)]])[0]
        assert m.mean == 2.0 and m.var == 2.0 and m.J == 2
        assert m.mixture.var == pytest.approx(2.0, rel=1e-14)

    def test_identical_components(self):
        q = _q("g", [0.3, 0.9], [0.5, 0.2], [0.4, 0.6])
        m = br.mixture_summarize([[q], [q]])[0]
        assert m.mean == pytest.approx(q.mean, rel=1e-15)
        assert m.sd == pytest.approx(q.sd, rel=1e-12)
        np.testing.assert_allclose(m.quantiles(), q.quantiles(), atol=1e-12)

    def test_median_symmetry(self):
        m = br.mixture_summarize([[_q("g", 0, 1)], [_q("g", 0, 1)]])[0]
        assert abs(m.quantiles((0.5,))[0]) < 1e-3

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 3)), min_size=1, max_size=8),
           st.sampled_from(["identity", "exp", "log"]))
    def test_law_of_total_variance(self, comps, transform):
        mix = br.mixture_summarize([[_q("g", m, s, transform=transform)] for m, s in comps])[0]
        assert abs(mix.var - (mix.within + mix.between)) <= 1e-10 * max(1.0, mix.var)
        assert abs(mix.var - mix.mixture.var) <= 1e-9 * max(1.0, mix.var)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            br.mixture_summarize([[_q("a", 0, 1)], [_q("b", 0, 1)]])
        with pytest.raises(ValueError):
            br.mixture_summarize([])


class TestCrossCovariance:
    def test_deterministic_zero(self):
        d = {"a": np.ones((5, 3)), "b": np.zeros((5, 3))}
        out = br.cross_resample_covariance([d, d], ["a"], ["b"])
        assert all(np.all(v.to_numpy() == 0) for v in out.values())

    def test_independent(self):
        rng = np.random.default_rng(0)
        n = 4000
        d = {"a": rng.normal(size=(n, 2)), "b": rng.normal(size=(n, 2))}
        c = br.cross_resample_covariance([d], ["a"], ["b"])["cross"].iloc[0, 0]
        assert abs(c) < 4 / math.sqrt(n)

    def test_negation(self):
        x = np.random.default_rng(1).normal(size=(300, 4))
        per = [{"a": x, "b": -x}, {"a": 2 * x, "b": -2 * x}]
        out = br.cross_resample_covariance(per, ["a"], ["b"])
        full = out["fixed"].iloc[0, 0], out["random"].iloc[0, 0], out["cross"].iloc[0, 0]
        assert full[2] / math.sqrt(full[0] * full[1]) == pytest.approx(-1.0, abs=1e-10)

    def test_correlation_table(self):
        x = np.random.default_rng(1).normal(size=(300, 4))
        out = br.cross_resample_covariance([{"a": x, "b": -x}], ["a", "b"], [])
        np.testing.assert_allclose(br.covariance_to_correlation(out["fixed"]).to_numpy(), [[1, -1], [-1, 1]],
                                   atol=1e-10)

    def test_needs_two_draws(self):
        with pytest.raises(ValueError):
            br.cross_resample_covariance([{"a": np.ones((1, 2))}], ["a"], [])


def _fixed_table(run):
    return br.mixture_table(br.plugin_mixture(run))


class TestPipelines:
    def test_block_ids_must_match(self, small_inputs):
        bad = br.BlockAssignment(small_inputs.assign.block_of, tuple(reversed(small_inputs.assign.block_ids)))
        with pytest.raises(br.TwoStageError):
            dataclasses.replace(small_inputs, assign=bad)

    def test_degenerate_stage1_equals_true_covariates(self, small_inputs):
        fit = small_inputs.climate["temperature"].fit
        deg = degenerate_stage1(fit)
        inputs = dataclasses.replace(small_inputs, climate={"temperature": br.ClimateSource(deg)})
        run = br.run_plugin(inputs)
        direct = cl.predict_points(fit, inputs.targets)
        table = br.block_average(direct, inputs.assign)
        cov = {"temperature": table}
        m = hl.assemble_health(inputs.health_spec, inputs.panel, inputs.expected, cov, inputs.graph)
        f, _ = hl.fit_health(m)
        np.testing.assert_array_equal(run.block_values["temperature"], table)
        np.testing.assert_array_equal(run.fit.latent_mean(), f.latent_mean())
        np.testing.assert_array_equal(run.fit.latent_sd(), f.latent_sd())

    def test_forced_mean_single_resample_equals_plugin(self, small_inputs):
        plugin = br.run_plugin(small_inputs)
        res = br.run_resampling(small_inputs, 1, seed=3, force_mean=True, plugin=plugin)
        a = br.mixture_table(res.mixture)
        b = _fixed_table(plugin)
        np.testing.assert_array_equal(a[["mean", "sd"]].to_numpy(), b[["mean", "sd"]].to_numpy())

    def test_zero_stage1_variance_mixture_sd(self, small_inputs):
        deg = degenerate_stage1(small_inputs.climate["temperature"].fit)
        inputs = dataclasses.replace(small_inputs, climate={"temperature": br.ClimateSource(deg)})
        plugin = br.run_plugin(inputs)
        res = br.run_resampling(inputs, 3, seed=5, plugin=plugin)
        names = plugin.model.meta["fixed_names"]
        ref = {q.name: q for q in br.plugin_mixture(plugin)}
        for n in names:
            assert res.quantity(n).sd == pytest.approx(ref[n].sd, abs=1e-8)
            assert res.quantity(n).between == pytest.approx(0.0, abs=1e-16)

    def test_resampling_reproducible_and_mixture_identity(self, small_inputs):
        plugin = br.run_plugin(small_inputs)
        a = br.run_resampling(small_inputs, 3, seed=11, plugin=plugin)
        b = br.run_resampling(small_inputs, 3, seed=11, plugin=plugin)
        ta, tb = br.mixture_table(a.mixture), br.mixture_table(b.mixture)
        np.testing.assert_array_equal(ta[["mean", "sd"]].to_numpy(), tb[["mean", "sd"]].to_numpy())
        q = a.quantity("temperature")
        assert abs(q.var - (q.within + q.between)) <= 1e-10
        assert q.var >= q.within
        assert len(a.trace) == 3 and math.isnan(a.trace["max_rel_sd_change"][0])
        cov = a.covariance()
        assert set(cov) == {"fixed", "random", "cross"}
        assert list(cov["random"].index) == ["psi", "nu", "zeta", "upsilon"]
        assert a.provenance["J_effective"] == 3

    def test_failed_resample_dropped(self, small_inputs, monkeypatch):
        plugin = br.run_plugin(small_inputs)
        real = br.fit_with_covariates
        calls = {"n": 0}

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] == 2:
                raise np.linalg.LinAlgError("singular")
            return real(*a, **k)

        monkeypatch.setattr(br, "fit_with_covariates", flaky)
        with pytest.warns(RuntimeWarning, match="resample 1 failed"):
            res = br.run_resampling(small_inputs, 3, seed=2, plugin=plugin)
        assert res.J_effective == 2 and res.dropped == (1,)

    def test_all_resamples_fail(self, small_inputs, monkeypatch):
        plugin = br.run_plugin(small_inputs)

        def boom(*a, **k):
            raise ValueError("boom")

        monkeypatch.setattr(br, "fit_with_covariates", boom)
        with pytest.warns(RuntimeWarning), pytest.raises(br.TwoStageError):
            br.run_resampling(small_inputs, 2, seed=2, plugin=plugin)

    def test_rejects_bad_j(self, small_inputs):
        with pytest.raises(ValueError):
            br.run_resampling(small_inputs, 0, seed=1)

    def test_fusion_point_weight(self, small_inputs):
        fit = small_inputs.climate["temperature"].fit
        c0 = fit.components[0]
        shifted = degenerate_stage1(fit, c0.fit.latent_mean() + 5.0).components[0]
        one = cl.Stage1Fit(fit.spec, (dataclasses.replace(c0, weight=1.0), dataclasses.replace(shifted, weight=0.0)),
                           fit.nodes, fit.T, fit.formula)
        a = br.block_covariates(dataclasses.replace(small_inputs, climate={"t": br.ClimateSource(one)}))["t"]
        b = br.block_covariates(dataclasses.replace(small_inputs, climate={"t": br.ClimateSource(fit)}))["t"]
        np.testing.assert_array_equal(a, b)
        rev = cl.Stage1Fit(fit.spec, (dataclasses.replace(shifted, weight=0.0), dataclasses.replace(c0, weight=1.0)),
                           fit.nodes, fit.T, fit.formula)
        c = br.block_covariates(dataclasses.replace(small_inputs, climate={"t": br.ClimateSource(rev)}))["t"]
        np.testing.assert_allclose(c, b, rtol=0, atol=1e-12)

    def test_risk_table(self, small_inputs):
        plugin = br.run_plugin(small_inputs)
        mix = br.plugin_mixture(plugin)
        cells = [q for q in mix if q.name.startswith("lambda[")]
        tab = br.risk_table(cells, small_inputs.panel.area_ids, 4)
        assert len(tab) == 4 * 5
        assert np.all((tab.prob_exceed >= 0) & (tab.prob_exceed <= 1))
        assert np.all(tab.q025 < tab.q975)
