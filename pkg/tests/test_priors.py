import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import expit

from stdm import priors as pr
from stdm.graph import AdjacencyGraph, scaled_icar_from_graph

TRANSFORMS = ["log", "logit", "fisher", "identity"]


@pytest.mark.parametrize("transform, value", [("log", 3.0), ("logit", 0.2), ("fisher", -0.7), ("identity", -1.5)])
def test_round_trip(transform, value):
    assert pr.to_user(transform, pr.to_internal(transform, value)) == pytest.approx(value, rel=1e-12)


@given(st.sampled_from(TRANSFORMS), st.floats(-4, 4))
def test_jacobian_matches_finite_difference(transform, theta):
    h = 1e-6
    d = (pr.to_user(transform, theta + h) - pr.to_user(transform, theta - h)) / (2 * h)
    assert pr.log_jacobian(transform, theta) == pytest.approx(math.log(abs(d)), abs=1e-5)


def test_fisher_is_log_ratio():
    assert pr.to_internal("fisher", 0.5) == pytest.approx(math.log(3.0))


def _mass(logpdf, lo, hi):
    return integrate.quad(lambda t: math.exp(logpdf(t)), lo, hi, limit=400)[0]


@pytest.mark.parametrize("prior", [pr.PCPrecision(1.0, 0.01), pr.PCStdDev(2.0, 0.5), pr.PCMaternRange(50.0, 0.5),
                                   pr.LogGamma(1.0, 5e-5), pr.Normal(0.0, 0.15)])
def test_priors_integrate_to_one(prior):
    assert _mass(prior, -60, 60) == pytest.approx(1.0, abs=1e-6)


def test_pc_precision_tail_contract():
    # P(1/sqrt(tau) > 1) = P(theta < 0) = 0.01
    assert _mass(pr.PCPrecision(1.0, 0.01), -80, 0.0) == pytest.approx(0.01, rel=1e-6)


def test_pc_precision_closed_form():
    lam = -math.log(0.01)
    tau = 2.7
    dens = lam / 2 * tau ** -1.5 * math.exp(-lam / math.sqrt(tau))
    assert pr.PCPrecision(1.0, 0.01)(math.log(tau)) == pytest.approx(math.log(dens * tau), rel=1e-12)


def test_pc_range_contract():
    assert _mass(pr.PCMaternRange(300.0, 0.5), -60, math.log(300.0)) == pytest.approx(0.5, rel=1e-6)


def test_loggamma_matches_scipy():
    t = 1.3
    ref = stats.gamma(a=1.0, scale=1 / 5e-5).logpdf(math.exp(t)) + t
    assert pr.LogGamma(1.0, 5e-5)(t) == pytest.approx(ref, rel=1e-12)


class TestPhiPrior:
    def _prior(self):
        g = AdjacencyGraph.from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (1, 4)])
        sc = scaled_icar_from_graph(g)
        return pr.bym2_phi_prior(sc.structure.toarray(), sc.rank_deficiency)

    def test_contract(self):
        p = self._prior()
        assert _mass(p, -40, 0.0) == pytest.approx(2 / 3, abs=1e-6)

    @pytest.mark.parametrize("t", [-2.0, 1.0, 5.0, 30.0])
    def test_cdf_matches_exponential_distance(self, t):
        # the tail in logit phi is heavy, so compare against the exact cdf instead of full mass
        p = self._prior()
        d = math.sqrt(2 * p._kld(float(expit(t)))[0])
        assert _mass(p, -40, t) == pytest.approx(1 - math.exp(-p._rate() * d), abs=1e-6)

    def test_more_mass_below_half(self):
        p = self._prior()
        assert p(-1.0) > -math.inf
        lo = _mass(p, -40, 0.0)
        assert lo > 1 - lo

    def test_grid_free_density_is_smooth(self):
        p = self._prior()
        th = np.linspace(-8, 8, 161)
        v = np.array([p(t) for t in th])
        assert np.all(np.isfinite(v))
        assert np.max(np.abs(np.diff(v, 2))) < 0.05

    def test_kld_zero_at_base(self):
        p = self._prior()
        assert p._kld(0.0)[0] == 0.0
        assert expit(0.0) == 0.5
