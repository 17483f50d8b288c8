import numpy as np
import pytest

from stdm import climate as cl, health as hl, simulate as sim

SMALL = sim.StudyDesign(nrow=2, ncol=2, singletons=1, points_per_side=2, n_stations=10, T=4)


@pytest.fixture(scope="session")
def small_study():
    study = sim.synthetic_study(1, SMALL)
    fit = cl.fit_stage1(cl.Stage1Spec(), study.stations)
    return study, fit


@pytest.fixture(scope="session")
def small_inputs(small_study):
    study, fit = small_study
    return sim.study_inputs(study, fit, hl.HealthSpec(formula="temperature", interaction="II"))


def degenerate_stage1(fit: cl.Stage1Fit, x: np.ndarray | None = None) -> cl.Stage1Fit:
    """Copy of a stage-1 fit whose posterior is a point mass (at its mean unless ``x`` is given)."""
    from stdm import lgm

    comps = []
    for c in fit.components:
        mean = c.fit.latent_mean() if x is None else x
        pt = lgm.ThetaPoint(c.fit.theta_mode, 1.0, lgm.GaussianApprox.from_moments(mean), 0.0)
        f0 = lgm.LgmFit((pt,), c.fit.hyper_names, c.fit.transforms, c.fit.theta_mode, None, c.fit.log_mlik)
        comps.append(cl.Stage1Component(c.alpha1, c.model, f0, c.weight))
    return cl.Stage1Fit(fit.spec, tuple(comps), fit.nodes, fit.T, fit.formula)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
