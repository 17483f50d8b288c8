"""Compare the Laplace engine with the MCMC oracle on a small Poisson toy.

Prints the per-coordinate mean gap (in posterior SDs) and SD ratio.
"""

import argparse
import time
import warnings

import numpy as np

from stdm import health as hl, oracle, simulate as sim


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nrow", type=int, default=3)
    ap.add_argument("--ncol", type=int, default=3)
    ap.add_argument("--T", type=int, default=6)
    ap.add_argument("--expected", type=float, default=30.0)
    ap.add_argument("--iterations", type=int, default=10_000)
    ap.add_argument("--strategy", default="sample", choices=["mode", "axis", "sample"])
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args(argv)
    warnings.simplefilter("ignore", RuntimeWarning)

    g = sim.lattice_graph(args.nrow, args.ncol, 1)
    S = g.n_areas
    spec = hl.HealthSpec(formula="", interaction="II", iid_time=False)
    E = np.full((args.T, S), args.expected)
    panel, _ = sim.simulate_health(sim.HealthTruth(), spec, g, E, args.seed)
    model = hl.assemble_health(spec, panel, hl.ExpectedTable(E, np.ones(args.T)), None, g)
    t0 = time.perf_counter()
    fit, _ = hl.fit_health(model, strategy=args.strategy, diagnostics=False)
    t1 = time.perf_counter()
    out = oracle.mcmc_converged(model, iterations=args.iterations, burn_in=args.iterations // 5, seed=args.seed,
                                start=fit)
    t2 = time.perf_counter()
    sd = out.latent_sd()
    gap = np.abs(fit.latent_mean() - out.latent_mean()) / sd
    ratio = fit.latent_sd() / sd
    print(f"latent dimension {model.n_latent}, laplace {t1 - t0:.1f} s, mcmc {t2 - t1:.1f} s")
    print(f"max R-hat {out.max_rhat():.3f}, acceptance {out.acceptance}")
    print(f"mean gap / SD: max {gap.max():.3f}, median {np.median(gap):.3f}")
    print(f"SD ratio: min {ratio.min():.3f}, max {ratio.max():.3f}")


if __name__ == "__main__":
    main()
