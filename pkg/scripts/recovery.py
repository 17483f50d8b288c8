"""Coverage of 90% intervals for the fixed effects over simulated replicates."""

import argparse
import warnings

import numpy as np

from stdm import health as hl, simulate as sim


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--interaction", default="II", choices=["I", "II", "III", "IV"])
    ap.add_argument("--gamma1", type=float, default=0.3)
    ap.add_argument("--strategy", default="sample", choices=["mode", "axis", "sample"])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    warnings.simplefilter("ignore", RuntimeWarning)

    g = sim.lattice_graph(3, 3, 1)
    T, S = 6, g.n_areas
    E = np.full((T, S), 30.0)
    gamma = {"intercept": 0.0, "temperature": args.gamma1}
    spec = hl.HealthSpec(formula="temperature", interaction=args.interaction)
    hits = {k: 0 for k in gamma}
    for r in range(args.replicates):
        x = np.random.default_rng([args.seed, r, 0]).standard_normal((T, S))
        panel, _ = sim.simulate_health(sim.HealthTruth(gamma=gamma), spec, g, E, [args.seed, r, 1],
                                       {"temperature": x})
        model = hl.assemble_health(spec, panel, hl.ExpectedTable(E, np.ones(T)), {"temperature": x}, g)
        fit, _ = hl.fit_health(model, strategy=args.strategy, diagnostics=False)
        tab = hl.fit_summary(fit, model).set_index("parameter")
        for k, v in gamma.items():
            hits[k] += tab.loc[k, "q0.05"] <= v <= tab.loc[k, "q0.95"]
        print(f"replicate {r:>3}: " + ", ".join(f"{k} {tab.loc[k, 'mean']:+.3f}" for k in gamma), flush=True)
    for k, h in hits.items():
        print(f"{k}: 90% interval coverage {h}/{args.replicates}")


if __name__ == "__main__":
    main()
