"""Recovering input-dependent noise with the chained sparse model.

The 1-d shipped scenario has a smooth mean and a noise standard
deviation that triples across the input range. A plain GPR can only
report one global noise level; the chained model carries a second
latent GP for the log-variance and recovers the trend. The script fits
both on the same draws and prints the noise each one believes in.
"""

import math

import numpy as np

from hetgp.chained import CgpFitConfig, cgp_fit, latent_posterior
from hetgp.data import fit_transforms
from hetgp.gpr import GprFitConfig, gpr_fit
from hetgp.synthbench import generate_dataset, load_scenario


def main() -> None:
    scenario = load_scenario("S1")
    d_raw = generate_dataset(scenario, 800, master_seed=3)
    d, pipe = fit_transforms(d_raw)

    gpr = gpr_fit(d, GprFitConfig(seed=0))
    hgpr, trace = cgp_fit(d, CgpFitConfig(num_inducing=60, max_iters=300, seed=0))
    print(f"chained fit: {len(trace) - 1} iterations, "
          f"ELBO {trace[0].elbo:.1f} -> {trace[-1].elbo:.1f}")

    flat_sd = pipe.target.scale * math.sqrt(gpr.noise_variance)
    print(f"\nGPR's single noise sd estimate: {flat_sd:.3f} everywhere\n")

    grid = np.linspace(0.0, 1.0, 9)[:, None]
    grid_t = pipe.apply_features(grid)
    a_g, _ = latent_posterior(hgpr.latent_g, grid_t)
    learned_sd = pipe.target.scale * np.exp(0.5 * a_g)
    print("    x   true noise sd   chained sd   flat GPR sd")
    for i, x in enumerate(grid[:, 0]):
        true_sd = math.sqrt(scenario.conditional_law([x])[1])
        print(f"  {x:4.2f}   {true_sd:11.3f}   {learned_sd[i]:9.3f}"
              f"   {flat_sd:10.3f}")

    print("\nThe flat estimate splits the difference: it overstates the "
          "quiet left edge\nand understates the noisy right edge, which is "
          "exactly what the chained\nmodel's second latent repairs.")


if __name__ == "__main__":
    main()
