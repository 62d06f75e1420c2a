"""Scoring surrogates against replicated simulator runs.

Point errors cannot tell a surrogate that nails the mean but misstates
the spread from one that gets both right. This script builds reference
distributions by replaying the 1-d scenario 100 times at five fixed
inputs, draws predictive samples from a homoscedastic and a
heteroscedastic surrogate trained on identical data, and compares each
to the reference with the normalized 1-Wasserstein distance d_W1
(1-Wasserstein distance divided by the reference standard deviation).
"""

import numpy as np

from hetgp.chained import CgpFitConfig, cgp_fit, cgp_predict_samples
from hetgp.data import fit_transforms
from hetgp.gpr import GprFitConfig, gpr_fit, gpr_predict
from hetgp.metrics import EmpiricalDistribution, normalized_wasserstein
from hetgp.synthbench import (
    derive_seed,
    generate_dataset,
    load_scenario,
    replication_reference,
)


def main() -> None:
    scenario = load_scenario("S1")
    d_raw = generate_dataset(scenario, 800, master_seed=3)
    d, pipe = fit_transforms(d_raw)

    gpr = gpr_fit(d, GprFitConfig(seed=0))
    hgpr, _ = cgp_fit(d, CgpFitConfig(num_inducing=60, max_iters=300, seed=0))

    conditions = np.linspace(0.1, 0.9, 5)[:, None]
    study = replication_reference(scenario, conditions, 100, master_seed=11)

    print("condition   ref sd   d_W1 GPR   d_W1 chained")
    rows = []
    for ci in range(study.num_conditions):
        ref = study.distributions[ci]
        x = conditions[ci]

        mean_t, var_t = gpr_predict(gpr, gpr.scale_features(x[None, :]),
                                    include_noise=True)
        rng = np.random.default_rng(derive_seed(7, ci))
        draws_t = mean_t[0] + np.sqrt(var_t[0]) * rng.standard_normal(5000)
        gpr_draws = pipe.invert_target(draws_t)

        hgpr_draws = cgp_predict_samples(
            hgpr, hgpr.scale_features(x[None, :])[0], 5000, derive_seed(8, ci)
        )

        d_gpr = normalized_wasserstein(ref, EmpiricalDistribution(gpr_draws))
        d_hgpr = normalized_wasserstein(ref, EmpiricalDistribution(hgpr_draws))
        rows.append((d_gpr, d_hgpr))
        print(f"  x = {x[0]:.1f}   {ref.std():6.3f}   {d_gpr:8.3f}   {d_hgpr:12.3f}")

    mean_gpr = np.mean([r[0] for r in rows])
    mean_hgpr = np.mean([r[1] for r in rows])
    print(f"\nmean d_W1: GPR {mean_gpr:.3f}, chained {mean_hgpr:.3f}")
    print("Both models predict nearly the same means; the gap is all in "
          "how well\nthe predicted spread tracks the input-dependent noise.")


if __name__ == "__main__":
    main()
