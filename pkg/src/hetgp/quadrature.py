"""Gauss-Hermite quadrature of the Gaussian expected log-likelihood.

Shipped as an independent cross-check for the closed-form expression used
during training: the double integral

    E[log N(y | f, e^g)],  f ~ N(a_f, v_f),  g ~ N(a_g, v_g)

evaluated on a tensor grid of Hermite nodes. Slow and honest by design;
use :func:`hetgp.chained.expected_loglik_gaussian` in hot paths.
"""

from __future__ import annotations

import math

import numpy as np


def expected_loglik_gh(
    y: float, a_f: float, v_f: float, a_g: float, v_g: float, num_nodes: int = 50
) -> float:
    """Tensor-product Gauss-Hermite estimate of E[log N(y | f, e^g)].

    ``num_nodes`` nodes per latent dimension; 50 is far past convergence
    for the moderate variances these models see.
    """
    if v_f < 0 or v_g < 0:
        raise ValueError(f"variances must be non-negative, got v_f={v_f}, v_g={v_g}")
    t, w = np.polynomial.hermite.hermgauss(num_nodes)
    f = a_f + math.sqrt(2.0 * v_f) * t  # nodes for f
    g = a_g + math.sqrt(2.0 * v_g) * t  # nodes for g
    # log N(y | f_i, e^{g_j}) over the grid
    ll = (
        -0.5 * math.log(2.0 * math.pi)
        - 0.5 * g[None, :]
        - 0.5 * np.exp(-g)[None, :] * (y - f[:, None]) ** 2
    )
    return float(w @ ll @ w / math.pi)
