"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written from first principles with
different numerics than the library: the fitter is a derivative-free
optimizer on a likelihood assembled from raw arrays, and the occupancy
oracle samples actual chains instead of multiplying matrices.  Expected
values in the test suite come from these oracles (or from hand
derivations); they are never copied out of the library under test.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp


def multinomial_nll(theta_flat, X, y, n_alternatives):
    """Negative log-likelihood of a multinomial logit, reference form.

    Alternative 0 is the baseline with utility fixed at zero; ``theta``
    holds one coefficient block per non-baseline alternative,
    destination-major.  ``y`` indexes alternatives, 0-based.
    """
    n, p = X.shape
    beta = np.asarray(theta_flat, dtype=float).reshape(n_alternatives - 1, p)
    eta = np.column_stack([np.zeros(n)] + [X @ b for b in beta])
    return float(np.sum(logsumexp(eta, axis=1) - eta[np.arange(n), y]))


def powell_fit(X, y, n_alternatives, *, restarts=1):
    """Derivative-free multinomial logit fit (no gradients anywhere).

    Powell refinement until the objective stops improving, optionally
    from a couple of jittered starts; returns the flat coefficient
    vector, destination-major, baseline excluded.
    """
    n, p = X.shape
    dim = (n_alternatives - 1) * p
    rng = np.random.default_rng(0)
    best = None
    for r in range(restarts):
        start = np.zeros(dim) if r == 0 else rng.normal(0.0, 0.25, dim)
        x = start
        value = np.inf
        for _ in range(12):
            res = minimize(
                multinomial_nll, x, args=(X, y, n_alternatives),
                method="Powell",
                options={"xtol": 1e-12, "ftol": 1e-14, "maxiter": 20000},
            )
            x = res.x
            if value - res.fun < 1e-13:
                value = res.fun
                break
            value = res.fun
        if best is None or value < best[1]:
            best = (x, value)
    return np.asarray(best[0], dtype=float)


def fit_block_oracle(block):
    """Powell-fit a library design block, returning theta in the
    library's destination-major layout for direct comparison."""
    destinations = list(block.destinations)
    ref = destinations.index(block.reference)
    order = [ref] + [k for k in range(len(destinations)) if k != ref]
    remap = np.empty(len(destinations), dtype=int)
    for new, old in enumerate(order):
        remap[old] = new
    y = remap[np.asarray(block.y, dtype=int)]
    return powell_fit(np.asarray(block.X, dtype=float), y,
                      len(destinations))


def finite_difference_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def finite_difference_hessian(f, x, h=1e-4):
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    d = x.size
    H = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        for j in range(i, d):
            ej = np.zeros(d)
            ej[j] = h
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej)
                - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h * h)
    return H


def mc_occupancy(matrices, initial_index, n_chains, seed):
    """Monte Carlo state-occupancy estimate from explicit chain sampling.

    Args:
        matrices: sequence of (n_states, n_states) one-step transition
            matrices, one per grid step.
        initial_index: state index holding all chains at step 0.
        n_chains: number of simulated chains.
        seed: RNG seed.

    Returns:
        (occupancy, se): arrays of shape (len(matrices)+1, n_states);
        ``occupancy[k]`` is the fraction of chains in each state after k
        steps, ``se`` the binomial standard error of each fraction.
    """
    rng = np.random.default_rng(seed)
    n_states = np.asarray(matrices[0]).shape[0]
    state = np.full(n_chains, initial_index, dtype=np.int64)
    occ = np.zeros((len(matrices) + 1, n_states))
    occ[0, initial_index] = 1.0
    se = np.zeros_like(occ)
    for k, P in enumerate(matrices):
        cumulative = np.cumsum(np.asarray(P, dtype=float), axis=1)
        u = rng.random(n_chains)
        # next state = first cumulative cell reaching u, row by row
        state = (u[:, None] > cumulative[state]).sum(axis=1)
        state = np.minimum(state, n_states - 1)
        counts = np.bincount(state, minlength=n_states)
        frac = counts / n_chains
        occ[k + 1] = frac
        se[k + 1] = np.sqrt(frac * (1.0 - frac) / n_chains)
    return occ, se
