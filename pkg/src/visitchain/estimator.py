"""Composite-likelihood estimation of the transition regressions.

Transitions are modelled with one multinomial logistic regression per
origin state: for origin ``s`` with non-reference destinations ``s'``,

    log P(dest = s' | z) / P(dest = ref | z) = z . beta[s'],

and all observed transitions are treated as independent, so the total
objective factorizes over origin states and each block is maximized
separately.  Fitting is guarded Newton-Raphson on the exact score and
observed information; the inverse information at the optimum is reported
per block and is what the one-step bootstrap in
:mod:`visitchain.resampling` consumes.

All kernels accept optional per-row weights.  Cluster-bootstrap refits
pass integer practice multiplicities through these weights instead of
materializing resampled rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data_model import DesignBlock, ModelSpec, TransitionSet, format_number
from .errors import ConvergenceError, SeparationError

__all__ = [
    "BlockFit",
    "FitResult",
    "loglik",
    "score",
    "information",
    "score_and_information",
    "fit_block",
    "fit",
]

#: Newton defaults: gradient max-norm tolerance, iteration cap, step-halving
#: cap, and the |coefficient| bound treated as perfect separation.
GRADIENT_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
SEPARATION_BOUND = 30.0


# ---------------------------------------------------------------------------
# Block preparation and kernels
# ---------------------------------------------------------------------------

def _nonref_outcomes(block: DesignBlock) -> np.ndarray:
    """Map destination indices to non-reference column index, -1 = reference."""
    lookup = np.full(len(block.destinations), -1, dtype=np.int64)
    col = 0
    for k, s in enumerate(block.destinations):
        if s != block.reference:
            lookup[k] = col
            col += 1
    return lookup[block.y]


def _shape(block: DesignBlock, theta) -> np.ndarray:
    n_dest = len(block.destinations) - 1
    p = block.X.shape[1]
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size != n_dest * p:
        raise ValueError(
            f"theta has {theta.size} entries, block expects {n_dest}x{p}"
        )
    return theta.reshape(n_dest, p)


def _weights(block: DesignBlock, weights) -> np.ndarray | None:
    if weights is None:
        return None
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (block.n_rows,):
        raise ValueError(f"weights shape {w.shape} != ({block.n_rows},)")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    return w


def _log_probs(X: np.ndarray, beta: np.ndarray):
    """Linear predictors, log-sum-exp with the implicit zero reference
    column, and non-reference probabilities."""
    eta = X @ beta.T  # (n, d)
    m = np.maximum(eta.max(axis=1), 0.0) if eta.shape[1] else np.zeros(len(X))
    lse = m + np.log(
        np.exp(-m) + np.exp(eta - m[:, None]).sum(axis=1)
    )
    P = np.exp(eta - lse[:, None])
    return eta, lse, P


def loglik(block: DesignBlock, theta, weights=None) -> float:
    """Composite log-likelihood of one origin block.

    Args:
        block: design block from :func:`visitchain.build_transitions`.
        theta: flat coefficient vector, destination-major
            (``theta.reshape(n_destinations - 1, n_predictors)``).
        weights: optional (n,) non-negative row weights.

    Returns:
        Sum over rows of the log probability of the observed destination.
    """
    beta = _shape(block, theta)
    w = _weights(block, weights)
    ynr = _nonref_outcomes(block)
    eta, lse, _ = _log_probs(block.X, beta)
    chosen = np.zeros(block.n_rows)
    obs = ynr >= 0
    chosen[obs] = eta[obs, ynr[obs]]
    contrib = chosen - lse
    return float(contrib.sum() if w is None else (w * contrib).sum())


def score(block: DesignBlock, theta, weights=None) -> np.ndarray:
    """Exact gradient of :func:`loglik`, flat and destination-major."""
    return score_and_information(block, theta, weights, want_information=False)[0]


def information(block: DesignBlock, theta, weights=None) -> np.ndarray:
    """Observed information (negated score Jacobian), shape (dim, dim)."""
    return score_and_information(block, theta, weights)[1]


def score_and_information(block: DesignBlock, theta, weights=None,
                          *, want_information=True):
    """Score vector and observed information in one pass.

    The information is assembled as a (d x d) grid of (p x p) blocks with
    entries ``sum_rows w * x x^T * (P_a (1{a=b} - P_b))``, matching the
    destination-major flat layout of theta.
    """
    beta = _shape(block, theta)
    w = _weights(block, weights)
    ynr = _nonref_outcomes(block)
    X = block.X
    n, p = X.shape
    d = beta.shape[0]

    _, _, P = _log_probs(X, beta)
    R = -P
    obs = ynr >= 0
    R[np.flatnonzero(obs), ynr[obs]] += 1.0
    if w is not None:
        Rw = R * w[:, None]
    else:
        Rw = R
    U = (Rw.T @ X).reshape(-1)

    if not want_information:
        return U, None

    H = np.empty((d * p, d * p))
    for a in range(d):
        for b in range(a, d):
            Wab = P[:, a] * ((1.0 if a == b else 0.0) - P[:, b])
            if w is not None:
                Wab = Wab * w
            Hab = X.T @ (Wab[:, None] * X)
            H[a * p:(a + 1) * p, b * p:(b + 1) * p] = Hab
            if b != a:
                H[b * p:(b + 1) * p, a * p:(a + 1) * p] = Hab.T
    return U, H


# ---------------------------------------------------------------------------
# Newton fitting
# ---------------------------------------------------------------------------

@dataclass
class BlockFit:
    """Fitted coefficients and curvature for one origin state.

    ``coefficients[k]`` belongs to ``destinations[k]`` (the non-reference
    states in state order); the reference destination's coefficients are
    identically zero and never stored.  ``sigma`` is the inverse observed
    information at the optimum, in the same flat destination-major layout
    as ``coefficients.ravel()``.
    """

    origin: object
    destinations: tuple
    reference: object
    feature_names: tuple
    coefficients: np.ndarray  # (n_destinations - 1, n_predictors)
    sigma: np.ndarray         # (dim, dim)
    loglik: float
    iterations: int
    converged: bool
    grad_norm: float
    ridge_used: bool
    n_rows: int

    @property
    def theta(self) -> np.ndarray:
        return self.coefficients.reshape(-1)

    @property
    def dim(self) -> int:
        return self.coefficients.size

    def coefficient_index(self, destination, predictor) -> int:
        """Flat index of one named coefficient."""
        k = self.destinations.index(destination)
        j = self.feature_names.index(predictor)
        return k * len(self.feature_names) + j


def _check_destination_support(block: DesignBlock, w) -> None:
    """Every destination, including the reference, needs positive weight."""
    ynr = _nonref_outcomes(block)
    weights = np.ones(block.n_rows) if w is None else w
    ref_weight = weights[ynr < 0].sum()
    if ref_weight == 0:
        raise SeparationError(
            f"origin {block.origin!r}: reference destination "
            f"{block.reference!r} has no observations",
            origin=block.origin, destination=block.reference,
        )
    for col, dest in enumerate(block.nonreference_destinations):
        if weights[ynr == col].sum() == 0:
            raise SeparationError(
                f"origin {block.origin!r}: destination {dest!r} has no "
                f"observations",
                origin=block.origin, destination=dest,
            )


def _solve_spd(H: np.ndarray, rhs: np.ndarray, origin):
    """Solve H x = rhs with a Cholesky factorization; one ridge retry."""
    try:
        return cho_solve(cho_factor(H, lower=True), rhs), False
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-8 * np.trace(H) / H.shape[0]
    Hr = H + ridge * np.eye(H.shape[0])
    try:
        return cho_solve(cho_factor(Hr, lower=True), rhs), True
    except np.linalg.LinAlgError:
        raise ConvergenceError(
            f"origin {origin!r}: information matrix is not positive "
            f"definite even after ridge regularization",
            origin=origin,
        ) from None


def _check_separation(block: DesignBlock, beta: np.ndarray,
                      bound: float) -> None:
    mx = np.abs(beta).max()
    if mx > bound:
        k, j = np.unravel_index(np.argmax(np.abs(beta)), beta.shape)
        dest = block.nonreference_destinations[k]
        raise SeparationError(
            f"origin {block.origin!r}: coefficient of "
            f"{block.feature_names[j]!r} for destination {dest!r} exceeded "
            f"{bound:g} in magnitude; the data separate this destination",
            origin=block.origin, destination=dest,
            predictor=block.feature_names[j],
        )


def fit_block(block: DesignBlock, weights=None, start=None, *,
              tol: float = GRADIENT_TOL, max_iter: int = MAX_ITER,
              max_halvings: int = MAX_HALVINGS,
              separation_bound: float = SEPARATION_BOUND) -> BlockFit:
    """Maximize one origin block by guarded Newton-Raphson.

    Iterates from ``start`` (zero by default) until the score max-norm
    drops to ``tol``, halving any Newton step that fails to increase the
    log-likelihood.  The returned ``sigma`` is the inverse observed
    information at the optimum.

    Raises:
        SeparationError: a destination has zero (weighted) observations,
            or a coefficient passed ``separation_bound`` during iteration.
        ConvergenceError: no ascent step found, or the iteration cap was
            reached with the gradient still above ``tol``.
    """
    w = _weights(block, weights)
    _check_destination_support(block, w)

    d = len(block.destinations) - 1
    p = block.X.shape[1]
    beta = np.zeros((d, p)) if start is None else _shape(block, start).copy()

    ll = loglik(block, beta, w)
    ridge_used = False
    for it in range(max_iter + 1):
        U, H = score_and_information(block, beta, w)
        gnorm = float(np.abs(U).max())
        if gnorm <= tol:
            sigma, ridged = _solve_spd(H, np.eye(d * p), block.origin)
            return BlockFit(
                origin=block.origin,
                destinations=block.nonreference_destinations,
                reference=block.reference,
                feature_names=block.feature_names,
                coefficients=beta,
                sigma=sigma,
                loglik=ll,
                iterations=it,
                converged=True,
                grad_norm=gnorm,
                ridge_used=ridge_used or ridged,
                n_rows=block.n_rows,
            )
        if it == max_iter:
            raise ConvergenceError(
                f"origin {block.origin!r}: gradient max-norm {gnorm:.3e} "
                f"after {max_iter} Newton iterations (tolerance {tol:g})",
                origin=block.origin, iterations=it, grad_norm=gnorm,
            )

        step, ridged = _solve_spd(H, U, block.origin)
        ridge_used = ridge_used or ridged
        step = step.reshape(d, p)
        scale = 1.0
        slack = 1e-12 * (1.0 + abs(ll))
        for _ in range(max_halvings + 1):
            cand = beta + scale * step
            ll_cand = loglik(block, cand, w)
            if ll_cand > ll - slack:
                break
            scale *= 0.5
        else:
            raise ConvergenceError(
                f"origin {block.origin!r}: no ascent step found after "
                f"{max_halvings} halvings at iteration {it} "
                f"(gradient max-norm {gnorm:.3e})",
                origin=block.origin, iterations=it, grad_norm=gnorm,
            )
        beta, ll = cand, ll_cand
        _check_separation(block, beta, separation_bound)

    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Whole-model fit
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    """Per-origin coefficient blocks plus fit-wide bookkeeping.

    ``blocks`` holds one :class:`BlockFit` per origin state observed in
    the data; origins with no transitions are absent, not zero-filled.
    """

    spec: ModelSpec
    blocks: dict
    loglik: float
    n_rows: int
    n_practices: int

    @property
    def space(self):
        return self.spec.space

    @property
    def converged(self) -> bool:
        return all(b.converged for b in self.blocks.values())

    def block_order(self) -> tuple:
        """Fitted origins in state order."""
        return tuple(s for s in self.space.origin_states if s in self.blocks)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        blocks = []
        for origin in self.block_order():
            b = self.blocks[origin]
            dim = b.dim
            tri = [
                [b.sigma[i, j] for j in range(i + 1)] for i in range(dim)
            ]
            blocks.append({
                "origin": origin,
                "reference": b.reference,
                "destinations": list(b.destinations),
                "feature_names": list(b.feature_names),
                "coefficients": [list(map(float, row))
                                 for row in b.coefficients],
                "sigma_lower_triangle": tri,
                "loglik": b.loglik,
                "iterations": b.iterations,
                "converged": b.converged,
                "grad_norm": b.grad_norm,
                "ridge_used": b.ridge_used,
                "n_rows": b.n_rows,
            })
        return {
            "model_spec": self.spec.to_dict(),
            "loglik": self.loglik,
            "n_rows": self.n_rows,
            "n_practices": self.n_practices,
            "blocks": blocks,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        spec = ModelSpec.from_dict(d["model_spec"])
        blocks = {}
        for bd in d["blocks"]:
            coef = np.array(bd["coefficients"], dtype=np.float64)
            if coef.ndim == 1:
                coef = coef.reshape(1, -1)
            dim = coef.size
            sigma = np.zeros((dim, dim))
            for i, row in enumerate(bd["sigma_lower_triangle"]):
                for j, v in enumerate(row):
                    sigma[i, j] = v
                    sigma[j, i] = v
            blocks[bd["origin"]] = BlockFit(
                origin=bd["origin"],
                destinations=tuple(bd["destinations"]),
                reference=bd["reference"],
                feature_names=tuple(bd["feature_names"]),
                coefficients=coef,
                sigma=sigma,
                loglik=float(bd["loglik"]),
                iterations=int(bd["iterations"]),
                converged=bool(bd["converged"]),
                grad_norm=float(bd["grad_norm"]),
                ridge_used=bool(bd["ridge_used"]),
                n_rows=int(bd["n_rows"]),
            )
        return cls(
            spec=spec,
            blocks=blocks,
            loglik=float(d["loglik"]),
            n_rows=int(d["n_rows"]),
            n_practices=int(d["n_practices"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))

    def coefficient_csv(self) -> str:
        """Flat coefficient table: origin, destination, predictor,
        estimate, odds ratio."""
        lines = ["origin,destination,predictor,estimate,odds_ratio"]
        for origin in self.block_order():
            b = self.blocks[origin]
            for k, dest in enumerate(b.destinations):
                for j, name in enumerate(b.feature_names):
                    est = float(b.coefficients[k, j])
                    lines.append(
                        f"{origin},{dest},{name},{format_number(est)},"
                        f"{format_number(float(np.exp(est)))}"
                    )
        return "\n".join(lines) + "\n"


def fit(transitions: TransitionSet, practice_weights=None, *,
        tol: float = GRADIENT_TOL, max_iter: int = MAX_ITER,
        max_halvings: int = MAX_HALVINGS,
        separation_bound: float = SEPARATION_BOUND) -> FitResult:
    """Fit every origin block independently.

    Args:
        transitions: output of :func:`visitchain.build_transitions`.
        practice_weights: optional (n_practices,) non-negative weights,
            broadcast to rows through each block's practice codes.  The
            cluster bootstrap passes resample multiplicities here.

    Returns:
        A :class:`FitResult` whose ``loglik`` is the exact sum of the
        block log-likelihoods.

    Raises:
        SeparationError, ConvergenceError: from any block, tagged with
            the origin state.
    """
    if practice_weights is not None:
        practice_weights = np.asarray(practice_weights, dtype=np.float64)
        if practice_weights.shape != (transitions.n_practices,):
            raise ValueError(
                f"practice_weights shape {practice_weights.shape} != "
                f"({transitions.n_practices},)"
            )

    blocks = {}
    total_ll = 0.0
    n_rows = 0
    for origin in transitions.space.origin_states:
        block = transitions.blocks.get(origin)
        if block is None:
            continue
        w = (practice_weights[block.practice_codes]
             if practice_weights is not None else None)
        fitted = fit_block(
            block, weights=w, tol=tol, max_iter=max_iter,
            max_halvings=max_halvings, separation_bound=separation_bound,
        )
        blocks[origin] = fitted
        total_ll += fitted.loglik
        n_rows += block.n_rows

    return FitResult(
        spec=transitions.spec,
        blocks=blocks,
        loglik=total_ll,
        n_rows=n_rows,
        n_practices=transitions.n_practices,
    )
