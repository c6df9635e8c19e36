"""State-occupancy forecasting from a fitted transition model.

Occupancy at day ``k * step`` is obtained by starting from a point mass
on the initial state at day 0 and repeatedly applying one-step transition
matrices: the matrix for step ``k`` evaluates the fitted regressions at
follow-up time ``t = k * step`` with gap ``v = step`` (the forecast
assumes assessments on the regular grid being predicted) and a fixed
course index.  Absorbing states contribute unit rows.

Confidence bands come from recomputing the whole curve under every
bootstrap replicate and taking pointwise percentile quantiles.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .estimator import FitResult
from .data_model import format_number
from .resampling import BootstrapSet

__all__ = ["OccupancyCurve", "transition_matrix_at", "predict_occupancy"]


@dataclass
class OccupancyCurve:
    """Occupancy probabilities along a day grid, optionally with bands."""

    states: tuple
    grid: np.ndarray    # (K+1,) days, starting at 0
    probs: np.ndarray   # (K+1, n_states), rows sum to 1
    level: float | None = None
    lower: np.ndarray | None = None  # (K+1, n_states)
    upper: np.ndarray | None = None

    def to_csv(self) -> str:
        """Plot-ready CSV: one row per grid day, one column per state."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["day"] + [f"p_{s}" for s in self.states]
        if self.lower is not None:
            header += [f"lower_{s}" for s in self.states]
            header += [f"upper_{s}" for s in self.states]
        w.writerow(header)
        for k in range(len(self.grid)):
            row = [format_number(self.grid[k])]
            row += [format_number(v) for v in self.probs[k]]
            if self.lower is not None:
                row += [format_number(v) for v in self.lower[k]]
                row += [format_number(v) for v in self.upper[k]]
            w.writerow(row)
        return buf.getvalue()


def _coef_by_origin(fit: FitResult) -> dict:
    return {origin: fit.blocks[origin].coefficients
            for origin in fit.blocks}


def _check_dynamics_complete(fit: FitResult) -> None:
    space = fit.space
    missing = [s for s in space.states
               if s not in space.absorbing and s not in fit.blocks]
    if missing:
        raise ConfigError(
            f"no fitted transition block for state(s) "
            f"{', '.join(repr(s) for s in missing)}; occupancy needs "
            f"dynamics for every non-absorbing state"
        )


def _matrix_from_coefficients(fit: FitResult, coef: dict, covariates,
                              course, day, gap) -> np.ndarray:
    space = fit.space
    S = len(space.states)
    M = np.zeros((S, S))
    cov_arrays = {k: np.asarray([v], dtype=object)
                  for k, v in covariates.items()}
    for i, s in enumerate(space.states):
        if s in space.absorbing:
            M[i, i] = 1.0
            continue
        block = fit.blocks[s]
        z = fit.spec.encode(
            s, courses=[course], days=[day], gaps=[gap],
            covariates=cov_arrays,
        )[0]
        eta = coef[s] @ z  # (d,)
        m = max(float(eta.max(initial=0.0)), 0.0)
        denom = np.exp(-m) + np.exp(eta - m).sum()
        p_nonref = np.exp(eta - m) / denom
        M[i, space.index(block.reference)] = np.exp(-m) / denom
        for k, dest in enumerate(block.destinations):
            M[i, space.index(dest)] = p_nonref[k]
    return M


def transition_matrix_at(fit: FitResult, covariates, course: int = 1,
                         day: float = 0.0, gap: float = 61.0) -> np.ndarray:
    """One-step transition matrix at given follow-up time and gap.

    Args:
        fit: converged fit with a block for every non-absorbing state.
        covariates: mapping of covariate name to a scalar value.
        course: course index fed to the course-category coding.
        day: follow-up day of the origin visit.
        gap: days until the next assessment.

    Returns:
        Row-stochastic (n_states, n_states) matrix in state order;
        absorbing rows are unit vectors.
    """
    _check_dynamics_complete(fit)
    return _matrix_from_coefficients(
        fit, _coef_by_origin(fit), covariates, course, day, gap
    )


def _curve(fit: FitResult, coef: dict, covariates, course,
           step_days, n_steps, initial_index) -> np.ndarray:
    S = len(fit.space.states)
    probs = np.zeros((n_steps + 1, S))
    probs[0, initial_index] = 1.0
    p = probs[0]
    for k in range(n_steps):
        M = _matrix_from_coefficients(
            fit, coef, covariates, course,
            day=float(k * step_days), gap=float(step_days),
        )
        p = p @ M
        probs[k + 1] = p
    return probs


def predict_occupancy(fit: FitResult, covariates, course: int = 1,
                      step_days: float = 61, horizon_days: float = 366,
                      bootstrap: BootstrapSet | None = None,
                      level: float = 0.95,
                      initial_state=None) -> OccupancyCurve:
    """Forecast state occupancy on a regular assessment grid.

    Args:
        fit: converged fit covering every non-absorbing state.
        covariates: scalar covariate values for the predicted patient.
        course: fixed course index for the whole forecast (a forecast
            covers one course of treatment).
        step_days: grid spacing; each step's regression sees gap =
            ``step_days`` and follow-up time ``t = k * step_days``.
        horizon_days: last grid day; must be a multiple of ``step_days``.
        bootstrap: optional replicate set; when given, the curve is
            recomputed per replicate and pointwise percentile bands at
            ``level`` are attached.
        initial_state: state holding all mass at day 0 (default: the
            first state, where courses start).

    Returns:
        An :class:`OccupancyCurve`; every probability row sums to 1.
    """
    _check_dynamics_complete(fit)
    if step_days <= 0:
        raise ConfigError("step_days must be positive")
    n_steps = round(horizon_days / step_days)
    if abs(n_steps * step_days - horizon_days) > 1e-9:
        raise ConfigError(
            f"horizon_days ({horizon_days}) must be a multiple of "
            f"step_days ({step_days})"
        )
    space = fit.space
    initial = space.states[0] if initial_state is None else initial_state
    initial_index = space.index(initial)

    grid = np.arange(n_steps + 1, dtype=np.float64) * step_days
    probs = _curve(fit, _coef_by_origin(fit), covariates, course,
                   step_days, n_steps, initial_index)

    lower = upper = None
    if bootstrap is not None:
        if not 0 <= level < 1:
            raise ConfigError(f"level must be in [0, 1), got {level}")
        counts = {len(blk.replicates) for blk in bootstrap.blocks.values()}
        if len(counts) > 1:
            raise ConfigError(
                "bootstrap blocks have unequal replicate counts; cannot "
                "align replicates across origin states"
            )
        n_rep = counts.pop() if counts else 0
        if n_rep < 2:
            raise ConfigError("need at least 2 bootstrap replicates for bands")
        for origin in fit.blocks:
            if origin not in bootstrap.blocks:
                raise ConfigError(
                    f"bootstrap set has no replicates for origin {origin!r}"
                )
        curves = np.empty((n_rep, n_steps + 1, len(space.states)))
        for b in range(n_rep):
            coef_b = {
                origin: bootstrap.blocks[origin].replicates[b].reshape(
                    fit.blocks[origin].coefficients.shape)
                for origin in fit.blocks
            }
            curves[b] = _curve(fit, coef_b, covariates, course,
                               step_days, n_steps, initial_index)
        lo_q = (1.0 - level) / 2.0
        lower, upper = np.quantile(
            curves, [lo_q, 1.0 - lo_q], axis=0, method="linear"
        )

    return OccupancyCurve(
        states=space.states, grid=grid, probs=probs,
        level=level if bootstrap is not None else None,
        lower=lower, upper=upper,
    )
