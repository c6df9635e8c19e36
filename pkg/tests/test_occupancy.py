"""Occupancy forecasting: matrix products, bands, and an MC cross-check."""

import numpy as np
import pytest

from visitchain import (
    ConfigError,
    ModelSpec,
    StateSpace,
    build_transitions,
    direct_bootstrap,
    efb,
    fit,
    predict_occupancy,
    transition_matrix_at,
)
from visitchain.data_model import VisitRecord
from visitchain.simulator import SimConfig, generate, two_state_spec

from _oracles import mc_occupancy


def four_state_visits(seed=23, n_patients=300):
    rng = np.random.default_rng(seed)
    rows = []
    for p in range(n_patients):
        day, state = 0.0, 1
        rows.append(VisitRecord(f"g{p % 10}", f"p{p}", 1, 1, day, state))
        for k in range(2, 7):
            day += float(rng.integers(20, 60))
            state = int(rng.choice([1, 2, 3, 4], p=[0.35, 0.3, 0.25, 0.1]))
            rows.append(VisitRecord(f"g{p % 10}", f"p{p}", 1, k, day, state))
            if state == 4:
                break
    return rows


def intercept_only_spec():
    return ModelSpec(space=StateSpace(), max_course_category=None,
                     time_transform="none", gap_transform="none")


@pytest.fixture(scope="module")
def chronic_fit():
    """Four-state model, state 4 absorbing, intercept-only dynamics."""
    ts = build_transitions(four_state_visits(), intercept_only_spec())
    return ts, fit(ts)


@pytest.fixture(scope="module")
def sim_fit():
    """Two-state recurring model fitted to one simulated dataset."""
    config = SimConfig.benchmark(n_practices=12, seed=5)
    ts = build_transitions(generate(config), two_state_spec())
    return ts, fit(ts)


SIM_COVARIATES = {"dose": "medium", "sulphate": 1.0}


# ---------------------------------------------------------------------------
# One-step matrices
# ---------------------------------------------------------------------------

def test_transition_matrix_rows_are_stochastic(chronic_fit):
    _, fitted = chronic_fit
    M = transition_matrix_at(fitted, {}, day=0.0, gap=61.0)
    assert M.shape == (4, 4)
    assert np.all(M >= 0)
    assert np.allclose(M.sum(axis=1), 1.0, atol=1e-14)


def test_absorbing_row_is_a_unit_vector(chronic_fit):
    _, fitted = chronic_fit
    M = transition_matrix_at(fitted, {}, day=61.0, gap=61.0)
    assert np.array_equal(M[3], [0.0, 0.0, 0.0, 1.0])


def test_matrix_probabilities_match_block_frequencies(chronic_fit):
    # intercept-only dynamics reduce to observed transition frequencies
    ts, fitted = chronic_fit
    M = transition_matrix_at(fitted, {}, day=0.0, gap=61.0)
    counts = np.zeros((4, 4))
    for r in ts.rows():
        counts[r.origin - 1, r.destination - 1] += 1
    freq = counts[:3] / counts[:3].sum(axis=1, keepdims=True)
    assert np.allclose(M[:3], freq, atol=1e-9)


# ---------------------------------------------------------------------------
# Occupancy curves
# ---------------------------------------------------------------------------

def test_day_zero_is_a_point_mass(chronic_fit):
    _, fitted = chronic_fit
    curve = predict_occupancy(fitted, {})
    assert np.array_equal(curve.probs[0], [1.0, 0.0, 0.0, 0.0])
    assert curve.grid[0] == 0.0
    assert curve.grid[-1] == 366.0
    assert len(curve.grid) == 7


def test_initial_state_override(chronic_fit):
    _, fitted = chronic_fit
    curve = predict_occupancy(fitted, {}, initial_state=2)
    assert np.array_equal(curve.probs[0], [0.0, 1.0, 0.0, 0.0])
    with pytest.raises(ConfigError, match="unknown state"):
        predict_occupancy(fitted, {}, initial_state=9)


def test_rows_sum_to_one(sim_fit):
    _, fitted = sim_fit
    curve = predict_occupancy(fitted, SIM_COVARIATES, horizon_days=610)
    assert np.all(curve.probs >= 0)
    assert np.max(np.abs(curve.probs.sum(axis=1) - 1.0)) <= 1e-12


def test_absorbing_occupancy_is_nondecreasing(chronic_fit):
    _, fitted = chronic_fit
    curve = predict_occupancy(fitted, {}, horizon_days=610)
    dead = curve.probs[:, 3]
    assert np.all(np.diff(dead) >= -1e-15)


def test_curve_equals_matrix_power_when_dynamics_are_constant(sim_fit):
    # no follow-up-time features and a fixed gap: one matrix drives all
    # steps, so occupancy is p0 @ M^k exactly
    _, fitted = sim_fit
    M = transition_matrix_at(fitted, SIM_COVARIATES, day=0.0, gap=61.0)
    curve = predict_occupancy(fitted, SIM_COVARIATES)
    p0 = np.array([1.0, 0.0])
    for k in range(len(curve.grid)):
        assert np.allclose(curve.probs[k],
                           p0 @ np.linalg.matrix_power(M, k), atol=1e-13)


def test_occupancy_matches_monte_carlo(chronic_fit):
    _, fitted = chronic_fit
    steps = 6
    matrices = [transition_matrix_at(fitted, {}, day=61.0 * k, gap=61.0)
                for k in range(steps)]
    curve = predict_occupancy(fitted, {}, step_days=61, horizon_days=366)
    occ, se = mc_occupancy(matrices, 0, n_chains=200_000, seed=77)
    gap = np.abs(curve.probs[1:] - occ[1:])
    assert np.all(gap <= 4.0 * np.maximum(se[1:], 1e-6))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def test_grid_validation(chronic_fit):
    _, fitted = chronic_fit
    with pytest.raises(ConfigError, match="step_days"):
        predict_occupancy(fitted, {}, step_days=0)
    with pytest.raises(ConfigError, match="multiple"):
        predict_occupancy(fitted, {}, step_days=61, horizon_days=100)


def test_every_nonabsorbing_state_needs_a_block():
    rows = [
        VisitRecord("g1", "p1", 1, 1, 0.0, 1),
        VisitRecord("g1", "p1", 1, 2, 10.0, 1),
        VisitRecord("g1", "p1", 1, 3, 20.0, 2),
        VisitRecord("g1", "p1", 1, 4, 30.0, 3),
        VisitRecord("g1", "p2", 1, 1, 0.0, 1),
        VisitRecord("g1", "p2", 1, 2, 10.0, 4),
        VisitRecord("g1", "p3", 1, 1, 0.0, 1),
        VisitRecord("g1", "p3", 1, 2, 12.0, 2),
        VisitRecord("g1", "p3", 1, 3, 25.0, 4),
        VisitRecord("g1", "p4", 1, 1, 0.0, 1),
        VisitRecord("g1", "p4", 1, 2, 14.0, 2),
        VisitRecord("g1", "p4", 1, 3, 28.0, 1),
        VisitRecord("g1", "p5", 1, 1, 0.0, 1),
        VisitRecord("g1", "p5", 1, 2, 16.0, 2),
        VisitRecord("g1", "p5", 1, 3, 30.0, 2),
        VisitRecord("g1", "p5", 1, 4, 44.0, 3),
        VisitRecord("g1", "p6", 1, 1, 0.0, 1),
        VisitRecord("g1", "p6", 1, 2, 18.0, 3),
    ]
    # state 3 only ever ends a course, so its dynamics are unidentified
    fitted = fit(build_transitions(rows, intercept_only_spec()))
    assert 3 not in fitted.blocks
    with pytest.raises(ConfigError, match="3"):
        predict_occupancy(fitted, {})


# ---------------------------------------------------------------------------
# Bootstrap bands
# ---------------------------------------------------------------------------

def test_bands_bracket_the_point_curve(chronic_fit):
    ts, fitted = chronic_fit
    reps = efb(fitted, ts, 200, 0)
    curve = predict_occupancy(fitted, {}, bootstrap=reps, level=0.9)
    assert curve.level == 0.9
    assert curve.lower.shape == curve.probs.shape
    assert np.all(curve.lower <= curve.probs + 1e-12)
    assert np.all(curve.upper >= curve.probs - 1e-12)
    assert np.all(curve.lower >= -0.25)  # one-step replicates can stray
    assert np.all(curve.upper <= 1.25)


def test_band_width_shrinks_with_tighter_level(chronic_fit):
    ts, fitted = chronic_fit
    reps = efb(fitted, ts, 200, 0)
    wide = predict_occupancy(fitted, {}, bootstrap=reps, level=0.95)
    narrow = predict_occupancy(fitted, {}, bootstrap=reps, level=0.5)
    assert np.all((wide.upper - wide.lower)
                  >= (narrow.upper - narrow.lower) - 1e-12)


def test_direct_replicate_bands_too(chronic_fit):
    ts, fitted = chronic_fit
    reps = direct_bootstrap(ts, 40, 1, fit=fitted)
    curve = predict_occupancy(fitted, {}, bootstrap=reps)
    assert curve.lower is not None and curve.upper is not None


def test_band_validation(chronic_fit):
    ts, fitted = chronic_fit
    reps = efb(fitted, ts, 50, 0)
    with pytest.raises(ConfigError, match="level"):
        predict_occupancy(fitted, {}, bootstrap=reps, level=1.0)
    reps.blocks[1].replicates = reps.blocks[1].replicates[:10]
    with pytest.raises(ConfigError, match="unequal"):
        predict_occupancy(fitted, {}, bootstrap=reps)


def test_bands_need_replicates_for_every_origin(chronic_fit):
    ts, fitted = chronic_fit
    reps = efb(fitted, ts, 50, 0)
    del reps.blocks[2]
    with pytest.raises(ConfigError, match="origin"):
        predict_occupancy(fitted, {}, bootstrap=reps)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def test_csv_layout_without_bands(chronic_fit):
    _, fitted = chronic_fit
    text = predict_occupancy(fitted, {}).to_csv()
    lines = text.splitlines()
    assert lines[0] == "day,p_1,p_2,p_3,p_4"
    assert len(lines) == 8
    first = lines[1].split(",")
    assert float(first[0]) == 0.0
    assert float(first[1]) == 1.0


def test_csv_layout_with_bands(chronic_fit):
    ts, fitted = chronic_fit
    reps = efb(fitted, ts, 50, 0)
    text = predict_occupancy(fitted, {}, bootstrap=reps).to_csv()
    header = text.splitlines()[0].split(",")
    assert header == (
        ["day"] + [f"p_{s}" for s in (1, 2, 3, 4)]
        + [f"lower_{s}" for s in (1, 2, 3, 4)]
        + [f"upper_{s}" for s in (1, 2, 3, 4)]
    )
