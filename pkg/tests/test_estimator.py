"""Newton fitting of the per-origin multinomial regressions."""

import math

import numpy as np
import pytest

from visitchain import (
    ConvergenceError,
    DesignBlock,
    FitResult,
    SeparationError,
    StateSpace,
    ModelSpec,
    build_transitions,
    fit,
    fit_block,
    information,
    loglik,
    score,
)
from visitchain.data_model import VisitRecord

from _oracles import (
    fit_block_oracle,
    finite_difference_gradient,
    finite_difference_hessian,
)


def make_block(X, y, n_states, practice_codes=None):
    """Hand-built design block: states 1..n, reference 1, y indexes states."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    codes = (np.zeros(n, dtype=np.int64) if practice_codes is None
             else np.asarray(practice_codes, dtype=np.int64))
    return DesignBlock(
        origin=1,
        feature_names=tuple(f"x{j}" for j in range(X.shape[1])),
        destinations=tuple(range(1, n_states + 1)),
        reference=1,
        X=X,
        y=y,
        practice_codes=codes,
        patient_ids=np.array([f"p{i}" for i in range(n)], dtype=object),
        courses=np.ones(n, dtype=np.int64),
        visits=np.ones(n, dtype=np.int64),
    )


def random_block(rng, n=120, p=3, n_states=3):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    theta = rng.normal(scale=0.6, size=(n_states - 1) * p)
    beta = theta.reshape(n_states - 1, p)
    eta = np.column_stack([np.zeros(n), X @ beta.T])
    prob = np.exp(eta - eta.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    y = np.array([rng.choice(n_states, p=row) for row in prob])
    return make_block(X, y, n_states)


# ---------------------------------------------------------------------------
# Closed-form optima
# ---------------------------------------------------------------------------

def test_intercept_only_three_destinations():
    # 2 reference, 5 to state 2, 3 to state 3: intercepts are log frequency
    # ratios against the reference
    y = [0] * 2 + [1] * 5 + [2] * 3
    block = make_block([[1.0]] * 10, y, 3)
    result = fit_block(block)
    assert result.coefficients[0, 0] == pytest.approx(math.log(2.5),
                                                      abs=1e-10)
    assert result.coefficients[1, 0] == pytest.approx(math.log(1.5),
                                                      abs=1e-10)
    assert result.converged
    assert result.grad_norm <= 1e-8


def test_intercept_only_binary():
    block = make_block([[1.0]] * 10, [0] * 7 + [1] * 3, 2)
    result = fit_block(block)
    assert result.coefficients[0, 0] == pytest.approx(math.log(3 / 7),
                                                      abs=1e-10)


def test_loglik_at_optimum_matches_multinomial_entropy():
    y = [0] * 4 + [1] * 6
    block = make_block([[1.0]] * 10, y, 2)
    result = fit_block(block)
    expected = 4 * math.log(0.4) + 6 * math.log(0.6)
    assert result.loglik == pytest.approx(expected, abs=1e-10)


def test_information_single_row_at_zero():
    block = make_block([[1.0]], [0], 2)
    info = information(block, np.zeros(1))
    assert info.shape == (1, 1)
    assert info[0, 0] == pytest.approx(0.25, abs=1e-14)


def test_score_at_zero_counts_departures_from_uniform():
    # at theta = 0 each destination has probability 1/3; the score for an
    # intercept is (observed count) - n/3
    y = [0] * 3 + [1] * 7  # 3 ref, 7 to "2", 0 to "3"
    block = make_block([[1.0]] * 10, y, 3)
    u = score(block, np.zeros(2))
    assert u[0] == pytest.approx(7 - 10 / 3)
    assert u[1] == pytest.approx(0 - 10 / 3)


# ---------------------------------------------------------------------------
# Derivative correctness
# ---------------------------------------------------------------------------

def test_score_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(3):
        block = random_block(rng)
        theta = rng.normal(scale=0.3, size=2 * 3)
        analytic = score(block, theta)
        numeric = finite_difference_gradient(
            lambda t: loglik(block, t), theta)
        assert np.allclose(analytic, numeric, rtol=1e-6, atol=1e-6)


def test_information_matches_finite_differences():
    rng = np.random.default_rng(12)
    block = random_block(rng)
    theta = rng.normal(scale=0.3, size=6)
    analytic = information(block, theta)
    numeric = -finite_difference_hessian(lambda t: loglik(block, t), theta)
    assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-7)
    assert np.allclose(analytic, analytic.T)
    assert np.all(np.linalg.eigvalsh(analytic) > 0)


def test_weighted_kernels_match_row_duplication():
    rng = np.random.default_rng(13)
    block = random_block(rng, n=40)
    w = rng.integers(0, 4, size=40).astype(float)
    idx = np.repeat(np.arange(40), w.astype(int))
    dup = make_block(block.X[idx], block.y[idx], 3)
    theta = rng.normal(scale=0.2, size=6)
    assert loglik(block, theta, w) == pytest.approx(loglik(dup, theta))
    assert np.allclose(score(block, theta, w), score(dup, theta))
    assert np.allclose(information(block, theta, w), information(dup, theta))


# ---------------------------------------------------------------------------
# Newton solver
# ---------------------------------------------------------------------------

def test_newton_matches_derivative_free_oracle():
    rng = np.random.default_rng(14)
    for _ in range(2):
        block = random_block(rng, n=200, p=3, n_states=3)
        ours = fit_block(block).theta
        oracle = fit_block_oracle(block)
        assert np.max(np.abs(ours - oracle)) < 1e-6


def test_warm_start_reaches_the_same_optimum():
    rng = np.random.default_rng(15)
    block = random_block(rng)
    cold = fit_block(block)
    warm = fit_block(block, start=cold.theta + 0.05)
    assert np.allclose(cold.theta, warm.theta, atol=1e-8)
    assert warm.iterations <= cold.iterations


def test_perfect_separation_is_reported():
    # covariate scale 0.1 forces the diverging slope past the bound
    X = [[1.0, -0.2], [1.0, -0.1], [1.0, 0.1], [1.0, 0.2]] * 5
    y = [0, 0, 1, 1] * 5
    block = make_block(X, y, 2)
    with pytest.raises(SeparationError, match="separate"):
        fit_block(block)


def test_empty_destination_is_reported():
    block = make_block([[1.0]] * 6, [0, 0, 0, 1, 1, 1], 3)
    with pytest.raises(SeparationError, match="no.*observations"):
        fit_block(block)


def test_weights_can_empty_the_reference():
    block = make_block([[1.0]] * 4, [0, 0, 1, 1], 2)
    with pytest.raises(SeparationError, match="reference"):
        fit_block(block, weights=np.array([0.0, 0.0, 1.0, 1.0]))


def test_iteration_cap_raises_convergence_error():
    rng = np.random.default_rng(16)
    block = random_block(rng)
    with pytest.raises(ConvergenceError, match="iterations"):
        fit_block(block, max_iter=1)


# ---------------------------------------------------------------------------
# Whole-model fit
# ---------------------------------------------------------------------------

def _simulated_visits(rng, n_patients=150):
    rows = []
    for p in range(n_patients):
        day, state = 0.0, 1
        rows.append(VisitRecord(f"g{p % 10}", f"p{p}", 1, 1, day, state,
                                {"dose": ("low", "high")[p % 2]}))
        for k in range(2, 6):
            day += float(rng.integers(20, 60))
            state = int(rng.choice([1, 2, 3, 4], p=[0.3, 0.4, 0.2, 0.1]))
            rows.append(VisitRecord(f"g{p % 10}", f"p{p}", 1, k, day, state,
                                    {"dose": ("low", "high")[p % 2]}))
            if state == 4:
                break
    return rows


def test_fit_covers_observed_origins_and_sums_logliks():
    rng = np.random.default_rng(17)
    spec = ModelSpec(space=StateSpace(),
                     covariates=(), max_course_category=None,
                     time_transform="none", gap_transform="none")
    ts = build_transitions(_simulated_visits(rng), spec)
    result = fit(ts)
    assert set(result.blocks) == set(ts.blocks)
    assert result.loglik == pytest.approx(
        sum(b.loglik for b in result.blocks.values()))
    assert result.converged
    assert result.n_rows == len(ts)


def test_practice_weights_shape_is_validated():
    rng = np.random.default_rng(18)
    spec = ModelSpec(space=StateSpace(), max_course_category=None,
                     time_transform="none", gap_transform="none")
    ts = build_transitions(_simulated_visits(rng), spec)
    with pytest.raises(ValueError, match="practice_weights"):
        fit(ts, practice_weights=np.ones(3))


def test_zero_weight_practices_drop_out():
    rng = np.random.default_rng(19)
    spec = ModelSpec(space=StateSpace(), max_course_category=None,
                     time_transform="none", gap_transform="none")
    rows = _simulated_visits(rng)
    ts = build_transitions(rows, spec)
    keep = [lab for lab in ts.practice_labels if lab != "g0"]
    sub = build_transitions([r for r in rows if r.practice_id != "g0"], spec)
    w = np.array([0.0 if lab == "g0" else 1.0 for lab in ts.practice_labels])
    weighted = fit(ts, practice_weights=w)
    direct = fit(sub)
    assert keep == list(sub.practice_labels)
    for origin in direct.blocks:
        assert np.allclose(weighted.blocks[origin].theta,
                           direct.blocks[origin].theta, atol=1e-9)


def test_fit_result_json_round_trip():
    rng = np.random.default_rng(20)
    spec = ModelSpec(space=StateSpace(),
                     covariates=(), max_course_category=None,
                     time_transform="none", gap_transform="none")
    ts = build_transitions(_simulated_visits(rng), spec)
    result = fit(ts)
    again = FitResult.from_json(result.to_json())
    assert again.loglik == result.loglik
    assert again.n_practices == result.n_practices
    for origin, b in result.blocks.items():
        assert np.array_equal(again.blocks[origin].coefficients,
                              b.coefficients)
        # the lower triangle is what is stored; the upper is mirrored
        back = again.blocks[origin].sigma
        assert np.array_equal(np.tril(back), np.tril(b.sigma))
        assert np.allclose(back, b.sigma, rtol=0, atol=1e-15)
        assert again.blocks[origin].feature_names == b.feature_names


def test_coefficient_csv_layout():
    block = make_block([[1.0]] * 10, [0] * 5 + [1] * 5, 2)
    fitted = fit_block(block)
    result = FitResult(
        spec=ModelSpec(space=StateSpace(states=(1, 2), absorbing=frozenset()),
                       max_course_category=None, time_transform="none",
                       gap_transform="none"),
        blocks={1: fitted}, loglik=fitted.loglik, n_rows=10, n_practices=1)
    lines = result.coefficient_csv().splitlines()
    assert lines[0] == "origin,destination,predictor,estimate,odds_ratio"
    origin, dest, name, est, odds = lines[1].split(",")
    assert (origin, dest, name) == ("1", "2", "x0")
    assert float(est) == pytest.approx(0.0, abs=1e-12)
    assert float(odds) == pytest.approx(1.0, abs=1e-12)


def test_coefficient_index_lookup():
    y = [0] * 2 + [1] * 5 + [2] * 3
    block = make_block([[1.0]] * 10, y, 3)
    fitted = fit_block(block)
    assert fitted.coefficient_index(2, "x0") == 0
    assert fitted.coefficient_index(3, "x0") == 1
    assert fitted.theta[fitted.coefficient_index(3, "x0")] == \
        pytest.approx(math.log(1.5), abs=1e-10)
