"""Visit-table handling, transition pairing, and predictor encoding."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visitchain import (
    CategoricalCovariate,
    EncodingError,
    ConfigError,
    ModelSpec,
    NumericCovariate,
    StateSpace,
    VisitDataError,
    VisitRecord,
    VisitTable,
    build_transitions,
    load_visits,
    transition_matrix,
)


def visit(practice, patient, course, idx, day, state, **cov):
    return VisitRecord(practice_id=practice, patient_id=patient,
                       course=course, visit=idx, day=day, state=state,
                       covariates=cov)


def default_spec(**kwargs):
    return ModelSpec(space=StateSpace(), **kwargs)


# ---------------------------------------------------------------------------
# State space
# ---------------------------------------------------------------------------

def test_default_state_space():
    space = StateSpace()
    assert space.states == (1, 2, 3, 4)
    assert space.absorbing == frozenset({4})
    assert space.origin_states == (1, 2, 3)
    assert space.reference_destination == 1


def test_absorbing_states_cannot_be_origins():
    with pytest.raises(ConfigError):
        StateSpace(states=(1, 2), absorbing=frozenset({2}),
                   origin_states=(1, 2))


def test_reference_must_be_a_state():
    with pytest.raises(ConfigError):
        StateSpace(states=(1, 2), absorbing=frozenset(),
                   reference_destination=9)


def test_all_absorbing_rejected():
    with pytest.raises(ConfigError):
        StateSpace(states=(1, 2), absorbing=frozenset({1, 2}))


# ---------------------------------------------------------------------------
# Transition pairing
# ---------------------------------------------------------------------------

def test_two_visit_course_encodes_one_transition():
    rows = [visit("g1", "p1", 1, 1, 0, 1), visit("g1", "p1", 1, 2, 30, 2)]
    ts = build_transitions(rows, default_spec())
    assert len(ts) == 1
    (row,) = ts.rows()
    assert row.origin == 1 and row.destination == 2
    names = ts.spec.feature_names(1)
    feat = dict(zip(names, row.features))
    assert feat["intercept"] == 1.0
    assert feat["time_zero"] == 1.0
    assert feat["log_time"] == pytest.approx(math.log(1.0) - 4.0)
    assert feat["log_gap"] == pytest.approx(math.log(31.0) - 4.0)
    assert feat["log_gap_sq"] == pytest.approx((math.log(31.0) - 4.0) ** 2)
    assert feat["course_2"] == 0.0


def test_nothing_emitted_after_absorbing_arrival():
    rows = [visit("g1", "p1", 1, 1, 0, 1), visit("g1", "p1", 1, 2, 10, 4)]
    ts = build_transitions(rows, default_spec())
    listed = list(ts.rows())
    assert len(listed) == 1
    assert (listed[0].origin, listed[0].destination) == (1, 4)


def test_visit_after_absorbing_state_rejected():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1),
        visit("g1", "p1", 1, 2, 10, 4),
        visit("g1", "p1", 1, 3, 20, 2),
    ]
    with pytest.raises(VisitDataError, match="absorbing"):
        build_transitions(rows, default_spec())


def test_three_course_patient_row_count():
    # courses of 3, 2 and 2 visits: hand enumeration gives 2 + 1 + 1 rows
    rows = [
        visit("g1", "p1", 1, 1, 0, 1),
        visit("g1", "p1", 1, 2, 9, 2),
        visit("g1", "p1", 1, 3, 30, 2),
        visit("g1", "p1", 2, 1, 0, 1),
        visit("g1", "p1", 2, 2, 14, 3),
        visit("g1", "p1", 3, 1, 0, 1),
        visit("g1", "p1", 3, 2, 40, 1),
    ]
    ts = build_transitions(rows, default_spec())
    assert len(ts) == 4
    pairs = [(r.origin, r.destination) for r in ts.rows()]
    assert sorted(pairs) == [(1, 1), (1, 2), (1, 3), (2, 2)]


def test_single_visit_courses_counted_not_modelled():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1),
        visit("g1", "p2", 1, 1, 0, 1),
        visit("g1", "p2", 1, 2, 5, 2),
    ]
    ts = build_transitions(rows, default_spec())
    assert len(ts) == 1
    assert ts.n_singleton_courses == 1


def test_non_increasing_days_name_the_course():
    rows = [visit("g7", "p3", 2, 1, 10, 1), visit("g7", "p3", 2, 2, 10, 2)]
    with pytest.raises(VisitDataError, match=r"g7.*p3.*course 2"):
        build_transitions(rows, default_spec())


def test_course_category_caps_at_configured_maximum():
    rows = []
    for course in (1, 2, 3, 4, 5, 6):
        rows += [visit("g1", "p1", course, 1, 0, 1),
                 visit("g1", "p1", course, 2, 3, 2)]
    ts = build_transitions(rows, default_spec())
    names = ts.spec.feature_names(1)
    block = ts.blocks[1]
    cat = {
        course: {
            n: block.X[i, names.index(n)]
            for n in ("course_2", "course_3", "course_ge4")
        }
        for i, course in enumerate(sorted(
            int(c) for c in block.courses))
    }
    assert cat[1] == {"course_2": 0, "course_3": 0, "course_ge4": 0}
    assert cat[2] == {"course_2": 1, "course_3": 0, "course_ge4": 0}
    assert cat[3] == {"course_2": 0, "course_3": 1, "course_ge4": 0}
    for course in (4, 5, 6):
        assert cat[course] == {"course_2": 0, "course_3": 0, "course_ge4": 1}


def test_time_zero_indicator_only_for_first_state():
    spec = default_spec()
    assert "time_zero" in spec.feature_names(1)
    assert "time_zero" not in spec.feature_names(2)
    assert "time_zero" not in spec.feature_names(3)


@given(st.lists(
    st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4)),
    min_size=1, max_size=25))
@settings(max_examples=60, deadline=None)
def test_row_count_matches_bruteforce_pairing(courses):
    """Row count is the sum of (visits - 1) over courses, origins in
    {1, 2, 3}, stopping at an absorbing arrival."""
    rng = np.random.default_rng(42)
    rows = []
    expected = 0
    for gi, (practice, patient, n_visits) in enumerate(courses):
        day = 0.0
        course = gi + 1  # unique course index per (practice, patient) reuse
        states = [1] + [int(s) for s in rng.integers(1, 5, n_visits - 1)]
        # truncate at first absorbing state
        for k, s in enumerate(states):
            if s == 4 and k + 1 < len(states):
                states = states[:k + 1]
                break
        for k, s in enumerate(states):
            rows.append(visit(f"g{practice}", f"p{patient}", course, k + 1,
                              day, s))
            day += float(rng.integers(1, 9))
        expected += len(states) - 1
    ts = build_transitions(rows, default_spec())
    assert len(ts) == expected
    assert all(r.origin in (1, 2, 3) for r in ts.rows())


@given(st.floats(min_value=0.0, max_value=1e6, allow_nan=False))
@settings(max_examples=200, deadline=None)
def test_shifted_log_transform_is_exact(t):
    spec = default_spec()
    X = spec.encode(2, courses=[1], days=[t], gaps=[t],
                    covariates={})
    names = spec.feature_names(2)
    lt = X[0, names.index("log_time")]
    lg = X[0, names.index("log_gap")]
    assert lt == np.log(t + 1.0) - 4.0
    assert lg == np.log(t + 1.0) - 4.0
    assert X[0, names.index("log_time_sq")] == lt * lt
    assert X[0, names.index("log_gap_sq")] == lg * lg


def test_zero_gap_is_accepted():
    spec = default_spec()
    X = spec.encode(2, courses=[1], days=[5.0], gaps=[0.0], covariates={})
    assert X[0, spec.feature_names(2).index("log_gap")] == -4.0


def test_encoding_is_deterministic():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1, dose="low"),
        visit("g1", "p1", 1, 2, 30, 2, dose="low"),
        visit("g2", "p9", 1, 1, 0, 2, dose="high"),
        visit("g2", "p9", 1, 2, 12, 3, dose="high"),
    ]
    spec = default_spec(covariates=(CategoricalCovariate("dose"),))
    a = build_transitions(rows, spec)
    b = build_transitions(list(reversed(rows)), spec)
    for origin in a.blocks:
        assert np.array_equal(a.blocks[origin].X, b.blocks[origin].X)
        assert np.array_equal(a.blocks[origin].y, b.blocks[origin].y)


# ---------------------------------------------------------------------------
# Covariate coding
# ---------------------------------------------------------------------------

def test_categorical_one_hot_against_reference():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1, dose="medium"),
        visit("g1", "p1", 1, 2, 8, 2, dose="medium"),
        visit("g1", "p2", 1, 1, 0, 1, dose="low"),
        visit("g1", "p2", 1, 2, 8, 2, dose="low"),
    ]
    spec = default_spec(covariates=(
        CategoricalCovariate("dose", levels=("low", "medium", "high"),
                             reference="low"),))
    ts = build_transitions(rows, spec)
    names = ts.spec.feature_names(1)
    assert "dose_medium" in names and "dose_high" in names
    assert "dose_low" not in names
    X = ts.blocks[1].X
    med = X[:, names.index("dose_medium")]
    assert sorted(med) == [0.0, 1.0]


def test_unknown_level_raises_encoding_error():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1, dose="mystery"),
        visit("g1", "p1", 1, 2, 8, 2, dose="mystery"),
    ]
    spec = default_spec(covariates=(
        CategoricalCovariate("dose", levels=("low", "high")),))
    with pytest.raises(EncodingError, match="mystery"):
        build_transitions(rows, spec)


def test_missing_level_buckets_unknowns():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1, imd=""),
        visit("g1", "p1", 1, 2, 8, 2, imd=""),
        visit("g1", "p2", 1, 1, 0, 1, imd="q1"),
        visit("g1", "p2", 1, 2, 8, 2, imd="q1"),
    ]
    spec = default_spec(covariates=(
        CategoricalCovariate("imd", levels=("q1", "q2"),
                             missing_level="NA"),))
    ts = build_transitions(rows, spec)
    names = ts.spec.feature_names(1)
    assert "imd_NA" in names
    na = ts.blocks[1].X[:, names.index("imd_NA")]
    assert sorted(na) == [0.0, 1.0]


def test_missing_numeric_value_is_an_error():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1, sulphate=""),
        visit("g1", "p1", 1, 2, 8, 2, sulphate=""),
    ]
    spec = default_spec(covariates=(NumericCovariate("sulphate"),))
    with pytest.raises((EncodingError, VisitDataError)):
        build_transitions(rows, spec)


def test_interaction_columns_multiply():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1, dose="high", sulphate="1"),
        visit("g1", "p1", 1, 2, 8, 2, dose="high", sulphate="1"),
    ]
    spec = default_spec(
        covariates=(CategoricalCovariate("dose", levels=("low", "high")),
                    NumericCovariate("sulphate")),
        interactions=(("dose", "sulphate"),),
    )
    ts = build_transitions(rows, spec)
    names = ts.spec.feature_names(1)
    X = ts.blocks[1].X
    prod = (X[:, names.index("dose_high")] * X[:, names.index("sulphate")])
    assert np.array_equal(X[:, names.index("dose_high:sulphate")], prod)


def test_interaction_with_undeclared_covariate_rejected():
    with pytest.raises(ConfigError, match="undeclared"):
        default_spec(covariates=(NumericCovariate("a"),),
                     interactions=(("a", "b"),))


def test_duplicate_covariate_names_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        default_spec(covariates=(NumericCovariate("a"),
                                 NumericCovariate("a")))


def test_unresolved_levels_freeze_from_data_sorted():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1, dose="zeta"),
        visit("g1", "p1", 1, 2, 8, 2, dose="zeta"),
        visit("g1", "p2", 1, 1, 0, 1, dose="alpha"),
        visit("g1", "p2", 1, 2, 8, 2, dose="alpha"),
    ]
    spec = default_spec(covariates=(CategoricalCovariate("dose"),))
    ts = build_transitions(rows, spec)
    cov = ts.spec.covariates[0]
    assert cov.levels == ("alpha", "zeta")
    assert cov.reference == "alpha"


def test_feature_names_unique_and_deterministic():
    spec = default_spec(
        covariates=(CategoricalCovariate("dose", levels=("l", "m", "h"),
                                         reference="l"),
                    NumericCovariate("s")),
        interactions=(("dose", "s"),),
    )
    for origin in (1, 2, 3):
        names = spec.feature_names(origin)
        assert len(names) == len(set(names))
        assert names == spec.feature_names(origin)
        assert names[0] == "intercept"


def test_model_spec_json_round_trip():
    spec = default_spec(
        covariates=(CategoricalCovariate("dose", levels=("l", "h"),
                                         missing_level="NA"),
                    NumericCovariate("s")),
        interactions=(("dose", "s"),),
        gap_transform="log",
    )
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec


# ---------------------------------------------------------------------------
# Transition count matrix
# ---------------------------------------------------------------------------

def test_count_matrix_direct_example():
    rows = [
        visit("g1", "p1", 1, 1, 0, 1),
        visit("g1", "p1", 1, 2, 5, 2),
        visit("g1", "p1", 1, 3, 11, 2),
    ]
    counts = transition_matrix(rows, StateSpace())
    assert counts.counts[0, 1] == 1   # 1 -> 2
    assert counts.counts[1, 1] == 1   # 2 -> 2
    assert counts.counts.sum() == 2


def test_count_matrix_empty_input():
    counts = transition_matrix([], StateSpace())
    assert counts.counts.shape == (3, 4)
    assert counts.counts.sum() == 0


def test_count_matrix_csv_layout():
    rows = [visit("g1", "p1", 1, 1, 0, 1), visit("g1", "p1", 1, 2, 5, 4)]
    text = transition_matrix(rows, StateSpace()).to_csv()
    lines = text.splitlines()
    assert lines[0] == "origin,to_1,to_2,to_3,to_4"
    assert lines[1] == "1,0,0,0,1"


def test_counts_align_with_built_transitions():
    rng = np.random.default_rng(3)
    rows = []
    for p in range(12):
        day = 0.0
        states = [1] + [int(s) for s in rng.integers(1, 4, 4)]
        for k, s in enumerate(states):
            rows.append(visit("g1", f"p{p}", 1, k + 1, day, s))
            day += 3.0
    counts = transition_matrix(rows, StateSpace())
    ts = build_transitions(rows, default_spec())
    assert counts.counts.sum() == len(ts)


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------

def _write(tmp_path, text):
    path = tmp_path / "visits.csv"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_load_visits_round_trip(tmp_path):
    rows = [
        visit("g1", "p1", 1, 1, 0, 1, dose="low"),
        visit("g1", "p1", 1, 2, 30, 2, dose="low"),
    ]
    table = VisitTable.from_records(rows)
    buf = io.StringIO()
    table.to_csv(buf)
    path = _write(tmp_path, buf.getvalue())
    again = load_visits(path)
    assert len(again) == 2
    assert list(again.covariates) == ["dose"]
    assert [r.state for r in again] == ["1", "2"] or \
        [r.state for r in again] == [1, 2]


def test_load_visits_missing_column(tmp_path):
    path = _write(tmp_path, "practice_id,patient_id,course,visit,day\n")
    with pytest.raises(VisitDataError, match="state"):
        load_visits(path)


def test_load_visits_reports_offending_line(tmp_path):
    path = _write(tmp_path,
                  "practice_id,patient_id,course,visit,day,state\n"
                  "g1,p1,1,1,0,1\n"
                  "g1,p1,1,oops,5,2\n")
    with pytest.raises(VisitDataError, match=":3"):
        load_visits(path)


def test_load_visits_empty_file(tmp_path):
    path = _write(tmp_path, "")
    with pytest.raises(VisitDataError, match="empty"):
        load_visits(path)


def test_visit_table_sorts_to_canonical_order():
    rows = [
        visit("g2", "p1", 1, 1, 0, 1),
        visit("g1", "p9", 1, 1, 0, 1),
        visit("g1", "p1", 2, 1, 0, 1),
        visit("g1", "p1", 1, 1, 0, 1),
    ]
    table = VisitTable.from_records(rows)
    keys = [(str(r.practice_id), str(r.patient_id), r.course)
            for r in table]
    assert keys == sorted(keys)
