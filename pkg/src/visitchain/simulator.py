"""Two-state visit-data simulator with multi-level random intercepts.

The generator produces transition data shaped like anaemia-treatment
records: practices hold patients, patients hold treatment courses, and a
course is a short chain of assessment visits over states {1, 2} with no
absorbing state.  Within a course, the log-odds of landing in state 2 at
the next visit is linear in course-category indicators, the log gap time,
two dose indicators, a sulphate indicator and dose:sulphate interactions,
plus a practice-level and a patient-level random intercept per origin
state.  Practice intercepts for the two origins are independent; patient
intercepts are bivariate normal with configurable correlation.

Fitting the no-random-effects model to such data estimates attenuated
population-averaged coefficients, so the module also ships two routes to
the marginal truth:

* :func:`marginal_coefficients` solves the population score equations by
  Gauss-Hermite quadrature (exact up to quadrature error, runs in
  seconds);
* :func:`marginal_truth` brute-forces them by fitting one giant streamed
  dataset, the approach the benchmark study used.

:func:`coverage_study` runs the bias/coverage experiment comparing the
direct and estimating-function bootstraps against either truth source.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import estimator, resampling
from ._rng import DATASET, GENERATE, substream
from .data_model import (CategoricalCovariate, ModelSpec, NumericCovariate,
                         StateSpace, VisitTable, build_transitions)
from .errors import (ConfigError, ConvergenceError, ResamplingError,
                     SeparationError)
from .resampling import percentile_ci, replicate_multiplicities

__all__ = [
    "SizeLaw",
    "SimConfig",
    "MarginalSolution",
    "MarginalTruth",
    "CoverageRow",
    "CoverageStudy",
    "COEFFICIENT_NAMES",
    "BENCHMARK_MARGINAL",
    "BENCHMARK_CONDITIONAL",
    "VISIT_CAP",
    "two_state_spec",
    "generate",
    "marginal_coefficients",
    "calibrate_to_marginal",
    "marginal_truth",
    "coverage_study",
]

#: Visits per course never exceed this; longer courses are not simulated.
VISIT_CAP = 6

#: Predictor order of both coefficient vectors (matches two_state_spec()).
COEFFICIENT_NAMES = (
    "intercept", "course_2", "course_3", "course_ge4", "log_gap",
    "dose_medium", "dose_high", "sulphate",
    "dose_medium:sulphate", "dose_high:sulphate",
)

_DOSE_LEVELS = ("low", "medium", "high")

#: Practices are generated in fixed-size batches with one RNG substream
#: per batch, always drawing the full batch and truncating, so a run with
#: more practices extends a smaller run's data instead of reshuffling it.
_PRACTICE_BATCH = 256


# ---------------------------------------------------------------------------
# Cluster-size laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SizeLaw:
    """A positive-integer count distribution for cluster sizes.

    Construct through the classmethods; ``kind`` selects the family:

    * ``fixed(n)``: point mass at n.
    * ``geometric(mean)``: support {1, 2, ...}, P(k) = p(1-p)^(k-1)
      with p = 1/mean (every cluster has at least one member).
    * ``truncated_geometric(ratio, low, high)``: P(k) proportional to
      ratio**k on the integer window [low, high].
    * ``table(values, probs)``: explicit finite distribution.
    * ``lognormal(mean, sigma)``: round(exp(N(mu, sigma**2))) clipped to
      >= 1, with mu chosen so the continuous law has the given mean.
      Sampling only; tail weights are not available in closed form.
    """

    kind: str
    mean: float | None = None
    sigma: float | None = None
    ratio: float | None = None
    low: int | None = None
    high: int | None = None
    value: int | None = None
    values: tuple | None = None
    probs: tuple | None = None

    def __post_init__(self):
        k = self.kind
        if k == "fixed":
            if self.value is None or int(self.value) < 1:
                raise ConfigError("fixed size law needs value >= 1")
            object.__setattr__(self, "value", int(self.value))
        elif k == "geometric":
            if self.mean is None or self.mean <= 1.0:
                raise ConfigError("geometric size law needs mean > 1")
        elif k == "truncated_geometric":
            if self.ratio is None or self.ratio <= 0:
                raise ConfigError("truncated_geometric needs ratio > 0")
            if self.low is None or self.high is None or \
                    not 1 <= int(self.low) <= int(self.high):
                raise ConfigError("truncated_geometric needs 1 <= low <= high")
            object.__setattr__(self, "low", int(self.low))
            object.__setattr__(self, "high", int(self.high))
        elif k == "table":
            if not self.values or self.probs is None or \
                    len(self.values) != len(self.probs):
                raise ConfigError("table size law needs matching values/probs")
            vals = tuple(int(v) for v in self.values)
            pr = np.asarray(self.probs, dtype=np.float64)
            if min(vals) < 1:
                raise ConfigError("size-law support must be positive integers")
            if (pr < 0).any() or abs(pr.sum() - 1.0) > 1e-9:
                raise ConfigError(
                    "table probabilities must be >= 0 and sum to 1"
                )
            object.__setattr__(self, "values", vals)
            object.__setattr__(self, "probs", tuple(float(p) for p in pr))
        elif k == "lognormal":
            if self.mean is None or self.mean < 1.0 or \
                    self.sigma is None or self.sigma < 0:
                raise ConfigError(
                    "lognormal size law needs mean >= 1 and sigma >= 0"
                )
        else:
            raise ConfigError(f"unknown size-law kind {k!r}")

    # -- sampling -----------------------------------------------------------

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(size, self.value, dtype=np.int64)
        if self.kind == "geometric":
            return rng.geometric(1.0 / self.mean, size=size).astype(np.int64)
        if self.kind == "lognormal":
            mu = np.log(self.mean) - 0.5 * self.sigma ** 2
            x = np.rint(rng.lognormal(mu, self.sigma, size=size))
            return np.maximum(x, 1.0).astype(np.int64)
        values, probs = self._finite()
        cum = np.cumsum(probs)
        idx = np.searchsorted(cum, rng.random(size), side="right")
        return values[np.minimum(idx, len(values) - 1)]

    def _finite(self):
        if self.kind == "fixed":
            return np.array([self.value]), np.array([1.0])
        if self.kind == "table":
            return (np.asarray(self.values, dtype=np.int64),
                    np.asarray(self.probs, dtype=np.float64))
        if self.kind == "truncated_geometric":
            values = np.arange(self.low, self.high + 1, dtype=np.int64)
            w = np.float64(self.ratio) ** values
            return values, w / w.sum()
        raise ConfigError(
            f"size law {self.kind!r} has no finite probability table"
        )

    # -- tail weights (needed by the quadrature engine) ----------------------

    @property
    def max_value(self) -> int | None:
        """Largest possible draw, None when unbounded."""
        if self.kind == "fixed":
            return self.value
        if self.kind == "table":
            return max(self.values)
        if self.kind == "truncated_geometric":
            return self.high
        return None

    def survival(self, j: int) -> float:
        """P(N >= j)."""
        if j <= 1:
            return 1.0
        if self.kind == "geometric":
            q = 1.0 - 1.0 / self.mean
            return float(q ** (j - 1))
        values, probs = self._finite()
        return float(probs[values >= j].sum())

    def expected_count_at_least(self, j: int) -> float:
        """E[max(0, N - j + 1)], the expected number of indices >= j."""
        if self.kind == "geometric":
            q = 1.0 - 1.0 / self.mean
            return float(q ** (j - 1) / (1.0 - q))
        values, probs = self._finite()
        return float((probs * np.maximum(0, values - j + 1)).sum())

    def expected_value(self) -> float:
        if self.kind in ("geometric", "lognormal"):
            # for lognormal this ignores rounding and clipping
            return float(self.mean)
        values, probs = self._finite()
        return float((values * probs).sum())

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        for f in ("mean", "sigma", "ratio", "low", "high", "value"):
            v = getattr(self, f)
            if v is not None:
                d[f] = v
        if self.values is not None:
            d["values"] = list(self.values)
            d["probs"] = list(self.probs)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SizeLaw":
        kw = dict(d)
        kind = kw.pop("kind", None)
        if kind is None:
            raise ConfigError("size law needs a 'kind' field")
        if "values" in kw:
            kw["values"] = tuple(kw["values"])
            kw["probs"] = tuple(kw.get("probs", ()))
        try:
            return cls(kind=kind, **kw)
        except TypeError as e:
            raise ConfigError(f"bad size-law fields: {e}") from None

    # -- constructors ---------------------------------------------------------

    @classmethod
    def fixed(cls, value: int) -> "SizeLaw":
        return cls(kind="fixed", value=value)

    @classmethod
    def geometric(cls, mean: float) -> "SizeLaw":
        return cls(kind="geometric", mean=mean)

    @classmethod
    def truncated_geometric(cls, ratio: float, low: int,
                            high: int) -> "SizeLaw":
        return cls(kind="truncated_geometric", ratio=ratio, low=low,
                   high=high)

    @classmethod
    def table(cls, values: Sequence[int],
              probs: Sequence[float]) -> "SizeLaw":
        return cls(kind="table", values=tuple(values), probs=tuple(probs))

    @classmethod
    def lognormal(cls, mean: float, sigma: float) -> "SizeLaw":
        return cls(kind="lognormal", mean=mean, sigma=sigma)


# ---------------------------------------------------------------------------
# Simulation configuration
# ---------------------------------------------------------------------------

def _default_patients() -> SizeLaw:
    return SizeLaw.lognormal(mean=30.0, sigma=0.55)


def _default_courses() -> SizeLaw:
    return SizeLaw.geometric(mean=2.5)


def _default_visits() -> SizeLaw:
    # Courses with a single visit carry no transitions, so the default
    # law starts at 2; override with a table law to include them.
    return SizeLaw.truncated_geometric(ratio=0.85, low=2, high=VISIT_CAP)


@dataclass(frozen=True)
class SimConfig:
    """Everything the generator needs, serializable to JSON.

    ``coefficients_from_1`` and ``coefficients_from_2`` are the
    conditional (random-intercept-model) coefficient vectors for
    transitions out of states 1 and 2, ordered as
    :data:`COEFFICIENT_NAMES`.  The ``*_sd_from_*`` fields are random-
    intercept standard deviations; ``patient_correlation`` correlates the
    two patient-level intercepts, while practice intercepts stay
    independent across origins.
    """

    coefficients_from_1: tuple = (0.0,) * 10
    coefficients_from_2: tuple = (0.0,) * 10
    practice_sd_from_1: float = 0.65
    practice_sd_from_2: float = 0.80
    patient_sd_from_1: float = 0.85
    patient_sd_from_2: float = 0.80
    patient_correlation: float = 0.0
    dose_probabilities: tuple = (0.1, 0.4, 0.5)
    sulphate_probability: float = 0.5
    gap_log_mean: float = 0.0
    gap_log_sd: float = 1.0
    n_practices: int = 60
    patients_per_practice: SizeLaw = field(default_factory=_default_patients)
    courses_per_patient: SizeLaw = field(default_factory=_default_courses)
    visits_per_course: SizeLaw = field(default_factory=_default_visits)
    seed: int = 0

    def __post_init__(self):
        for name in ("coefficients_from_1", "coefficients_from_2"):
            vec = tuple(float(v) for v in getattr(self, name))
            if len(vec) != len(COEFFICIENT_NAMES):
                raise ConfigError(
                    f"{name} needs {len(COEFFICIENT_NAMES)} entries "
                    f"(order: {', '.join(COEFFICIENT_NAMES)})"
                )
            object.__setattr__(self, name, vec)
        for name in ("practice_sd_from_1", "practice_sd_from_2",
                     "patient_sd_from_1", "patient_sd_from_2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not -1.0 <= self.patient_correlation <= 1.0:
            raise ConfigError("patient_correlation must be in [-1, 1]")
        dp = tuple(float(p) for p in self.dose_probabilities)
        if len(dp) != 3 or min(dp) < 0 or abs(sum(dp) - 1.0) > 1e-9:
            raise ConfigError(
                "dose_probabilities needs 3 non-negative entries summing to 1"
            )
        object.__setattr__(self, "dose_probabilities", dp)
        if not 0.0 <= self.sulphate_probability <= 1.0:
            raise ConfigError("sulphate_probability must be in [0, 1]")
        if self.gap_log_sd < 0:
            raise ConfigError("gap_log_sd must be >= 0")
        if self.n_practices < 1:
            raise ConfigError("n_practices must be >= 1")
        vmax = self.visits_per_course.max_value
        if vmax is None or vmax > VISIT_CAP:
            raise ConfigError(
                f"visits_per_course must have bounded support <= {VISIT_CAP}"
            )

    def coefficients(self, origin) -> np.ndarray:
        if origin == 1:
            return np.asarray(self.coefficients_from_1, dtype=np.float64)
        if origin == 2:
            return np.asarray(self.coefficients_from_2, dtype=np.float64)
        raise ConfigError(f"origin must be 1 or 2, got {origin!r}")

    @property
    def random_effect_covariance(self) -> np.ndarray:
        """Covariance of the summed (practice + patient) intercept pair."""
        v1 = self.practice_sd_from_1 ** 2 + self.patient_sd_from_1 ** 2
        v2 = self.practice_sd_from_2 ** 2 + self.patient_sd_from_2 ** 2
        c = (self.patient_correlation
             * self.patient_sd_from_1 * self.patient_sd_from_2)
        return np.array([[v1, c], [c, v2]])

    def to_dict(self) -> dict:
        return {
            "coefficients_from_1": list(self.coefficients_from_1),
            "coefficients_from_2": list(self.coefficients_from_2),
            "practice_sd_from_1": self.practice_sd_from_1,
            "practice_sd_from_2": self.practice_sd_from_2,
            "patient_sd_from_1": self.patient_sd_from_1,
            "patient_sd_from_2": self.patient_sd_from_2,
            "patient_correlation": self.patient_correlation,
            "dose_probabilities": list(self.dose_probabilities),
            "sulphate_probability": self.sulphate_probability,
            "gap_log_mean": self.gap_log_mean,
            "gap_log_sd": self.gap_log_sd,
            "n_practices": self.n_practices,
            "patients_per_practice": self.patients_per_practice.to_dict(),
            "courses_per_patient": self.courses_per_patient.to_dict(),
            "visits_per_course": self.visits_per_course.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        kw = dict(d)
        for law in ("patients_per_practice", "courses_per_patient",
                    "visits_per_course"):
            if law in kw and isinstance(kw[law], Mapping):
                kw[law] = SizeLaw.from_dict(kw[law])
        for tup in ("coefficients_from_1", "coefficients_from_2",
                    "dose_probabilities"):
            if tup in kw:
                kw[tup] = tuple(kw[tup])
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(f"bad simulation config: {e}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def benchmark(cls, patient_correlation: float = 0.0,
                  n_practices: int = 60, seed: int = 0,
                  **overrides) -> "SimConfig":
        """The benchmark design: calibrated conditional coefficients whose
        population-averaged counterparts equal :data:`BENCHMARK_MARGINAL`
        when ``patient_correlation`` is 0, with the standard variance
        components and covariate laws."""
        return cls(
            coefficients_from_1=BENCHMARK_CONDITIONAL[1],
            coefficients_from_2=BENCHMARK_CONDITIONAL[2],
            patient_correlation=patient_correlation,
            n_practices=n_practices,
            seed=seed,
            **overrides,
        )


#: Population-averaged coefficient vectors of the benchmark design with
#: uncorrelated patient intercepts; the calibration targets.
BENCHMARK_MARGINAL = {
    1: (-0.3175, 0.0500, 0.0883, 0.1053, 0.6172,
        0.1477, 0.2367, 0.2055, -0.1296, -0.1594),
    2: (0.0929, 0.0498, 0.1293, 0.1827, 0.3083,
        0.1572, 0.0984, 0.2306, -0.2672, -0.2482),
}

#: Conditional coefficients solving marginal_coefficients(benchmark) ==
#: BENCHMARK_MARGINAL at patient_correlation 0 (frozen calibration output;
#: regenerate with calibrate_to_marginal if the covariate laws change).
BENCHMARK_CONDITIONAL = {
    1: (-2.4160540433053856e-01,
        +6.1995861930903395e-02,
        +1.1047359818489151e-01,
        +1.3244367299003590e-01,
        +7.5702239735464050e-01,
        +1.8405001302519186e-01,
        +2.9067085114342484e-01,
        +2.5618706355245274e-01,
        -1.6490077204914746e-01,
        -2.0074306130312009e-01),
    2: (-2.6078122097524914e-02,
        +6.3027166478249158e-02,
        +1.6336493308435185e-01,
        +2.3074762460119078e-01,
        +3.8618190103432098e-01,
        +1.9890125823646948e-01,
        +1.2581862356856946e-01,
        +2.9184224318486107e-01,
        -3.3714606609907632e-01,
        -3.1351599708239825e-01),
}


# ---------------------------------------------------------------------------
# Model spec and covariate-cell machinery
# ---------------------------------------------------------------------------

def two_state_spec() -> ModelSpec:
    """The fitting spec matching the simulated design.

    States {1, 2} with no absorbing state, reference destination 1,
    course categories up to 4+, raw-log gap adjustment, no follow-up-time
    features, dose (low reference) and sulphate with interactions.  Its
    per-origin predictor order equals :data:`COEFFICIENT_NAMES`.
    """
    return ModelSpec(
        space=StateSpace(states=(1, 2), absorbing=frozenset()),
        covariates=(
            CategoricalCovariate("dose", levels=_DOSE_LEVELS,
                                 reference="low"),
            NumericCovariate("sulphate"),
        ),
        interactions=(("dose", "sulphate"),),
        max_course_category=4,
        time_transform="none",
        gap_transform="log",
    )


def _cell_design(spec: ModelSpec) -> tuple:
    """(48, p) design rows for every (origin, course-cat, dose, sulphate)
    cell with the log-gap column zeroed, plus that column's index.

    Cell id layout: ``(origin-1)*24 + cat*6 + dose*2 + sulphate`` where
    cat 0..3 stands for course 1, 2, 3, >=4.
    """
    names = spec.feature_names(1)
    gap_pos = names.index("log_gap")
    rows = []
    for origin in (1, 2):
        for cat in range(4):
            for dose in range(3):
                for sulph in range(2):
                    z = spec.encode(
                        origin,
                        courses=[cat + 1],
                        days=[0.0],
                        gaps=[1.0],  # log 1 = 0 zeroes the gap column
                        covariates={
                            "dose": np.asarray([_DOSE_LEVELS[dose]], object),
                            "sulphate": np.asarray([float(sulph)], object),
                        },
                    )[0]
                    rows.append(z)
    Z = np.asarray(rows)
    if np.abs(Z[:, gap_pos]).max() != 0.0:
        raise ConfigError("cell design rows must have a zero gap column")
    return Z, gap_pos


def _cell_eta(Z48: np.ndarray, gap_pos: int, coef: np.ndarray) -> tuple:
    """Per-cell linear-predictor pieces: eta = base[cell] + slope[cell]*lv.

    ``coef`` is (2, p), row 0 for origin 1.
    """
    base = np.empty(48)
    slope = np.empty(48)
    for o in range(2):
        sl = slice(o * 24, (o + 1) * 24)
        base[sl] = Z48[sl] @ coef[o]
        slope[sl] = coef[o, gap_pos]
    return base, slope


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

@dataclass
class _Batch:
    """Raw draws for one practice batch, truncated to the kept practices."""

    first_practice: int
    n_kept: int
    patients_per_practice: np.ndarray  # (n_kept,)
    practice_effects: np.ndarray       # (n_kept, 2)
    patient_practice: np.ndarray       # (P,) local practice index
    patient_effects: np.ndarray        # (P, 2)
    course_patient: np.ndarray         # (C,) local patient index
    course_index: np.ndarray           # (C,) 1-based within patient
    dose: np.ndarray                   # (C,) 0/1/2
    sulphate: np.ndarray               # (C,) 0/1
    n_visits: np.ndarray               # (C,)
    log_gaps: np.ndarray               # (C, max_visits-1), padded
    states: np.ndarray                 # (C, max_visits) int8, padded march


def _draw_batch(config: SimConfig, base_keys: tuple, batch_index: int,
                n_keep: int, base_eta: np.ndarray,
                gap_slope: np.ndarray) -> _Batch:
    """Generate one full batch of ``_PRACTICE_BATCH`` practices and keep
    the first ``n_keep``.

    The full batch is always drawn so the kept practices' data depend
    only on (keys, batch index), never on how many practices the caller
    wants.
    """
    rng = substream(*base_keys, batch_index)
    nb = _PRACTICE_BATCH

    n_pat = config.patients_per_practice.sample(rng, nb)
    bg = rng.standard_normal((nb, 2)) * np.array(
        [config.practice_sd_from_1, config.practice_sd_from_2])

    P = int(n_pat.sum())
    pat_practice = np.repeat(np.arange(nb), n_pat)
    s1, s2 = config.patient_sd_from_1, config.patient_sd_from_2
    rho = config.patient_correlation
    # 2x2 Cholesky-style factor; also exact when a sd or 1-rho^2 is 0
    L = np.array([
        [s1, 0.0],
        [rho * s2, s2 * np.sqrt(max(0.0, 1.0 - rho * rho))],
    ])
    bgi = rng.standard_normal((P, 2)) @ L.T

    n_course = config.courses_per_patient.sample(rng, P)
    C = int(n_course.sum())
    course_patient = np.repeat(np.arange(P), n_course)
    offsets = np.cumsum(n_course) - n_course
    course_index = np.arange(C) - offsets[course_patient] + 1

    cum_dose = np.cumsum(config.dose_probabilities)
    dose = np.searchsorted(cum_dose, rng.random(C), side="right")
    dose = np.minimum(dose, 2).astype(np.int64)
    sulph = (rng.random(C) < config.sulphate_probability).astype(np.int64)
    m = config.visits_per_course.sample(rng, C)

    max_m = int(m.max()) if C else 1
    logv = rng.normal(config.gap_log_mean, config.gap_log_sd,
                      size=(C, max(max_m - 1, 0)))
    trans_u = rng.random((C, max(max_m - 1, 0)))

    # sequential state march over visit slots, vectorized across courses
    cat = np.minimum(course_index, 4) - 1
    cell24 = cat * 6 + dose * 2 + sulph
    bg_course = bg[pat_practice[course_patient]]
    bgi_course = bgi[course_patient]
    states = np.ones((C, max_m), dtype=np.int8)
    rows_idx = np.arange(C)
    for k in range(max_m - 1):
        o = states[:, k].astype(np.int64) - 1
        cell = o * 24 + cell24
        eta = (base_eta[cell] + gap_slope[cell] * logv[:, k]
               + bg_course[rows_idx, o] + bgi_course[rows_idx, o])
        states[:, k + 1] = 1 + (trans_u[:, k] < _expit(eta))

    if n_keep >= nb:
        return _Batch(
            first_practice=batch_index * nb, n_kept=nb,
            patients_per_practice=n_pat, practice_effects=bg,
            patient_practice=pat_practice, patient_effects=bgi,
            course_patient=course_patient, course_index=course_index,
            dose=dose, sulphate=sulph, n_visits=m, log_gaps=logv,
            states=states,
        )
    keep_pr = np.arange(nb) < n_keep
    keep_pat = keep_pr[pat_practice]
    keep_course = keep_pat[course_patient]
    pat_map = np.cumsum(keep_pat) - 1
    return _Batch(
        first_practice=batch_index * nb, n_kept=n_keep,
        patients_per_practice=n_pat[:n_keep],
        practice_effects=bg[:n_keep],
        patient_practice=pat_practice[keep_pat],
        patient_effects=bgi[keep_pat],
        course_patient=pat_map[course_patient[keep_course]],
        course_index=course_index[keep_course],
        dose=dose[keep_course],
        sulphate=sulph[keep_course],
        n_visits=m[keep_course],
        log_gaps=logv[keep_course],
        states=states[keep_course],
    )


def _batches(config: SimConfig, base_keys: tuple, n_practices: int,
             base_eta: np.ndarray, gap_slope: np.ndarray):
    n_batches = -(-n_practices // _PRACTICE_BATCH)
    for b in range(n_batches):
        keep = min(_PRACTICE_BATCH, n_practices - b * _PRACTICE_BATCH)
        yield _draw_batch(config, base_keys, b, keep, base_eta, gap_slope)


def _patient_labels(batch: _Batch) -> tuple:
    """Practice id per patient and zero-padded within-practice patient id."""
    practice_global = batch.first_practice + batch.patient_practice
    practice_ids = np.array([f"g{g:07d}" for g in practice_global],
                            dtype=object)
    starts = np.cumsum(batch.patients_per_practice) \
        - batch.patients_per_practice
    local = np.arange(len(batch.patient_practice)) \
        - np.repeat(starts, batch.patients_per_practice)
    patient_ids = np.array([f"p{i:07d}" for i in local], dtype=object)
    return practice_ids, patient_ids


def _assemble_table(batches: Sequence[_Batch]) -> VisitTable:
    """Expand batches into one visit-level table in canonical order."""
    cols: dict = {k: [] for k in ("practice", "patient", "course", "visit",
                                  "day", "state", "dose", "sulph")}
    dose_names = np.array(_DOSE_LEVELS, dtype=object)
    for batch in batches:
        C = len(batch.course_index)
        if C == 0:
            continue
        m = batch.n_visits
        N = int(m.sum())
        row_course = np.repeat(np.arange(C), m)
        pos = np.arange(N) - np.repeat(np.cumsum(m) - m, m)
        max_m = batch.states.shape[1]
        days = np.zeros((C, max_m))
        if max_m > 1:
            np.cumsum(np.exp(batch.log_gaps), axis=1, out=days[:, 1:])
        practice_ids, patient_ids = _patient_labels(batch)
        course_pat = batch.course_patient
        cols["practice"].append(practice_ids[course_pat][row_course])
        cols["patient"].append(patient_ids[course_pat][row_course])
        cols["course"].append(batch.course_index[row_course])
        cols["visit"].append(pos + 1)
        cols["day"].append(days[row_course, pos])
        cols["state"].append(batch.states[row_course, pos].astype(np.int64))
        cols["dose"].append(dose_names[batch.dose][row_course])
        cols["sulph"].append(batch.sulphate[row_course].astype(np.float64))

    def cat(name, dtype=None):
        if not cols[name]:
            return np.asarray([], dtype=dtype or object)
        return np.concatenate(cols[name])

    return VisitTable(
        practice_ids=cat("practice"),
        patient_ids=cat("patient"),
        courses=cat("course", np.int64),
        visits=cat("visit", np.int64),
        days=cat("day", np.float64),
        states=cat("state"),
        covariates={"dose": cat("dose"), "sulphate": cat("sulph")},
    )


def _generate_batches(config: SimConfig, keys: tuple) -> list:
    spec = two_state_spec()
    Z48, gap_pos = _cell_design(spec)
    coef = np.vstack([config.coefficients(1), config.coefficients(2)])
    base_eta, gap_slope = _cell_eta(Z48, gap_pos, coef)
    return list(_batches(config, keys, config.n_practices,
                         base_eta, gap_slope))


def generate(config: SimConfig, *, with_effects: bool = False):
    """Simulate one visit dataset.

    Every course starts in state 1 at day 0; visit days accumulate the
    continuous gap times.  Covariates are constant within a course:
    ``dose`` in {low, medium, high} and numeric ``sulphate`` in {0, 1}.

    Args:
        config: the simulation design; ``config.seed`` drives everything.
        with_effects: also return the sampled random intercepts (a test
            hook for distribution checks).

    Returns:
        A :class:`VisitTable` in canonical order, or a ``(table,
        effects)`` pair when ``with_effects`` is set, where ``effects``
        maps ``"practice"`` to ``{practice_id: (b1, b2)}`` and
        ``"patient"`` to ``{(practice_id, patient_id): (b1, b2)}``.
    """
    batches = _generate_batches(config, (config.seed, GENERATE))
    table = _assemble_table(batches)
    if not with_effects:
        return table
    effects: dict = {"practice": {}, "patient": {}}
    for batch in batches:
        first = batch.first_practice
        for i in range(batch.n_kept):
            effects["practice"][f"g{first + i:07d}"] = tuple(
                batch.practice_effects[i])
        practice_ids, patient_ids = _patient_labels(batch)
        for j in range(len(batch.patient_practice)):
            key = (practice_ids[j], patient_ids[j])
            effects["patient"][key] = tuple(batch.patient_effects[j])
    return table, effects


# ---------------------------------------------------------------------------
# Population (marginal) coefficients by quadrature
# ---------------------------------------------------------------------------

@dataclass
class MarginalSolution:
    """Quadrature solution of the population score equations."""

    coefficients: dict    # origin -> (p,) marginal vector
    feature_names: tuple
    iterations: int
    n_nodes: int

    def as_theta(self) -> dict:
        return {o: np.asarray(v, dtype=np.float64)
                for o, v in self.coefficients.items()}


def _quad_weights(config: SimConfig) -> tuple:
    """Cell and slot weights implied by the cluster-size laws.

    Returns ``(w24, slot_weights)``: ``w24[cat*6 + dose*2 + sulph]`` is
    the expected per-patient number of courses in that covariate cell
    (course categories weighted by how often a patient reaches them), and
    ``slot_weights[k]`` is P(a course has visit k+2), the chance that
    transition slot k produces a row.
    """
    courses = config.courses_per_patient
    if courses.kind == "lognormal":
        raise ConfigError(
            "courses_per_patient must have closed-form tail weights for "
            "the quadrature solver (fixed, geometric, truncated_geometric "
            "or table)"
        )
    wcat = np.array([
        courses.survival(1),
        courses.survival(2),
        courses.survival(3),
        courses.expected_count_at_least(4),
    ])
    pd = np.asarray(config.dose_probabilities)
    ps = np.array([1.0 - config.sulphate_probability,
                   config.sulphate_probability])
    w24 = (wcat[:, None, None] * pd[None, :, None]
           * ps[None, None, :]).reshape(24)

    visits = config.visits_per_course
    slot_weights = np.array([visits.survival(k + 2)
                             for k in range(VISIT_CAP - 1)])
    return w24, slot_weights


def _effect_nodes(config: SimConfig, n_nodes: int) -> tuple:
    """2D Gauss-Hermite nodes/weights for the summed random intercepts."""
    cov = config.random_effect_covariance
    if not np.any(cov):
        return np.zeros((1, 2)), np.ones(1)
    evals, evecs = np.linalg.eigh(cov)
    B = evecs @ np.diag(np.sqrt(np.maximum(evals, 0.0)))
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    xi1, xi2 = np.meshgrid(x, x, indexing="ij")
    xi = np.column_stack([xi1.ravel(), xi2.ravel()])
    nodes = np.sqrt(2.0) * xi @ B.T
    weights = (w[:, None] * w[None, :]).ravel() / np.pi
    return nodes, weights


def _gap_nodes(config: SimConfig, n_nodes: int) -> tuple:
    if config.gap_log_sd == 0.0:
        return np.array([config.gap_log_mean]), np.ones(1)
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    nodes = config.gap_log_mean + np.sqrt(2.0) * config.gap_log_sd * x
    return nodes, w / np.sqrt(np.pi)


def _population_moments(config: SimConfig, n_nodes: int) -> dict:
    """Integrate the generator's conditional law down to the pieces the
    marginal score needs.

    For each origin o and covariate cell c the moments are
    ``F0[o, c] = E_u[A_o(u, c)]``, the slot-weighted mass of rows with
    origin o, and ``F1[o, c, v] = E_u[A_o(u, c) P(next = 2 | u, c, v)]``,
    where ``A_o(u, c)`` accumulates the within-course chain's occupancy
    of state o across transition slots given the random-intercept pair u.
    Both are independent of the marginal parameter, so they are computed
    once and reused by every Newton step.
    """
    spec = two_state_spec()
    Z48, gap_pos = _cell_design(spec)
    coef = np.vstack([config.coefficients(1), config.coefficients(2)])
    base, slope = _cell_eta(Z48, gap_pos, coef)

    w24, slot_w = _quad_weights(config)
    u_nodes, u_w = _effect_nodes(config, n_nodes)
    v_nodes, v_w = _gap_nodes(config, n_nodes)
    nu, nv = len(u_w), len(v_nodes)

    # conditional transition probabilities per (origin, u, cell, gap)
    pcond = np.empty((2, nu, 24, nv))
    for o in range(2):
        sl = slice(o * 24, (o + 1) * 24)
        eta = (base[sl][None, :, None]
               + slope[sl][None, :, None] * v_nodes[None, None, :]
               + u_nodes[:, o][:, None, None])
        pcond[o] = _expit(eta)
    # gap-averaged one-step transition probabilities q[o, u, cell]
    q = pcond @ v_w

    # slot-weighted occupancy mass A[o, u, cell]
    occ1 = np.ones((nu, 24))
    occ2 = np.zeros((nu, 24))
    A = np.zeros((2, nu, 24))
    for k in range(VISIT_CAP - 1):
        A[0] += slot_w[k] * occ1
        A[1] += slot_w[k] * occ2
        occ1, occ2 = (occ1 * (1.0 - q[0]) + occ2 * (1.0 - q[1]),
                      occ1 * q[0] + occ2 * q[1])

    WA = A * u_w[None, :, None]                      # (2, nu, 24)
    F0 = WA.sum(axis=1)                              # (2, 24)
    F1 = np.einsum("oug,ougv->ogv", WA, pcond)       # (2, 24, nv)

    return {
        "Z48": Z48, "gap_pos": gap_pos, "w24": w24,
        "v_nodes": v_nodes, "v_w": v_w, "F0": F0, "F1": F1,
        "feature_names": spec.feature_names(1),
    }


def _marginal_score(mom: dict, origin_idx: int,
                    theta: np.ndarray) -> tuple:
    """Population score and its negated Jacobian for one origin block.

    The cell design rows carry a zero gap column, so the gap feature
    enters through explicit ``v`` terms; rank-one corrections put its
    contributions into the right row and column of the Jacobian.
    """
    Z = mom["Z48"][origin_idx * 24:(origin_idx + 1) * 24]   # (24, p)
    gp = mom["gap_pos"]
    v, vw = mom["v_nodes"], mom["v_w"]
    w24 = mom["w24"]
    F0 = mom["F0"][origin_idx]                              # (24,)
    F1 = mom["F1"][origin_idx]                              # (24, nv)

    eta = Z @ theta
    pm = _expit(eta[:, None] + theta[gp] * v[None, :])      # (24, nv)

    resid = (F1 - F0[:, None] * pm) * (w24[:, None] * vw[None, :])
    U = Z.T @ resid.sum(axis=1)
    U[gp] += float((resid * v[None, :]).sum())

    wgt = (F0[:, None] * pm * (1.0 - pm)) * (w24[:, None] * vw[None, :])
    s0 = wgt.sum(axis=1)
    s1 = wgt @ v
    s2 = wgt @ (v * v)
    J = Z.T @ (s0[:, None] * Z)
    t = Z.T @ s1
    J[gp, :] += t
    J[:, gp] += t
    J[gp, gp] += float(s2.sum())
    return U, J


def marginal_coefficients(config: SimConfig, *, n_nodes: int = 40,
                          tol: float = 1e-11,
                          max_iter: int = 100) -> MarginalSolution:
    """Population-averaged coefficients of the no-random-effects model.

    Solves ``E[U(theta)] = 0`` where U is the logistic score of the
    marginal model and the expectation runs over the generator's full
    randomness: random intercepts, covariates, gap times, cluster sizes
    and within-course state paths.  Gauss-Hermite quadrature handles the
    intercept pair and the log gaps; everything else is discrete and
    summed exactly.  The heavy moments are computed once, so the Newton
    solve itself is essentially free.

    Args:
        config: the conditional design.
        n_nodes: Gauss-Hermite nodes per dimension.
        tol: Newton step max-norm tolerance.
        max_iter: iteration cap.

    Returns:
        A :class:`MarginalSolution` with one vector per origin state.
    """
    mom = _population_moments(config, n_nodes)
    coefs = {}
    iters = 0
    for origin_idx, origin in enumerate((1, 2)):
        theta = config.coefficients(origin).copy()
        for it in range(1, max_iter + 1):
            U, J = _marginal_score(mom, origin_idx, theta)
            step = np.linalg.solve(J, U)
            theta += step
            if np.abs(step).max() <= tol:
                iters = max(iters, it)
                break
        else:
            raise ConvergenceError(
                f"population score equations did not converge for origin "
                f"{origin}",
                origin=origin, iterations=max_iter,
                grad_norm=float(np.abs(U).max()),
            )
        coefs[origin] = theta
    return MarginalSolution(
        coefficients=coefs,
        feature_names=mom["feature_names"],
        iterations=iters,
        n_nodes=n_nodes,
    )


def calibrate_to_marginal(config: SimConfig, targets: Mapping, *,
                          n_nodes: int = 40, tol: float = 1e-10,
                          max_iter: int = 200) -> SimConfig:
    """Find conditional coefficients whose marginal counterparts hit
    ``targets``.

    Fixed-point iteration on ``conditional += target - marginal``; the
    attenuation map is contractive at the variance scales this module
    works with, and the two origin blocks are iterated jointly because
    the within-course occupancy couples them.

    Args:
        config: starting design; its coefficients seed the iteration.
        targets: mapping origin -> length-10 marginal coefficient vector.

    Returns:
        A new :class:`SimConfig` with calibrated coefficient fields.
    """
    t1 = np.asarray(targets[1], dtype=np.float64)
    t2 = np.asarray(targets[2], dtype=np.float64)
    cfg = config
    gap = float("inf")
    for _ in range(max_iter):
        sol = marginal_coefficients(cfg, n_nodes=n_nodes)
        r1 = t1 - sol.coefficients[1]
        r2 = t2 - sol.coefficients[2]
        gap = max(np.abs(r1).max(), np.abs(r2).max())
        if gap <= tol:
            return cfg
        cfg = replace(
            cfg,
            coefficients_from_1=tuple(
                np.asarray(cfg.coefficients_from_1) + r1),
            coefficients_from_2=tuple(
                np.asarray(cfg.coefficients_from_2) + r2),
        )
    raise ConvergenceError(
        f"calibration did not reach the marginal targets within "
        f"{max_iter} fixed-point iterations (residual {gap:.2e})",
        origin=None, iterations=max_iter, grad_norm=gap,
    )


# ---------------------------------------------------------------------------
# Extreme-scale marginal truth (streamed)
# ---------------------------------------------------------------------------

@dataclass
class MarginalTruth:
    """Marginal coefficients estimated from one streamed giant dataset."""

    coefficients: dict       # origin -> (p,)
    standard_errors: dict    # origin -> (p,) from the final information
    feature_names: tuple
    n_rows: int
    n_practices: int
    scale_factor: int
    inflation: str
    iterations: int
    seed: int

    def as_theta(self) -> dict:
        return {o: np.asarray(v, dtype=np.float64)
                for o, v in self.coefficients.items()}

    def to_dict(self) -> dict:
        return {
            "coefficients": {str(o): [float(x) for x in v]
                             for o, v in self.coefficients.items()},
            "standard_errors": {str(o): [float(x) for x in v]
                                for o, v in self.standard_errors.items()},
            "feature_names": list(self.feature_names),
            "n_rows": self.n_rows,
            "n_practices": self.n_practices,
            "scale_factor": self.scale_factor,
            "inflation": self.inflation,
            "iterations": self.iterations,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _inflated_config(config: SimConfig, scale_factor: int,
                     inflation: str) -> SimConfig:
    """Apply the patient-count inflation rule; practices scale separately."""
    law = config.patients_per_practice
    if inflation == "none":
        return config
    if inflation == "scale":
        if law.kind in ("lognormal", "geometric"):
            law = replace(law, mean=law.mean * scale_factor)
        elif law.kind == "fixed":
            law = replace(law, value=law.value * scale_factor)
        else:
            values, probs = law._finite()
            law = SizeLaw.table(
                tuple(int(v) * scale_factor for v in values), tuple(probs))
        return replace(config, patients_per_practice=law)
    if inflation == "power":
        # benchmark-style rule: n -> round(1000 * n^(1/4)); needs a
        # finite base law so the mapped law stays exact
        values, probs = law._finite()
        mapped = [max(1, int(round(1000.0 * float(v) ** 0.25)))
                  for v in values]
        agg: dict = {}
        for v, p in zip(mapped, probs):
            agg[v] = agg.get(v, 0.0) + float(p)
        items = sorted(agg.items())
        return replace(config, patients_per_practice=SizeLaw.table(
            tuple(v for v, _ in items), tuple(p for _, p in items)))
    raise ConfigError(
        f"unknown inflation rule {inflation!r}; choose 'scale', 'none' "
        f"or 'power'"
    )


def _compact_rows(batch: _Batch) -> tuple:
    """Flatten one batch to (cell48, log_gap, outcome) transition rows."""
    m = batch.n_visits
    max_m = batch.states.shape[1]
    cat = np.minimum(batch.course_index, 4) - 1
    cell24 = (cat * 6 + batch.dose * 2 + batch.sulphate).astype(np.int64)
    cells, gaps, ys = [], [], []
    for k in range(max_m - 1):
        live = m >= k + 2
        if not live.any():
            break
        origin0 = batch.states[live, k].astype(np.int64) - 1
        cells.append((origin0 * 24 + cell24[live]).astype(np.uint8))
        gaps.append(batch.log_gaps[live, k].astype(np.float32))
        ys.append((batch.states[live, k + 1] == 2).astype(np.uint8))
    if not cells:
        return (np.empty(0, np.uint8), np.empty(0, np.float32),
                np.empty(0, np.uint8))
    return (np.concatenate(cells), np.concatenate(gaps), np.concatenate(ys))


def marginal_truth(config: SimConfig, scale_factor: int, *,
                   inflation: str = "scale", seed: int | None = None,
                   threads: int = 1, max_iter: int = 50,
                   step_tol: float = 1e-10) -> MarginalTruth:
    """Approximate the marginal coefficients with one extreme-scale fit.

    The practice count is multiplied by ``scale_factor`` and patient
    counts follow the ``inflation`` rule: ``"scale"`` (default)
    multiplies them by the same factor, ``"none"`` leaves them, and
    ``"power"`` applies the 1000 * n**(1/4) rule to a finite base law.
    Data are generated in fixed-size practice batches and reduced to
    compact per-transition records (a covariate-cell byte, a float32 log
    gap, an outcome bit), so memory stays near six bytes per transition,
    never the visit table.

    The fit is a plain Newton solve of the marginal logistic score over
    per-cell sufficient statistics, started at the conditional
    coefficients; convergence is a step max-norm below ``step_tol``.

    Args:
        config: the conditional design; ``seed`` overrides its seed.
        scale_factor: practice-count multiplier, >= 1.
        inflation: patient-count rule, see above.
        threads: worker threads for batch generation; the output is
            identical for any thread count.

    Returns:
        A :class:`MarginalTruth` with coefficients, information-based
        standard errors and row tallies.
    """
    if scale_factor < 1:
        raise ConfigError("scale_factor must be >= 1")
    big = _inflated_config(config, scale_factor, inflation)
    G = config.n_practices * scale_factor
    run_seed = config.seed if seed is None else seed

    spec = two_state_spec()
    Z48, gap_pos = _cell_design(spec)
    coef = np.vstack([config.coefficients(1), config.coefficients(2)])
    base_eta, gap_slope = _cell_eta(Z48, gap_pos, coef)

    n_batches = -(-G // _PRACTICE_BATCH)

    def one(b: int) -> tuple:
        keep = min(_PRACTICE_BATCH, G - b * _PRACTICE_BATCH)
        batch = _draw_batch(big, (run_seed, GENERATE), b, keep,
                            base_eta, gap_slope)
        return _compact_rows(batch)

    if threads > 1 and n_batches > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(one, range(n_batches)))
    else:
        chunks = [one(b) for b in range(n_batches)]

    n_rows = int(sum(len(c[0]) for c in chunks))
    if n_rows == 0:
        raise ConfigError("the configured laws produced no transitions")

    theta = coef.copy()  # start at the conditional values
    e_gap = np.zeros(Z48.shape[1])
    e_gap[gap_pos] = 1.0
    iterations = 0
    H_blocks: list = [None, None]
    max_step = float("inf")
    for it in range(1, max_iter + 1):
        base, slope = _cell_eta(Z48, gap_pos, theta)
        SR = np.zeros(48)
        SRL = np.zeros(48)
        SW = np.zeros(48)
        SWL = np.zeros(48)
        SWL2 = np.zeros(48)
        for cells, gaps, ys in chunks:
            lv = gaps.astype(np.float64)
            p = _expit(base[cells] + slope[cells] * lv)
            r = ys - p
            w = p * (1.0 - p)
            SR += np.bincount(cells, weights=r, minlength=48)
            SRL += np.bincount(cells, weights=r * lv, minlength=48)
            SW += np.bincount(cells, weights=w, minlength=48)
            SWL += np.bincount(cells, weights=w * lv, minlength=48)
            SWL2 += np.bincount(cells, weights=w * lv * lv, minlength=48)
        max_step = 0.0
        for o in range(2):
            sl = slice(o * 24, (o + 1) * 24)
            Z = Z48[sl]
            U = Z.T @ SR[sl] + e_gap * SRL[sl].sum()
            H = Z.T @ (SW[sl][:, None] * Z)
            t = Z.T @ SWL[sl]
            H[gap_pos, :] += t
            H[:, gap_pos] += t
            H[gap_pos, gap_pos] += SWL2[sl].sum()
            step = np.linalg.solve(H, U)
            theta[o] += step
            H_blocks[o] = H
            max_step = max(max_step, float(np.abs(step).max()))
        iterations = it
        if np.abs(theta).max() > 30.0:
            raise ConvergenceError(
                "extreme-scale fit diverged (coefficient beyond 30)",
                origin=None, iterations=it, grad_norm=max_step,
            )
        if max_step <= step_tol:
            break
    else:
        raise ConvergenceError(
            f"extreme-scale fit did not converge in {max_iter} iterations",
            origin=None, iterations=max_iter, grad_norm=max_step,
        )

    ses = {o + 1: np.sqrt(np.diag(np.linalg.inv(H_blocks[o])))
           for o in range(2)}
    return MarginalTruth(
        coefficients={1: theta[0].copy(), 2: theta[1].copy()},
        standard_errors=ses,
        feature_names=spec.feature_names(1),
        n_rows=n_rows,
        n_practices=G,
        scale_factor=scale_factor,
        inflation=inflation,
        iterations=iterations,
        seed=run_seed,
    )


# ---------------------------------------------------------------------------
# Bias / coverage study
# ---------------------------------------------------------------------------

@dataclass
class CoverageRow:
    """Per-coefficient results across the simulated datasets.

    ``bias`` is the plain mean of (estimate - truth).  ``adjusted_bias``
    subtracts a mean-zero control variate, the one-step approximation
    ``solve(mean information, score at truth)`` computed per dataset,
    which estimates the same quantity with a much smaller Monte Carlo
    error.  Both carry standard errors.
    """

    origin: object
    destination: object
    predictor: str
    true_value: float
    mean_estimate: float
    bias: float
    bias_se: float
    adjusted_bias: float
    adjusted_bias_se: float
    coverage: dict       # method -> fraction in [0, 1]
    n_datasets: dict     # method -> datasets contributing


@dataclass
class CoverageStudy:
    """Bias and CI coverage of the bootstrap methods on simulated data."""

    rows: list
    methods: tuple
    level: float
    n_datasets: int
    n_replicates: int
    seed: int
    patient_correlation: float
    truth_source: str
    failures: list       # [(dataset index, stage, reason)]

    @property
    def n_failed(self) -> int:
        return len({d for d, _, _ in self.failures})

    def to_csv(self) -> str:
        """Long-format CSV, one row per (origin, predictor).

        Leading result columns follow the benchmark layout: the true
        value, bias scaled by 1e4 and per-method coverage percentages.
        The variance-reduced bias estimate and the standard errors come
        after.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["origin", "destination", "predictor", "true_value",
                "bias_1e4"]
        head += [f"coverage_{m}_pct" for m in self.methods]
        head += ["adjusted_bias_1e4", "bias_se_1e4",
                 "adjusted_bias_se_1e4", "mean_estimate"]
        head += [f"n_datasets_{m}" for m in self.methods]
        w.writerow(head)
        for r in self.rows:
            row = [r.origin, r.destination, r.predictor,
                   f"{r.true_value:.10g}", f"{r.bias * 1e4:.4f}"]
            row += [f"{100.0 * r.coverage[m]:.4g}" for m in self.methods]
            row += [f"{r.adjusted_bias * 1e4:.4f}",
                    f"{r.bias_se * 1e4:.4f}",
                    f"{r.adjusted_bias_se * 1e4:.4f}",
                    f"{r.mean_estimate:.10g}"]
            row += [r.n_datasets[m] for m in self.methods]
            w.writerow(row)
        return buf.getvalue()


_METHODS = ("direct", "efb")


def _resolve_truth(config: SimConfig, truth) -> tuple:
    if truth is None:
        sol = marginal_coefficients(config)
        return sol.as_theta(), "quadrature"
    if isinstance(truth, MarginalSolution):
        return truth.as_theta(), "quadrature"
    if isinstance(truth, MarginalTruth):
        return truth.as_theta(), f"extreme-scale x{truth.scale_factor}"
    theta = {int(o): np.asarray(v, dtype=np.float64)
             for o, v in dict(truth).items()}
    if set(theta) != {1, 2}:
        raise ConfigError("truth mapping needs origins 1 and 2")
    return theta, "supplied"


def _study_dataset(config: SimConfig, spec: ModelSpec, d: int, seed: int,
                   B: int, methods: tuple, level: float,
                   theta_true: dict) -> dict:
    """Simulate, fit and bootstrap one dataset; returns partial tallies."""
    out: dict = {"index": d, "failures": [], "covered": {}}
    batches = _generate_batches(config, (seed, DATASET, d, GENERATE))
    table = _assemble_table(batches)
    transitions = build_transitions(table, spec)
    try:
        fit = estimator.fit(transitions)
    except (SeparationError, ConvergenceError) as e:
        out["failures"].append((d, "fit", str(e)))
        return out

    delta, scores, infos = {}, {}, {}
    for origin in (1, 2):
        block = transitions.blocks[origin]
        tt = theta_true[origin]
        U, info = estimator.score_and_information(block, tt)
        delta[origin] = fit.blocks[origin].theta - tt
        scores[origin] = U
        infos[origin] = info
    out["delta"] = delta
    out["score"] = scores
    out["information"] = infos

    M = replicate_multiplicities(transitions.n_practices, B,
                                 (seed, DATASET, d))
    for method in methods:
        try:
            if method == "direct":
                bs = resampling.direct_bootstrap(
                    transitions, B, (seed, DATASET, d),
                    fit=fit, multiplicities=M)
            else:
                bs = resampling.efb(
                    fit, transitions, B, (seed, DATASET, d),
                    multiplicities=M)
            ci = percentile_ci(bs, level=level)
        except (ResamplingError, ConfigError, ConvergenceError) as e:
            out["failures"].append((d, method, str(e)))
            continue
        hits = {}
        for origin in (1, 2):
            blk = fit.blocks[origin]
            inside = np.zeros(blk.dim, dtype=bool)
            for row in ci.rows:
                if row.origin != origin:
                    continue
                j = blk.coefficient_index(row.destination, row.predictor)
                inside[j] = (row.lower <= theta_true[origin][j] <= row.upper)
            hits[origin] = inside
        out["covered"][method] = hits
    return out


def coverage_study(config: SimConfig, n_datasets: int, n_replicates: int, *,
                   methods: Sequence[str] = _METHODS, level: float = 0.95,
                   seed: int | None = None, threads: int = 1,
                   truth=None) -> CoverageStudy:
    """Estimate per-coefficient bias and CI coverage over simulated data.

    For each dataset: simulate with a dataset-specific substream, fit,
    run every requested bootstrap method on a shared resample sequence,
    and record whether each percentile interval covers the marginal
    truth.  Failures (a dataset that separates, a method whose refits
    fail) are recorded and skipped, never fatal, unless no dataset at all
    fits.

    Args:
        config: the conditional design.
        n_datasets: number of simulated datasets.
        n_replicates: bootstrap replicates per dataset and method.
        methods: any of "direct", "efb".
        level: CI level for the coverage assessment.
        seed: study seed (default ``config.seed``).
        threads: worker threads over datasets; results do not depend on
            the thread count.
        truth: ``None`` (solve by quadrature), a
            :class:`MarginalSolution`, a :class:`MarginalTruth`, or a
            mapping ``{1: vector, 2: vector}``.

    Returns:
        A :class:`CoverageStudy` whose rows follow block order (origin 1
        then 2) and predictor order.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in _METHODS:
            raise ConfigError(
                f"unknown bootstrap method {m!r}; choose from {_METHODS}"
            )
    if not methods:
        raise ConfigError("at least one bootstrap method is required")
    if n_datasets < 1:
        raise ConfigError("n_datasets must be >= 1")
    if n_replicates < 2:
        raise ConfigError("n_replicates must be >= 2")
    run_seed = config.seed if seed is None else seed
    theta_true, truth_source = _resolve_truth(config, truth)
    spec = two_state_spec()

    def one(d: int) -> dict:
        return _study_dataset(config, spec, d, run_seed, n_replicates,
                              methods, level, theta_true)

    if threads > 1 and n_datasets > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_datasets)))
    else:
        results = [one(d) for d in range(n_datasets)]

    failures: list = []
    deltas: dict = {1: [], 2: []}
    scores: dict = {1: [], 2: []}
    info_sum: dict = {1: None, 2: None}
    cover_count: dict = {m: {1: None, 2: None} for m in methods}
    cover_n = {m: 0 for m in methods}

    for res in results:
        failures.extend(res["failures"])
        if "delta" not in res:
            continue
        for origin in (1, 2):
            deltas[origin].append(res["delta"][origin])
            scores[origin].append(res["score"][origin])
            if info_sum[origin] is None:
                info_sum[origin] = res["information"][origin].copy()
            else:
                info_sum[origin] += res["information"][origin]
        for m in methods:
            if m not in res["covered"]:
                continue
            cover_n[m] += 1
            for origin in (1, 2):
                inside = res["covered"][m][origin].astype(np.int64)
                if cover_count[m][origin] is None:
                    cover_count[m][origin] = inside.copy()
                else:
                    cover_count[m][origin] += inside

    n_used = len(deltas[1])
    if n_used == 0:
        raise ConvergenceError(
            "every simulated dataset failed to fit",
            origin=None, iterations=0, grad_norm=float("nan"),
        )

    names = spec.feature_names(1)
    rows = []
    for origin in (1, 2):
        D = np.vstack(deltas[origin])            # (n_used, p)
        S = np.vstack(scores[origin])            # (n_used, p)
        Ibar = info_sum[origin] / n_used
        control = np.linalg.solve(Ibar, S.T).T   # (n_used, p)
        adj = D - control
        for j, name in enumerate(names):
            coverage = {}
            counts = {}
            for m in methods:
                cc = cover_count[m][origin]
                coverage[m] = (float(cc[j]) / cover_n[m]
                               if cover_n[m] else float("nan"))
                counts[m] = cover_n[m]
            rows.append(CoverageRow(
                origin=origin,
                destination=2,
                predictor=name,
                true_value=float(theta_true[origin][j]),
                mean_estimate=float(theta_true[origin][j] + D[:, j].mean()),
                bias=float(D[:, j].mean()),
                bias_se=float(D[:, j].std(ddof=1) / np.sqrt(n_used)),
                adjusted_bias=float(adj[:, j].mean()),
                adjusted_bias_se=float(
                    adj[:, j].std(ddof=1) / np.sqrt(n_used)),
                coverage=coverage,
                n_datasets=counts,
            ))
    return CoverageStudy(
        rows=rows,
        methods=methods,
        level=level,
        n_datasets=n_datasets,
        n_replicates=n_replicates,
        seed=run_seed,
        patient_correlation=config.patient_correlation,
        truth_source=truth_source,
        failures=failures,
    )
