"""Visit-level data model for discrete-time disease-progression analysis.

The data are nested: practices contain patients, patients undergo numbered
courses of treatment, and each course is observed at a sequence of
assessment visits.  A visit records the day within its course (day 0 is
the course start) and the disease state observed.  Consecutive visits in
a course define one observed state transition; transitions grouped by
origin state are what the regression machinery in
:mod:`visitchain.estimator` consumes.

Main pieces:

* :class:`StateSpace` -- state labels, absorbing states, modelled origin
  states, and the reference destination of the transition logits.
* :class:`VisitRecord` / :class:`VisitTable` -- one visit, and a columnar
  table of visits kept in canonical order.
* :class:`ModelSpec` -- declarative regression design: course-number
  coding, follow-up-time and gap-time transforms, covariate codings and
  pairwise interactions.
* :func:`build_transitions` -- pair visits into per-origin design blocks.
* :func:`transition_matrix` -- origin-by-destination transition counts.
* :func:`load_visits` / :meth:`VisitTable.to_csv` -- CSV interchange.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, EncodingError, VisitDataError

__all__ = [
    "StateSpace",
    "VisitRecord",
    "VisitTable",
    "NumericCovariate",
    "CategoricalCovariate",
    "ModelSpec",
    "TransitionRow",
    "DesignBlock",
    "TransitionSet",
    "TransitionCounts",
    "build_transitions",
    "transition_matrix",
    "load_visits",
]

CORE_COLUMNS = ("practice_id", "patient_id", "course", "visit", "day", "state")

# Centering constant of the shifted-log transforms: log(x + 1) - LOG_SHIFT.
LOG_SHIFT = 4.0


def format_number(x) -> str:
    """Shortest round-trip decimal text for CSV output (ints stay ints)."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# State space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateSpace:
    """The finite set of disease states and their roles.

    Args:
        states: ordered state labels (ints or strings).  The order fixes
            destination indexing everywhere downstream.
        absorbing: labels that are never left once entered.
        origin_states: labels transitions are modelled from.  Defaults to
            all non-absorbing states.
        reference_destination: destination whose logit is pinned at zero.
    """

    states: tuple = (1, 2, 3, 4)
    absorbing: frozenset = frozenset({4})
    origin_states: tuple = None  # type: ignore[assignment]
    reference_destination: object = None

    def __post_init__(self):
        states = tuple(self.states)
        if len(states) < 2:
            raise ConfigError("a state space needs at least 2 states")
        if len(set(states)) != len(states):
            raise ConfigError(f"duplicate state labels: {states}")
        absorbing = frozenset(self.absorbing)
        if not absorbing <= set(states):
            raise ConfigError("absorbing states must be a subset of states")
        origins = self.origin_states
        if origins is None:
            origins = tuple(s for s in states if s not in absorbing)
        else:
            origins = tuple(origins)
            if not set(origins) <= set(states):
                raise ConfigError("origin_states must be a subset of states")
            if set(origins) & absorbing:
                raise ConfigError("absorbing states cannot be origin states")
        if not origins:
            raise ConfigError("no origin states: every state is absorbing")
        ref = self.reference_destination
        if ref is None:
            ref = states[0]
        elif ref not in states:
            raise ConfigError(
                f"reference destination {ref!r} is not a state label"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "absorbing", absorbing)
        object.__setattr__(self, "origin_states", origins)
        object.__setattr__(self, "reference_destination", ref)

    def index(self, label) -> int:
        """Position of a state label in the state order."""
        try:
            return self.states.index(label)
        except ValueError:
            raise ConfigError(f"unknown state label {label!r}") from None

    def is_absorbing(self, label) -> bool:
        return label in self.absorbing

    def nonreference_states(self) -> tuple:
        """All states except the reference destination, in state order."""
        ref = self.reference_destination
        return tuple(s for s in self.states if s != ref)

    def to_dict(self) -> dict:
        return {
            "states": list(self.states),
            "absorbing": sorted(self.absorbing, key=self.states.index),
            "origin_states": list(self.origin_states),
            "reference_destination": self.reference_destination,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StateSpace":
        return cls(
            states=tuple(d["states"]),
            absorbing=frozenset(d.get("absorbing", ())),
            origin_states=tuple(d["origin_states"]) if "origin_states" in d else None,
            reference_destination=d.get("reference_destination"),
        )


# ---------------------------------------------------------------------------
# Visit records and the columnar table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VisitRecord:
    """One observed assessment visit.

    Args:
        practice_id: top-level cluster key (opaque; compared by string form).
        patient_id: second-level cluster key within the practice.
        course: 1-based index of the treatment course within the patient.
        visit: 1-based index of the visit within the course.
        day: days since the course started; the course-start record has day 0.
        state: disease-state label at this visit.
        covariates: course-level covariate values, constant within a course.
    """

    practice_id: object
    patient_id: object
    course: int
    visit: int
    day: float
    state: object
    covariates: Mapping[str, object] = field(default_factory=dict)


def _as_str_keys(values: np.ndarray) -> np.ndarray:
    return np.array([str(v) for v in values], dtype=object)


class VisitTable:
    """Columnar table of visits in canonical order.

    Canonical order sorts by (practice, patient, course, visit), with the
    identifier keys compared by their string form.  Iterating the table
    yields :class:`VisitRecord` objects, so a ``VisitTable`` can be used
    anywhere a sequence of visit records is expected.
    """

    def __init__(self, practice_ids, patient_ids, courses, visits, days,
                 states, covariates=None, *, _presorted=False):
        self.practice_ids = np.asarray(practice_ids, dtype=object)
        self.patient_ids = np.asarray(patient_ids, dtype=object)
        self.courses = np.asarray(courses, dtype=np.int64)
        self.visits = np.asarray(visits, dtype=np.int64)
        self.days = np.asarray(days, dtype=np.float64)
        self.states = np.asarray(states, dtype=object)
        self.covariates = {
            str(k): np.asarray(v, dtype=object)
            for k, v in (covariates or {}).items()
        }

        n = len(self.practice_ids)
        for name, col in self._all_columns():
            if len(col) != n:
                raise VisitDataError(
                    f"column {name!r} has {len(col)} entries, expected {n}"
                )
        if n and (self.courses < 1).any():
            raise VisitDataError("course indices must be >= 1")
        if n and (self.visits < 1).any():
            raise VisitDataError("visit indices must be >= 1")
        if n and not np.isfinite(self.days).all():
            raise VisitDataError("visit days must be finite")
        if n and (self.days < 0).any():
            raise VisitDataError("visit days must be non-negative")

        self._practice_keys = _as_str_keys(self.practice_ids)
        self._patient_keys = _as_str_keys(self.patient_ids)
        if not _presorted and n:
            order = np.lexsort((self.visits, self.courses,
                                self._patient_keys, self._practice_keys))
            if not (order == np.arange(n)).all():
                self._reorder(order)

    def _all_columns(self):
        yield "practice_id", self.practice_ids
        yield "patient_id", self.patient_ids
        yield "course", self.courses
        yield "visit", self.visits
        yield "day", self.days
        yield "state", self.states
        for k, v in self.covariates.items():
            yield k, v

    def _reorder(self, order: np.ndarray) -> None:
        self.practice_ids = self.practice_ids[order]
        self.patient_ids = self.patient_ids[order]
        self.courses = self.courses[order]
        self.visits = self.visits[order]
        self.days = self.days[order]
        self.states = self.states[order]
        self.covariates = {k: v[order] for k, v in self.covariates.items()}
        self._practice_keys = self._practice_keys[order]
        self._patient_keys = self._patient_keys[order]

    def __len__(self) -> int:
        return len(self.practice_ids)

    def __iter__(self) -> Iterator[VisitRecord]:
        names = list(self.covariates)
        for i in range(len(self)):
            yield VisitRecord(
                practice_id=self.practice_ids[i],
                patient_id=self.patient_ids[i],
                course=int(self.courses[i]),
                visit=int(self.visits[i]),
                day=float(self.days[i]),
                state=self.states[i],
                covariates={k: self.covariates[k][i] for k in names},
            )

    @property
    def covariate_names(self) -> tuple:
        return tuple(self.covariates)

    @classmethod
    def from_records(cls, records: Iterable[VisitRecord]) -> "VisitTable":
        records = list(records)
        cov_names: tuple = ()
        if records:
            cov_names = tuple(records[0].covariates)
            for r in records:
                if tuple(r.covariates) != cov_names and \
                        set(r.covariates) != set(cov_names):
                    raise VisitDataError(
                        "all visit records must carry the same covariate names"
                    )
        return cls(
            practice_ids=[r.practice_id for r in records],
            patient_ids=[r.patient_id for r in records],
            courses=[r.course for r in records],
            visits=[r.visit for r in records],
            days=[r.day for r in records],
            states=[r.state for r in records],
            covariates={k: [r.covariates[k] for r in records] for k in cov_names},
        )

    @classmethod
    def coerce(cls, visits) -> "VisitTable":
        """Accept a VisitTable or any iterable of VisitRecord."""
        if isinstance(visits, cls):
            return visits
        return cls.from_records(visits)

    def to_records(self) -> list:
        return list(self)

    def to_csv(self, path_or_buf) -> None:
        """Write the table as UTF-8 CSV with the canonical column order."""
        own = isinstance(path_or_buf, (str, bytes))
        f = open(path_or_buf, "w", newline="", encoding="utf-8") if own \
            else path_or_buf
        try:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(list(CORE_COLUMNS) + list(self.covariates))
            cov_cols = list(self.covariates.values())
            for i in range(len(self)):
                row = [
                    str(self.practice_ids[i]),
                    str(self.patient_ids[i]),
                    str(int(self.courses[i])),
                    str(int(self.visits[i])),
                    format_number(self.days[i]),
                    str(self.states[i]),
                ]
                for col in cov_cols:
                    v = col[i]
                    row.append(format_number(v) if isinstance(
                        v, (int, float, np.integer, np.floating)) else str(v))
                w.writerow(row)
        finally:
            if own:
                f.close()


def _parse_state_token(tok: str):
    """States are ints when they look like ints, otherwise raw strings."""
    try:
        return int(tok)
    except ValueError:
        return tok


def load_visits(path) -> VisitTable:
    """Read a visit CSV into a :class:`VisitTable`.

    The file must have a header with the six core columns
    ``practice_id,patient_id,course,visit,day,state``; any additional
    columns are kept as (string-valued) covariates.

    Raises:
        VisitDataError: on missing columns or malformed values, with the
            offending line number in the message.
    """
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise VisitDataError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise VisitDataError(f"{path}: duplicate column names in header")
        missing = [c for c in CORE_COLUMNS if c not in header]
        if missing:
            raise VisitDataError(
                f"{path}: missing required columns {', '.join(missing)}"
            )
        idx = {c: header.index(c) for c in header}
        cov_names = [c for c in header if c not in CORE_COLUMNS]

        cols: dict = {c: [] for c in header}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and row[0].strip() == ""):
                continue  # ignore blank lines
            if len(row) != len(header):
                raise VisitDataError(
                    f"{path}:{lineno}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            for c in header:
                cols[c].append(row[idx[c]])

        def ints(name):
            out = []
            for lineno, tok in enumerate(cols[name], start=2):
                try:
                    out.append(int(tok))
                except ValueError:
                    raise VisitDataError(
                        f"{path}:{lineno}: column {name!r} must be an "
                        f"integer, got {tok!r}"
                    ) from None
            return out

        def floats(name):
            out = []
            for lineno, tok in enumerate(cols[name], start=2):
                try:
                    out.append(float(tok))
                except ValueError:
                    raise VisitDataError(
                        f"{path}:{lineno}: column {name!r} must be numeric, "
                        f"got {tok!r}"
                    ) from None
            return out

        return VisitTable(
            practice_ids=cols["practice_id"],
            patient_ids=cols["patient_id"],
            courses=ints("course"),
            visits=ints("visit"),
            days=floats("day"),
            states=[_parse_state_token(t) for t in cols["state"]],
            covariates={c: cols[c] for c in cov_names},
        )


# ---------------------------------------------------------------------------
# Model specification and feature encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NumericCovariate:
    """A covariate passed through as a single numeric column."""

    name: str

    def to_dict(self) -> dict:
        return {"name": self.name, "type": "numeric"}


@dataclass(frozen=True)
class CategoricalCovariate:
    """A covariate one-hot encoded against a reference level.

    Args:
        name: column name in the visit data.
        levels: permitted levels in encoding order.  Leave ``None`` to
            freeze the sorted observed levels when the spec is resolved.
        reference: level absorbed into the intercept.  Defaults to the
            first level in sorted order.
        missing_level: optional bucket for empty/NaN values and levels
            not in ``levels``.  Without it such values raise
            :class:`EncodingError`.
    """

    name: str
    levels: tuple | None = None
    reference: str | None = None
    missing_level: str | None = None

    def __post_init__(self):
        if self.levels is not None:
            levels = tuple(str(v) for v in self.levels)
            if len(set(levels)) != len(levels):
                raise ConfigError(f"duplicate levels for covariate {self.name!r}")
            if self.missing_level is not None and \
                    self.missing_level not in levels:
                levels = levels + (self.missing_level,)
            object.__setattr__(self, "levels", levels)
            ref = self.reference if self.reference is not None else levels[0]
            if ref not in levels:
                raise ConfigError(
                    f"reference level {ref!r} not among levels of "
                    f"covariate {self.name!r}"
                )
            object.__setattr__(self, "reference", ref)

    @property
    def resolved(self) -> bool:
        return self.levels is not None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "type": "categorical",
            "levels": list(self.levels) if self.levels is not None else None,
            "reference": self.reference,
            "missing_level": self.missing_level,
        }


def _covariate_from_dict(d: Mapping):
    kind = d.get("type", "categorical")
    if kind == "numeric":
        return NumericCovariate(name=d["name"])
    if kind == "categorical":
        levels = d.get("levels")
        return CategoricalCovariate(
            name=d["name"],
            levels=tuple(levels) if levels is not None else None,
            reference=d.get("reference"),
            missing_level=d.get("missing_level"),
        )
    raise ConfigError(f"unknown covariate type {kind!r}")


_TIME_TRANSFORMS = ("shifted_log_quadratic", "none")
_GAP_TRANSFORMS = ("shifted_log_quadratic", "log", "none")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the transition-regression design.

    The encoded predictor vector is, in order: intercept; course-category
    indicators; follow-up-time features; gap-time features; covariate
    blocks in declaration order; interaction blocks in declaration order.
    The full predictor list is deterministic given the spec.

    Args:
        space: the state space.
        covariates: covariate codings in declaration order.
        interactions: pairs of covariate names whose encoded columns are
            multiplied pairwise.
        max_course_category: courses are coded as indicators
            ``I(course == 2), ..., I(course >= max)``; ``None`` disables
            course features.
        time_transform: ``"shifted_log_quadratic"`` emits
            ``I(day == 0)`` (for the configured origins), ``log(day+1) - 4``
            and its square; ``"none"`` emits nothing.
        gap_transform: ``"shifted_log_quadratic"`` emits ``log(gap+1) - 4``
            and its square; ``"log"`` emits ``log(gap)``; ``"none"``
            emits nothing.
        time_zero_origins: origins that get the ``I(day == 0)`` indicator.
            ``None`` means the first state only, where courses start.
    """

    space: StateSpace = field(default_factory=StateSpace)
    covariates: tuple = ()
    interactions: tuple = ()
    max_course_category: int | None = 4
    time_transform: str = "shifted_log_quadratic"
    gap_transform: str = "shifted_log_quadratic"
    time_zero_origins: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "interactions",
                           tuple((a, b) for a, b in self.interactions))
        if self.time_transform not in _TIME_TRANSFORMS:
            raise ConfigError(
                f"unknown time_transform {self.time_transform!r}; "
                f"choose from {_TIME_TRANSFORMS}"
            )
        if self.gap_transform not in _GAP_TRANSFORMS:
            raise ConfigError(
                f"unknown gap_transform {self.gap_transform!r}; "
                f"choose from {_GAP_TRANSFORMS}"
            )
        if self.max_course_category is not None and self.max_course_category < 2:
            raise ConfigError("max_course_category must be >= 2 or None")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate covariate names: {names}")
        known = set(names)
        for a, b in self.interactions:
            if a not in known or b not in known:
                raise ConfigError(
                    f"interaction ({a!r}, {b!r}) references an undeclared "
                    f"covariate"
                )
            if a == b:
                raise ConfigError(f"interaction of {a!r} with itself")
        if self.time_zero_origins is not None:
            tz = tuple(self.time_zero_origins)
            for s in tz:
                if s not in self.space.states:
                    raise ConfigError(
                        f"time_zero_origins entry {s!r} is not a state"
                    )
            object.__setattr__(self, "time_zero_origins", tz)

    # -- resolution -------------------------------------------------------

    @property
    def resolved(self) -> bool:
        return all(not isinstance(c, CategoricalCovariate) or c.resolved
                   for c in self.covariates)

    def resolve(self, visits: "VisitTable") -> "ModelSpec":
        """Freeze unspecified categorical levels from the observed data.

        Observed distinct values (by string form) are sorted; the
        reference defaults to the first sorted level.  Returns a new spec;
        specs with all levels pinned are returned unchanged.
        """
        if self.resolved:
            return self
        table = VisitTable.coerce(visits)
        new_covs = []
        for cov in self.covariates:
            if isinstance(cov, CategoricalCovariate) and not cov.resolved:
                if cov.name not in table.covariates:
                    raise EncodingError(
                        f"covariate {cov.name!r} not present in the data"
                    )
                seen = {
                    str(v) for v in table.covariates[cov.name]
                    if not _is_missing(v)
                }
                if not seen:
                    raise EncodingError(
                        f"covariate {cov.name!r} has no non-missing values "
                        f"to infer levels from"
                    )
                cov = replace(cov, levels=tuple(sorted(seen)))
            new_covs.append(cov)
        return replace(self, covariates=tuple(new_covs))

    def resolved_time_zero_origins(self) -> tuple:
        if self.time_zero_origins is not None:
            return self.time_zero_origins
        return (self.space.states[0],)

    # -- encoding ---------------------------------------------------------

    def feature_names(self, origin) -> tuple:
        """Predictor names for one origin state's block, intercept first."""
        names = ["intercept"]
        names += self._course_names()
        names += self._time_names(origin)
        names += self._gap_names()
        enc = {c.name: self._covariate_names(c) for c in self.covariates}
        for c in self.covariates:
            names += enc[c.name]
        for a, b in self.interactions:
            names += [f"{na}:{nb}" for na in enc[a] for nb in enc[b]]
        return tuple(names)

    def _course_names(self):
        m = self.max_course_category
        if m is None:
            return []
        return [f"course_{c}" for c in range(2, m)] + [f"course_ge{m}"]

    def _time_names(self, origin):
        if self.time_transform == "none":
            return []
        names = []
        if origin in self.resolved_time_zero_origins():
            names.append("time_zero")
        return names + ["log_time", "log_time_sq"]

    def _gap_names(self):
        if self.gap_transform == "none":
            return []
        if self.gap_transform == "log":
            return ["log_gap"]
        return ["log_gap", "log_gap_sq"]

    def _covariate_names(self, cov):
        if isinstance(cov, NumericCovariate):
            return [cov.name]
        if not cov.resolved:
            raise ConfigError(
                f"categorical covariate {cov.name!r} has no frozen levels; "
                f"call ModelSpec.resolve(visits) first"
            )
        return [f"{cov.name}_{lv}" for lv in cov.levels if lv != cov.reference]

    def encode(self, origin, courses, days, gaps, covariates) -> np.ndarray:
        """Encode transition predictors for one origin state.

        Args:
            origin: origin-state label (selects the I(day == 0) policy).
            courses: (n,) course indices.
            days: (n,) follow-up day of the origin visit.
            gaps: (n,) gap to the next visit in days.
            covariates: mapping of covariate name to an (n,) value array.

        Returns:
            (n, p) float64 design matrix matching ``feature_names(origin)``.
        """
        courses = np.asarray(courses, dtype=np.int64)
        days = np.asarray(days, dtype=np.float64)
        gaps = np.asarray(gaps, dtype=np.float64)
        n = len(courses)
        cols: list = [np.ones(n)]

        m = self.max_course_category
        if m is not None:
            for c in range(2, m):
                cols.append((courses == c).astype(np.float64))
            cols.append((courses >= m).astype(np.float64))

        if self.time_transform != "none":
            if origin in self.resolved_time_zero_origins():
                cols.append((days == 0.0).astype(np.float64))
            lt = np.log(days + 1.0) - LOG_SHIFT
            cols.append(lt)
            cols.append(lt * lt)

        if self.gap_transform == "shifted_log_quadratic":
            lg = np.log(gaps + 1.0) - LOG_SHIFT
            cols.append(lg)
            cols.append(lg * lg)
        elif self.gap_transform == "log":
            if (gaps <= 0).any():
                raise EncodingError(
                    "gap_transform 'log' needs strictly positive gaps; "
                    "use 'shifted_log_quadratic' for data with zero gaps"
                )
            cols.append(np.log(gaps))

        encoded: dict = {}
        for cov in self.covariates:
            if cov.name not in covariates:
                raise EncodingError(f"covariate {cov.name!r} missing from data")
            encoded[cov.name] = self._encode_covariate(
                cov, np.asarray(covariates[cov.name], dtype=object)
            )
            cols.extend(encoded[cov.name])
        for a, b in self.interactions:
            for ca in encoded[a]:
                for cb in encoded[b]:
                    cols.append(ca * cb)

        return np.column_stack(cols) if cols else np.empty((n, 0))

    def _encode_covariate(self, cov, values: np.ndarray) -> list:
        if isinstance(cov, NumericCovariate):
            out = np.empty(len(values), dtype=np.float64)
            for i, v in enumerate(values):
                if _is_missing(v):
                    raise EncodingError(
                        f"missing value in numeric covariate {cov.name!r}; "
                        f"numeric covariates cannot have missing values"
                    )
                try:
                    out[i] = float(v)
                except (TypeError, ValueError):
                    raise EncodingError(
                        f"non-numeric value {v!r} in numeric covariate "
                        f"{cov.name!r}"
                    ) from None
            if not np.isfinite(out).all():
                raise EncodingError(
                    f"non-finite value in numeric covariate {cov.name!r}"
                )
            return [out]

        if not cov.resolved:
            raise ConfigError(
                f"categorical covariate {cov.name!r} has no frozen levels; "
                f"call ModelSpec.resolve(visits) first"
            )
        level_of = {lv: k for k, lv in enumerate(cov.levels)}
        missing_code = level_of.get(cov.missing_level, -1)
        codes = np.empty(len(values), dtype=np.int64)
        for i, v in enumerate(values):
            if _is_missing(v):
                if missing_code < 0:
                    raise EncodingError(
                        f"missing value in categorical covariate "
                        f"{cov.name!r} with no missing category configured"
                    )
                codes[i] = missing_code
                continue
            code = level_of.get(str(v), -1)
            if code < 0:
                if missing_code < 0:
                    raise EncodingError(
                        f"unknown level {v!r} of categorical covariate "
                        f"{cov.name!r} with no missing category configured"
                    )
                code = missing_code
            codes[i] = code
        return [
            (codes == k).astype(np.float64)
            for k, lv in enumerate(cov.levels) if lv != cov.reference
        ]

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "state_space": self.space.to_dict(),
            "covariates": [c.to_dict() for c in self.covariates],
            "interactions": [list(p) for p in self.interactions],
            "max_course_category": self.max_course_category,
            "time_transform": self.time_transform,
            "gap_transform": self.gap_transform,
            "time_zero_origins": (
                list(self.time_zero_origins)
                if self.time_zero_origins is not None else None
            ),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(
            space=StateSpace.from_dict(d.get("state_space", StateSpace().to_dict())),
            covariates=tuple(_covariate_from_dict(c)
                             for c in d.get("covariates", ())),
            interactions=tuple((a, b) for a, b in d.get("interactions", ())),
            max_course_category=d.get("max_course_category", 4),
            time_transform=d.get("time_transform", "shifted_log_quadratic"),
            gap_transform=d.get("gap_transform", "shifted_log_quadratic"),
            time_zero_origins=(
                tuple(d["time_zero_origins"])
                if d.get("time_zero_origins") is not None else None
            ),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, float) and math.isnan(v):
        return True
    if isinstance(v, np.floating) and np.isnan(v):
        return True
    return isinstance(v, str) and v.strip() == ""


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionRow:
    """One modelled transition between consecutive visits."""

    origin: object
    destination: object
    features: np.ndarray
    practice_id: object
    patient_id: object
    course: int
    visit: int


@dataclass
class DesignBlock:
    """All transitions from one origin state, fully encoded.

    ``y`` indexes ``destinations`` (the full state tuple in state order);
    ``practice_codes`` indexes the owning :class:`TransitionSet`'s
    ``practice_labels`` and is nondecreasing, so per-practice row groups
    are contiguous slices.
    """

    origin: object
    feature_names: tuple
    destinations: tuple
    reference: object
    X: np.ndarray
    y: np.ndarray
    practice_codes: np.ndarray
    patient_ids: np.ndarray
    courses: np.ndarray
    visits: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def nonreference_destinations(self) -> tuple:
        return tuple(s for s in self.destinations if s != self.reference)


class TransitionSet:
    """Per-origin design blocks plus shared practice bookkeeping."""

    def __init__(self, space, spec, practice_labels, blocks,
                 n_singleton_courses=0):
        self.space = space
        self.spec = spec
        self.practice_labels = tuple(practice_labels)
        self.blocks = dict(blocks)
        #: courses that contributed no transitions (single recorded visit)
        self.n_singleton_courses = int(n_singleton_courses)

    @property
    def n_practices(self) -> int:
        return len(self.practice_labels)

    def __len__(self) -> int:
        return sum(b.n_rows for b in self.blocks.values())

    def rows(self) -> Iterator[TransitionRow]:
        """Yield transitions row by row (origin blocks in state order)."""
        for origin in self.space.origin_states:
            block = self.blocks.get(origin)
            if block is None:
                continue
            for i in range(block.n_rows):
                yield TransitionRow(
                    origin=origin,
                    destination=block.destinations[block.y[i]],
                    features=block.X[i],
                    practice_id=self.practice_labels[block.practice_codes[i]],
                    patient_id=block.patient_ids[i],
                    course=int(block.courses[i]),
                    visit=int(block.visits[i]),
                )


def _course_boundaries(table: VisitTable) -> np.ndarray:
    """Start indices of each (practice, patient, course) group."""
    n = len(table)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    change = (
        (table._practice_keys[1:] != table._practice_keys[:-1])
        | (table._patient_keys[1:] != table._patient_keys[:-1])
        | (table.courses[1:] != table.courses[:-1])
    )
    return np.flatnonzero(np.r_[True, change])


def _course_label(table: VisitTable, i: int) -> str:
    return (f"practice {table.practice_ids[i]!r}, patient "
            f"{table.patient_ids[i]!r}, course {int(table.courses[i])}")


def _validate_courses(table: VisitTable, space: StateSpace,
                      starts: np.ndarray) -> np.ndarray:
    """Check per-course invariants; return the is-last-visit row mask."""
    n = len(table)
    if n == 0:
        return np.zeros(0, dtype=bool)

    states = table.states
    known = set(space.states)
    for i in range(n):
        if states[i] not in known:
            raise VisitDataError(
                f"unknown state label {states[i]!r} at {_course_label(table, i)}"
            )

    is_start = np.zeros(n, dtype=bool)
    is_start[starts] = True
    same_course = ~is_start[1:]  # row i+1 continues the course of row i

    dup = same_course & (table.visits[1:] <= table.visits[:-1])
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise VisitDataError(
            f"visit indices must be strictly increasing within a course "
            f"({_course_label(table, i)})"
        )
    bad_days = same_course & (table.days[1:] <= table.days[:-1])
    if bad_days.any():
        i = int(np.flatnonzero(bad_days)[0])
        raise VisitDataError(
            f"visit days must be strictly increasing within a course "
            f"({_course_label(table, i)})"
        )

    absorbing = np.array([s in space.absorbing for s in states], dtype=bool)
    trapped = same_course & absorbing[:-1]
    if trapped.any():
        i = int(np.flatnonzero(trapped)[0])
        raise VisitDataError(
            f"visit recorded after an absorbing state "
            f"({_course_label(table, i)})"
        )

    for name, col in table.covariates.items():
        for i in range(n - 1):
            if not same_course[i]:
                continue
            a, b = col[i], col[i + 1]
            if a != b and not (_is_missing(a) and _is_missing(b)):
                raise VisitDataError(
                    f"covariate {name!r} varies within a course "
                    f"({_course_label(table, i)}): {a!r} vs {b!r}"
                )

    # Multi-visit courses must include the day-0 course-start record so
    # the I(day == 0) feature is observed data rather than an assumption.
    ends = np.r_[starts[1:], n]
    multi = (ends - starts) >= 2
    bad_start = multi & (table.days[starts] != 0.0)
    if bad_start.any():
        i = int(starts[np.flatnonzero(bad_start)[0]])
        raise VisitDataError(
            f"course does not start with a day-0 record "
            f"({_course_label(table, i)})"
        )

    is_last = np.zeros(n, dtype=bool)
    is_last[ends - 1] = True
    return is_last


def build_transitions(visits, spec: ModelSpec) -> TransitionSet:
    """Pair consecutive visits into encoded per-origin design blocks.

    Args:
        visits: a :class:`VisitTable` or iterable of :class:`VisitRecord`.
        spec: the model spec; unresolved categorical levels are frozen
            from the data.

    Returns:
        A :class:`TransitionSet` with one :class:`DesignBlock` per origin
        state present in the data (absent origins get no block).

    Raises:
        VisitDataError: on any visit-invariant violation.
        EncodingError: on unencodable covariate values.
    """
    table = VisitTable.coerce(visits)
    spec = spec.resolve(table)
    space = spec.space

    starts = _course_boundaries(table)
    is_last = _validate_courses(table, space, starts)
    n = len(table)

    ends = np.r_[starts[1:], n] if n else starts
    n_singletons = int(((ends - starts) == 1).sum()) if n else 0

    origin_rows = np.flatnonzero(~is_last) if n else np.empty(0, dtype=np.int64)
    origin_states = table.states[origin_rows] if n else np.empty(0, dtype=object)
    modelled = set(space.origin_states)
    for i, s in zip(origin_rows, origin_states):
        if s not in modelled:  # absorbing origins were rejected above
            raise VisitDataError(
                f"transition from state {s!r}, which is not an origin state "
                f"({_course_label(table, int(i))})"
            )

    practice_labels, practice_codes = _practice_codes(table)

    state_index = {s: k for k, s in enumerate(space.states)}
    blocks = {}
    for origin in space.origin_states:
        mask = np.array([s == origin for s in origin_states], dtype=bool)
        rows = origin_rows[mask]
        if rows.size == 0:
            continue
        nxt = rows + 1
        X = spec.encode(
            origin,
            courses=table.courses[rows],
            days=table.days[rows],
            gaps=table.days[nxt] - table.days[rows],
            covariates={k: v[rows] for k, v in table.covariates.items()},
        )
        y = np.array([state_index[s] for s in table.states[nxt]],
                     dtype=np.int64)
        blocks[origin] = DesignBlock(
            origin=origin,
            feature_names=spec.feature_names(origin),
            destinations=space.states,
            reference=space.reference_destination,
            X=X,
            y=y,
            practice_codes=practice_codes[rows],
            patient_ids=table.patient_ids[rows],
            courses=table.courses[rows],
            visits=table.visits[rows],
        )

    return TransitionSet(
        space=space,
        spec=spec,
        practice_labels=practice_labels,
        blocks=blocks,
        n_singleton_courses=n_singletons,
    )


def _practice_codes(table: VisitTable):
    """Sorted unique practice labels and per-row integer codes."""
    if len(table) == 0:
        return (), np.empty(0, dtype=np.int64)
    keys, first_idx, codes = np.unique(
        table._practice_keys, return_index=True, return_inverse=True
    )
    labels = tuple(table.practice_ids[i] for i in first_idx)
    return labels, codes.astype(np.int64)


# ---------------------------------------------------------------------------
# Transition counts
# ---------------------------------------------------------------------------

@dataclass
class TransitionCounts:
    """Observed origin-by-destination transition counts."""

    states: tuple
    origin_states: tuple
    counts: np.ndarray  # (len(origin_states), len(states)) int64

    def to_csv(self, path_or_buf=None):
        """Write counts as CSV (origin rows, destination columns)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["origin"] + [f"to_{s}" for s in self.states])
        for i, origin in enumerate(self.origin_states):
            w.writerow([str(origin)] + [str(int(c)) for c in self.counts[i]])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if isinstance(path_or_buf, (str, bytes)):
            with open(path_or_buf, "w", encoding="utf-8") as f:
                f.write(text)
        else:
            path_or_buf.write(text)
        return None


def transition_matrix(visits, space: StateSpace) -> TransitionCounts:
    """Count observed consecutive within-course transitions.

    Rows cover ``space.origin_states``; columns cover all states.
    """
    table = VisitTable.coerce(visits)
    starts = _course_boundaries(table)
    is_last = _validate_courses(table, space, starts)

    counts = np.zeros((len(space.origin_states), len(space.states)),
                      dtype=np.int64)
    origin_pos = {s: i for i, s in enumerate(space.origin_states)}
    state_pos = {s: i for i, s in enumerate(space.states)}
    for i in np.flatnonzero(~is_last):
        o = table.states[i]
        if o not in origin_pos:
            raise VisitDataError(
                f"transition from state {o!r}, which is not an origin state "
                f"({_course_label(table, int(i))})"
            )
        counts[origin_pos[o], state_pos[table.states[i + 1]]] += 1
    return TransitionCounts(
        states=space.states,
        origin_states=space.origin_states,
        counts=counts,
    )
