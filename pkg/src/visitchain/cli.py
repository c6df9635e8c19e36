"""Command-line interface: the full pipeline as one executable.

Subcommands
-----------

``summarize``
    Observation-pattern report for a visit CSV: transition count matrix
    plus histograms of patients per practice, courses per patient,
    follow-up length per course, and gap times.
``fit``
    Fit the transition model and write the result as JSON + CSV.
``ci``
    Bootstrap confidence intervals (direct refitting, the one-step
    estimating-function method, or both side by side).
``predict-occupancy``
    State-occupancy forecast on a regular day grid, with optional
    percentile bands from a saved replicate file.
``simulate``
    Generate a synthetic two-state dataset from a simulation config.
``coverage``
    Bias/coverage study over simulated datasets, one section per
    requested random-effect correlation.

Every run writes a ``<subcommand>_manifest.json`` recording the resolved
configuration, seed, input digests, package version, and phase timings;
reruns with the same inputs produce identical manifests except for the
timings. All randomness flows from ``--seed``; ``--threads 1``
guarantees byte-identical outputs across reruns on the same build.

Exit codes: 2 = input/parse error, 3 = fitting failure, 4 = invalid
configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .data_model import (
    CategoricalCovariate,
    ModelSpec,
    NumericCovariate,
    StateSpace,
    VisitTable,
    build_transitions,
    load_visits,
    transition_matrix,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    EncodingError,
    ResamplingError,
    VisitChainError,
    VisitDataError,
)
from .estimator import FitResult, fit
from .occupancy import predict_occupancy
from .resampling import (
    BootstrapSet,
    direct_bootstrap,
    efb,
    paired_interval_csv,
    percentile_ci,
    replicate_multiplicities,
)
from .simulator import SimConfig, coverage_study, generate, two_state_spec

__all__ = ["main"]

# Full-scale coverage design, selected by `coverage --full`.
FULL_SCALE_PRACTICES = 663
FULL_SCALE_DATASETS = 800
FULL_SCALE_REPLICATES = 1000

_METHOD_ALIASES = {"direct": "direct", "db": "direct", "efb": "efb"}


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunManifest:
    """Provenance record written alongside every subcommand's outputs."""

    subcommand: str
    config: dict
    seed: int
    inputs: dict        # path -> sha256 of the bytes actually read
    version: str
    timings: dict       # phase -> seconds

    def to_json(self) -> str:
        return json.dumps(
            {
                "subcommand": self.subcommand,
                "config": self.config,
                "seed": self.seed,
                "inputs": self.inputs,
                "version": self.version,
                "timings": self.timings,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"


def _digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class _Phases:
    """Wall-clock accounting for the manifest's timing block."""

    def __init__(self):
        self.seconds: dict = {}
        self._name = None
        self._start = 0.0

    def begin(self, name: str) -> None:
        now = time.perf_counter()
        if self._name is not None:
            self.seconds[self._name] = round(
                self.seconds.get(self._name, 0.0) + now - self._start, 6)
        self._name = name
        self._start = now

    def finish(self) -> dict:
        self.begin("_")
        self._name = None
        self.seconds.pop("_", None)
        return self.seconds


def _write_output(out_dir: str, name: str, text: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8",
              newline="") as f:
        f.write(text)


def _finish(args, subcommand: str, config: dict, inputs: dict,
            phases: _Phases) -> int:
    manifest = RunManifest(
        subcommand=subcommand,
        config=config,
        seed=args.seed,
        inputs=inputs,
        version=__version__,
        timings=phases.finish(),
    )
    name = subcommand.replace("-", "_") + "_manifest.json"
    _write_output(args.out_dir, name, manifest.to_json())
    return 0


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------

def _load_json(path: str, what: str) -> dict:
    """Read a JSON config-like file; any failure is a config error."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {what} {path!r}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} {path!r} is not valid JSON: {e}") from None


def _infer_state_space(table: VisitTable) -> StateSpace:
    """State space implied by the data alone, for spec-free summaries.

    States are the observed labels (numeric sort where possible), all
    treated as potential origins so the count matrix is total.
    """
    seen = sorted({s for s in table.states},
                  key=lambda s: (0, int(s)) if str(s).lstrip("-").isdigit()
                  else (1, str(s)))
    if not seen:
        raise VisitDataError("no visit records in input")
    return StateSpace(states=tuple(seen), absorbing=frozenset())


def _infer_model_spec(table: VisitTable) -> ModelSpec:
    """Default model spec for a bare CSV: every covariate column that
    parses fully as numbers becomes numeric, anything else categorical
    with the lexicographically first level as reference."""
    covs = []
    for name in sorted(table.covariates):
        values = table.covariates[name]
        try:
            for v in values:
                float(v)
        except (TypeError, ValueError):
            levels = tuple(sorted({str(v) for v in values}))
            covs.append(CategoricalCovariate(name, levels=levels,
                                             reference=levels[0]))
        else:
            covs.append(NumericCovariate(name))
    return ModelSpec(space=_infer_state_space(table), covariates=tuple(covs))


def _resolve_spec(args, table: VisitTable) -> tuple:
    """Model spec from --spec (path or the literal ``two-state``), else
    inferred from the data. Returns (spec, inputs-dict entries)."""
    spec_arg = getattr(args, "spec", None)
    if spec_arg is None:
        return _infer_model_spec(table), {}
    if spec_arg == "two-state":
        return two_state_spec(), {}
    d = _load_json(spec_arg, "model spec")
    try:
        return ModelSpec.from_dict(d), {spec_arg: _digest(spec_arg)}
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"model spec {spec_arg!r}: {e}") from None


def _load_table(path: str) -> VisitTable:
    try:
        return load_visits(path)
    except OSError as e:
        raise VisitDataError(f"cannot read input {path!r}: {e}") from None


def _load_sim_config(args) -> tuple:
    """Simulation config from --config, benchmark defaults otherwise.
    An explicit --seed overrides the config file's seed."""
    if getattr(args, "config", None):
        d = _load_json(args.config, "simulation config")
        try:
            config = SimConfig.from_dict(d)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"simulation config {args.config!r}: {e}") \
                from None
        inputs = {args.config: _digest(args.config)}
    else:
        config = SimConfig.benchmark()
        inputs = {}
    if args.seed_given:
        config = replace(config, seed=args.seed)
    else:
        args.seed = config.seed
    return config, inputs


def _fit_or_load(args, table, spec) -> tuple:
    """Honor a saved fit artifact when given, otherwise fit inline."""
    fit_path = getattr(args, "fit", None)
    if fit_path:
        try:
            with open(fit_path, "r", encoding="utf-8") as f:
                result = FitResult.from_json(f.read())
        except OSError as e:
            raise VisitDataError(
                f"cannot read fit artifact {fit_path!r}: {e}") from None
        except (KeyError, TypeError, ValueError,
                json.JSONDecodeError) as e:
            raise VisitDataError(
                f"fit artifact {fit_path!r} is malformed: {e}") from None
        return result, {fit_path: _digest(fit_path)}
    return fit(build_transitions(table, spec)), {}


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------

def _histogram_csv(counter: Counter, value_name: str,
                   count_name: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([value_name, count_name])
    for value in sorted(counter):
        w.writerow([value, counter[value]])
    return buf.getvalue()


def _observation_patterns(table: VisitTable) -> dict:
    """The four observation-pattern histograms as (value, count) tables."""
    practices = Counter()
    patient_courses = Counter()
    followup = Counter()
    gaps = Counter()

    patients_of: dict = {}
    courses_of: dict = {}
    n = len(table)
    i = 0
    while i < n:
        j = i
        while (j + 1 < n
               and table.practice_ids[j + 1] == table.practice_ids[i]
               and table.patient_ids[j + 1] == table.patient_ids[i]
               and table.courses[j + 1] == table.courses[i]):
            j += 1
        practice = str(table.practice_ids[i])
        patient = (practice, str(table.patient_ids[i]))
        patients_of.setdefault(practice, set()).add(patient)
        courses_of[patient] = courses_of.get(patient, 0) + 1
        followup[int(table.days[j] - table.days[i])] += 1
        for k in range(i, j):
            gaps[int(table.days[k + 1] - table.days[k])] += 1
        i = j + 1

    for practice, members in patients_of.items():
        practices[len(members)] += 1
    for patient, count in courses_of.items():
        patient_courses[count] += 1
    return {
        "patients_per_practice.csv": _histogram_csv(
            practices, "patients", "practices"),
        "courses_per_patient.csv": _histogram_csv(
            patient_courses, "courses", "patients"),
        "followup_length.csv": _histogram_csv(
            followup, "followup_days", "courses"),
        "gap_times.csv": _histogram_csv(gaps, "gap_days", "gaps"),
    }


def _cmd_summarize(args) -> int:
    phases = _Phases()
    phases.begin("load")
    table = _load_table(args.input)
    inputs = {args.input: _digest(args.input)}
    spec_arg = getattr(args, "spec", None)
    if spec_arg:
        spec, extra = _resolve_spec(args, table)
        inputs.update(extra)
        space = spec.space
    else:
        space = _infer_state_space(table)

    phases.begin("summarize")
    counts = transition_matrix(table, space)
    tables = _observation_patterns(table)

    phases.begin("write")
    _write_output(args.out_dir, "transition_matrix.csv", counts.to_csv())
    for name, text in tables.items():
        _write_output(args.out_dir, name, text)
    return _finish(args, "summarize", {
        "input": args.input,
        "spec": spec_arg,
        "threads": args.threads,
    }, inputs, phases)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _cmd_fit(args) -> int:
    phases = _Phases()
    phases.begin("load")
    table = _load_table(args.input)
    inputs = {args.input: _digest(args.input)}
    spec, extra = _resolve_spec(args, table)
    inputs.update(extra)

    phases.begin("fit")
    result = fit(build_transitions(table, spec))

    phases.begin("write")
    _write_output(args.out_dir, "fit.json", result.to_json() + "\n")
    _write_output(args.out_dir, "coefficients.csv", result.coefficient_csv())
    return _finish(args, "fit", {
        "input": args.input,
        "spec": getattr(args, "spec", None),
        "threads": args.threads,
    }, inputs, phases)


# ---------------------------------------------------------------------------
# ci
# ---------------------------------------------------------------------------

def _cmd_ci(args) -> int:
    if args.replicates < 1:
        raise ConfigError(
            f"--replicates must be a positive integer, got {args.replicates}")
    if not 0.0 < args.level < 1.0:
        raise ConfigError(f"--level must be in (0, 1), got {args.level}")
    selected = ("direct", "efb") if args.method == "both" \
        else (args.method,)
    methods = tuple(dict.fromkeys(_METHOD_ALIASES[m] for m in selected))

    phases = _Phases()
    phases.begin("load")
    table = _load_table(args.input)
    inputs = {args.input: _digest(args.input)}
    spec, extra = _resolve_spec(args, table)
    inputs.update(extra)

    phases.begin("fit")
    transitions = build_transitions(table, spec)
    result, extra = _fit_or_load(args, table, spec)
    inputs.update(extra)

    phases.begin("resample")
    # Shared multiplicities: with both methods requested the two
    # bootstraps see identical cluster draws, so the CIs are comparable
    # replicate by replicate.
    mult = replicate_multiplicities(
        transitions.n_practices, args.replicates, args.seed)
    sets = {}
    for method in methods:
        if method == "direct":
            sets[method] = direct_bootstrap(
                transitions, args.replicates, args.seed, fit=result,
                threads=args.threads, multiplicities=mult)
        else:
            sets[method] = efb(result, transitions, args.replicates,
                               args.seed, multiplicities=mult)

    phases.begin("write")
    intervals = {m: percentile_ci(s, args.level) for m, s in sets.items()}
    for method in methods:
        _write_output(args.out_dir, f"ci_{method}.csv",
                      intervals[method].to_csv())
        _write_output(args.out_dir, f"replicates_{method}.json",
                      sets[method].to_json() + "\n")
    if len(methods) == 2:
        _write_output(args.out_dir, "ci_paired.csv",
                      paired_interval_csv(intervals["efb"],
                                          intervals["direct"]))
    return _finish(args, "ci", {
        "input": args.input,
        "spec": getattr(args, "spec", None),
        "fit": getattr(args, "fit", None),
        "method": args.method,
        "replicates": args.replicates,
        "level": args.level,
        "threads": args.threads,
    }, inputs, phases)


# ---------------------------------------------------------------------------
# predict-occupancy
# ---------------------------------------------------------------------------

def _parse_covariates(text: str, spec) -> dict:
    """Parse ``name=value,name=value`` using the spec's covariate types."""
    numeric = {c.name for c in spec.covariates
               if isinstance(c, NumericCovariate)}
    known = {c.name for c in spec.covariates}
    out: dict = {}
    if not text:
        return out
    for item in text.split(","):
        name, sep, value = item.partition("=")
        name = name.strip()
        if not sep or not name:
            raise ConfigError(
                f"--covariates items must look like name=value, got {item!r}")
        if name not in known:
            raise ConfigError(f"unknown covariate {name!r}; "
                              f"expected one of {sorted(known)}")
        if name in numeric:
            try:
                out[name] = float(value)
            except ValueError:
                raise ConfigError(
                    f"covariate {name!r} is numeric, got {value!r}") from None
        else:
            out[name] = value.strip()
    missing = sorted(known - set(out))
    if missing:
        raise ConfigError(
            f"--covariates is missing values for {missing}")
    return out


def _cmd_predict(args) -> int:
    if args.input is None and args.fit is None:
        raise ConfigError(
            "predict-occupancy needs a visit CSV or a --fit artifact")

    phases = _Phases()
    phases.begin("load")
    inputs: dict = {}
    if args.fit:
        result, extra = _fit_or_load(args, None, None)
        inputs.update(extra)
    else:
        table = _load_table(args.input)
        inputs[args.input] = _digest(args.input)
        spec, extra = _resolve_spec(args, table)
        inputs.update(extra)
        result = fit(build_transitions(table, spec))
    covariates = _parse_covariates(args.covariates, result.spec)

    bootstrap = None
    if args.bands:
        try:
            with open(args.bands, "r", encoding="utf-8") as f:
                bootstrap = BootstrapSet.from_json(f.read())
        except OSError as e:
            raise VisitDataError(
                f"cannot read replicate file {args.bands!r}: {e}") from None
        except (KeyError, TypeError, ValueError,
                json.JSONDecodeError) as e:
            raise VisitDataError(
                f"replicate file {args.bands!r} is malformed: {e}") from None
        inputs[args.bands] = _digest(args.bands)

    phases.begin("predict")
    initial = None
    if args.initial_state is not None:
        states = {str(s): s for s in result.space.states}
        if args.initial_state not in states:
            raise ConfigError(
                f"unknown initial state {args.initial_state!r}; "
                f"states are {list(states)}")
        initial = states[args.initial_state]
    curve = predict_occupancy(
        result, covariates, course=args.course, step_days=args.step_days,
        horizon_days=args.horizon_days, bootstrap=bootstrap,
        level=args.level, initial_state=initial)

    phases.begin("write")
    _write_output(args.out_dir, "occupancy.csv", curve.to_csv())
    return _finish(args, "predict-occupancy", {
        "input": args.input,
        "fit": args.fit,
        "covariates": args.covariates,
        "course": args.course,
        "step_days": args.step_days,
        "horizon_days": args.horizon_days,
        "bands": args.bands,
        "level": args.level,
        "initial_state": args.initial_state,
        "threads": args.threads,
    }, inputs, phases)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    phases = _Phases()
    phases.begin("load")
    config, inputs = _load_sim_config(args)

    phases.begin("generate")
    table = generate(config)

    phases.begin("write")
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = args.out if os.path.isabs(args.out) \
        else os.path.join(args.out_dir, args.out)
    table.to_csv(out_path)
    _write_output(args.out_dir, "model_spec.json",
                  json.dumps(two_state_spec().to_dict(), indent=2,
                             sort_keys=True) + "\n")
    _write_output(args.out_dir, "sim_config.json", config.to_json() + "\n")
    return _finish(args, "simulate", {
        "config": getattr(args, "config", None),
        "out": args.out,
        "threads": args.threads,
    }, inputs, phases)


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------

def _parse_rhos(text: str) -> tuple:
    out = []
    for tok in text.split(","):
        try:
            out.append(float(tok))
        except ValueError:
            raise ConfigError(
                f"--rho must be a comma-separated list of numbers, "
                f"got {tok!r}") from None
    if not out:
        raise ConfigError("--rho must name at least one correlation")
    return tuple(out)


def _stack_with_rho(sections: list) -> str:
    """Concatenate per-rho study CSVs under a leading rho column.

    The study CSV never quotes cells (no commas in any field), so a
    plain textual splice is exact.
    """
    buf = io.StringIO()
    for k, (rho, text) in enumerate(sections):
        lines = text.splitlines()
        if k == 0:
            buf.write("rho," + lines[0] + "\n")
        for line in lines[1:]:
            buf.write(f"{rho:g}," + line + "\n")
    return buf.getvalue()


def _cmd_coverage(args) -> int:
    phases = _Phases()
    phases.begin("load")
    config, inputs = _load_sim_config(args)
    if args.full:
        config = replace(config, n_practices=FULL_SCALE_PRACTICES)
    n_datasets = args.datasets if args.datasets is not None else \
        (FULL_SCALE_DATASETS if args.full else 200)
    n_replicates = args.replicates if args.replicates is not None else \
        (FULL_SCALE_REPLICATES if args.full else 400)
    if n_datasets < 2:
        raise ConfigError(f"--datasets must be at least 2, got {n_datasets}")
    if n_replicates < 1:
        raise ConfigError(
            f"--replicates must be a positive integer, got {n_replicates}")
    try:
        methods = tuple(dict.fromkeys(
            _METHOD_ALIASES[m.strip()] for m in args.methods.split(",")))
    except KeyError as e:
        raise ConfigError(
            f"unknown method {e.args[0]!r}; use db, direct, or efb") from None
    rhos = _parse_rhos(args.rho)

    phases.begin("study")
    sections = []
    failures = []
    for rho in rhos:
        study = coverage_study(
            replace(config, patient_correlation=rho),
            n_datasets, n_replicates, methods=methods, level=args.level,
            seed=args.seed, threads=args.threads)
        sections.append((rho, study.to_csv()))
        failures.extend((rho,) + f for f in study.failures)

    phases.begin("write")
    out_path = args.out if os.path.isabs(args.out) \
        else os.path.join(args.out_dir, args.out)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="") as f:
        f.write(_stack_with_rho(sections))
    if failures:
        print(f"warning: {len(failures)} dataset failures recorded",
              file=sys.stderr)
    return _finish(args, "coverage", {
        "config": getattr(args, "config", None),
        "datasets": n_datasets,
        "replicates": n_replicates,
        "methods": ",".join(methods),
        "rho": args.rho,
        "level": args.level,
        "full": args.full,
        "n_practices": config.n_practices,
        "out": args.out,
        "threads": args.threads,
    }, inputs, phases)


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visitchain",
        description="Multi-state visit-transition modelling pipeline.")
    parser.add_argument("--version", action="version",
                        version=f"visitchain {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="master RNG seed (default 0)")
    common.add_argument("--threads", type=int,
                        default=max(1, os.cpu_count() or 1),
                        help="worker threads (1 = bit-reproducible)")
    common.add_argument("--out-dir", default=".",
                        help="directory for outputs and the run manifest")

    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("summarize", parents=[common],
                       help="observation-pattern report for a visit CSV")
    p.add_argument("input", help="visit CSV")
    p.add_argument("--spec", help="model spec JSON (or 'two-state')")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("fit", parents=[common],
                       help="fit the transition model")
    p.add_argument("input", help="visit CSV")
    p.add_argument("--spec", help="model spec JSON (or 'two-state')")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("ci", parents=[common],
                       help="bootstrap confidence intervals")
    p.add_argument("input", help="visit CSV")
    p.add_argument("--spec", help="model spec JSON (or 'two-state')")
    p.add_argument("--fit", help="saved fit.json (skips refitting)")
    p.add_argument("--method", default="both",
                   choices=["direct", "db", "efb", "both"],
                   help="bootstrap method (default both)")
    p.add_argument("--replicates", type=int, default=1000,
                   help="bootstrap replicates B (default 1000)")
    p.add_argument("--level", type=float, default=0.95,
                   help="confidence level (default 0.95)")
    p.set_defaults(func=_cmd_ci)

    p = sub.add_parser("predict-occupancy", parents=[common],
                       help="state-occupancy forecast on a day grid")
    p.add_argument("input", nargs="?",
                   help="visit CSV (omit when using --fit)")
    p.add_argument("--spec", help="model spec JSON (or 'two-state')")
    p.add_argument("--fit", help="saved fit.json")
    p.add_argument("--covariates", default="",
                   help="comma list name=value for the predicted patient")
    p.add_argument("--course", type=int, default=1,
                   help="course index held fixed (default 1)")
    p.add_argument("--step-days", type=float, default=61,
                   help="grid spacing in days (default 61)")
    p.add_argument("--horizon-days", type=float, default=366,
                   help="last grid day (default 366)")
    p.add_argument("--bands", help="replicates_*.json for percentile bands")
    p.add_argument("--level", type=float, default=0.95,
                   help="band level (default 0.95)")
    p.add_argument("--initial-state", help="state holding all mass at day 0")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("simulate", parents=[common],
                       help="generate a synthetic two-state dataset")
    p.add_argument("--config", help="simulation config JSON "
                                    "(default: benchmark design)")
    p.add_argument("--out", default="data.csv",
                   help="output CSV name (default data.csv)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("coverage", parents=[common],
                       help="bias/coverage study on simulated data")
    p.add_argument("--config", help="simulation config JSON "
                                    "(default: benchmark design)")
    p.add_argument("--datasets", type=int, default=None,
                   help="simulated datasets per rho (default 200)")
    p.add_argument("--replicates", type=int, default=None,
                   help="bootstrap replicates per dataset (default 400)")
    p.add_argument("--methods", default="db,efb",
                   help="comma list of db/direct/efb (default db,efb)")
    p.add_argument("--rho", default="0",
                   help="comma list of patient-effect correlations "
                        "(default 0)")
    p.add_argument("--level", type=float, default=0.95,
                   help="interval level (default 0.95)")
    p.add_argument("--full", action="store_true",
                   help=f"full-scale design ({FULL_SCALE_PRACTICES} "
                        f"practices, {FULL_SCALE_DATASETS} datasets, "
                        f"B={FULL_SCALE_REPLICATES})")
    p.add_argument("--out", default="coverage.csv",
                   help="output CSV name (default coverage.csv)")
    p.set_defaults(func=_cmd_coverage)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    args.seed_given = any(a == "--seed" or a.startswith("--seed=")
                          for a in argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"visitchain {args.subcommand}: {e}", file=sys.stderr)
        return 4
    except (ConvergenceError, ResamplingError) as e:
        print(f"visitchain {args.subcommand}: {e}", file=sys.stderr)
        return 3
    except (VisitDataError, EncodingError) as e:
        print(f"visitchain {args.subcommand}: {e}", file=sys.stderr)
        return 2
    except VisitChainError as e:
        print(f"visitchain {args.subcommand}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
