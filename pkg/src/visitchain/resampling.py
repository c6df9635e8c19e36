"""Cluster-bootstrap confidence intervals, two ways.

Both methods resample whole practices (the top-level clusters) with
replacement, so within-practice and within-patient correlation survive
in every resample:

* the direct bootstrap refits the model from scratch on each resample;
* the estimating-function bootstrap (EFB) never refits: it caches each
  practice's score contribution at the full-data estimate and maps a
  resample's score straight to a replicate,
  ``theta_b = theta_hat - sigma(theta_hat) @ U_b(theta_hat)``.

A resample that draws practice ``g`` ``w_g`` times is equivalent to
weighting practice ``g``'s rows by ``w_g``, so neither method copies any
rows: the direct bootstrap refits with integer practice weights and the
EFB computes ``U_b`` as a multiplicity-weighted sum of cached per-practice
scores.  Replicate ``b`` always consumes RNG substream ``(seed, 2, b)``,
which makes both methods reproducible and thread-count invariant, and
gives them identical resample sequences for a shared seed.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import estimator
from ._rng import RESAMPLE, seed_keys, substream
from .data_model import TransitionSet, VisitTable, format_number
from .errors import (ConfigError, ConvergenceError, ResamplingError,
                     SeparationError)

__all__ = [
    "BlockReplicates",
    "BootstrapSet",
    "IntervalRow",
    "IntervalTable",
    "ComparisonReport",
    "resample_practice_indices",
    "replicate_multiplicities",
    "resample_clusters",
    "direct_bootstrap",
    "efb",
    "percentile_ci",
    "paired_interval_csv",
    "compare_methods",
]

#: Direct bootstrap aborts when more than this fraction of refits fail.
MAX_FAILURE_FRACTION = 0.05


# ---------------------------------------------------------------------------
# Resampling primitives
# ---------------------------------------------------------------------------

def resample_practice_indices(rng: np.random.Generator,
                              n_practices: int) -> np.ndarray:
    """Draw one cluster resample: n practice indices with replacement."""
    if n_practices < 1:
        raise ConfigError("cannot resample an empty dataset")
    return rng.integers(0, n_practices, size=n_practices)


def replicate_multiplicities(n_practices: int, B: int, seed) -> np.ndarray:
    """(B, n_practices) practice multiplicities, one row per replicate.

    Row ``b`` is the bincount of the draw from substream
    ``(*seed, RESAMPLE, b)``; both bootstrap methods consume these rows,
    so a shared seed gives them identical resample sequences.  ``seed``
    may be an int or a key tuple (see :func:`visitchain._rng.seed_keys`).
    """
    keys = seed_keys(seed)
    M = np.empty((B, n_practices), dtype=np.int64)
    for b in range(B):
        draw = resample_practice_indices(
            substream(*keys, RESAMPLE, b), n_practices
        )
        M[b] = np.bincount(draw, minlength=n_practices)
    return M


def resample_clusters(data, rng: np.random.Generator) -> VisitTable:
    """Materialize one practice resample as a new visit table.

    Each drawn practice carries all its patients, courses and visits
    intact; drawn copies get fresh practice keys ``r<draw position>:<old>``
    so repeated draws remain distinct clusters.  The bootstrap drivers use
    the equivalent multiplicity-weight path instead; this exists for
    callers that want the resampled dataset itself.
    """
    table = VisitTable.coerce(data)
    if len(table) == 0:
        raise ConfigError("cannot resample an empty dataset")
    keys, starts = np.unique(table._practice_keys, return_index=True)
    order = np.argsort(starts)  # practice slices in table order
    starts = starts[order]
    ends = np.r_[starts[1:], len(table)]
    draw = resample_practice_indices(rng, len(keys))

    pieces = []
    new_practice = []
    for pos, g in enumerate(draw):
        sl = slice(int(starts[g]), int(ends[g]))
        pieces.append(sl)
        label = table.practice_ids[starts[g]]
        new_practice.extend([f"r{pos:05d}:{label}"] * (ends[g] - starts[g]))

    def cat(col):
        return np.concatenate([col[sl] for sl in pieces])

    return VisitTable(
        practice_ids=new_practice,
        patient_ids=cat(table.patient_ids),
        courses=cat(table.courses),
        visits=cat(table.visits),
        days=cat(table.days),
        states=cat(table.states),
        covariates={k: cat(v) for k, v in table.covariates.items()},
    )


# ---------------------------------------------------------------------------
# Replicate containers
# ---------------------------------------------------------------------------

@dataclass
class BlockReplicates:
    """Bootstrap replicates for one origin block (flat, destination-major)."""

    origin: object
    destinations: tuple
    feature_names: tuple
    point: np.ndarray       # (dim,) full-data estimate
    replicates: np.ndarray  # (n_kept, dim)

    @property
    def dim(self) -> int:
        return self.point.size


@dataclass
class BootstrapSet:
    """B replicate parameter vectors per origin block.

    For the direct method, failed refits are dropped, so each block holds
    ``n_requested - len(failures)`` rows; EFB always holds exactly
    ``n_requested``.
    """

    method: str
    seed: int
    n_requested: int
    blocks: dict
    failures: list  # [(replicate index, reason), ...]

    @property
    def n_kept(self) -> int:
        return self.n_requested - len(self.failures)

    def to_dict(self) -> dict:
        seed = (list(self.seed) if isinstance(self.seed, (tuple, list))
                else self.seed)
        return {
            "method": self.method,
            "seed": seed,
            "n_requested": self.n_requested,
            "failures": [[int(b), reason] for b, reason in self.failures],
            "blocks": [
                {
                    "origin": blk.origin,
                    "destinations": list(blk.destinations),
                    "feature_names": list(blk.feature_names),
                    "point": [float(v) for v in blk.point],
                    "replicates": [[float(v) for v in row]
                                   for row in blk.replicates],
                }
                for blk in self.blocks.values()
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BootstrapSet":
        blocks = {}
        for bd in d["blocks"]:
            blocks[bd["origin"]] = BlockReplicates(
                origin=bd["origin"],
                destinations=tuple(bd["destinations"]),
                feature_names=tuple(bd["feature_names"]),
                point=np.asarray(bd["point"], dtype=np.float64),
                replicates=np.asarray(bd["replicates"],
                                      dtype=np.float64).reshape(
                    len(bd["replicates"]), -1),
            )
        seed = d["seed"]
        if isinstance(seed, list):
            seed = tuple(int(k) for k in seed)
        else:
            seed = int(seed)
        return cls(
            method=d["method"],
            seed=seed,
            n_requested=int(d["n_requested"]),
            blocks=blocks,
            failures=[(int(b), r) for b, r in d.get("failures", [])],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BootstrapSet":
        return cls.from_dict(json.loads(text))


def _point_blocks(fit: estimator.FitResult) -> dict:
    return {
        origin: BlockReplicates(
            origin=origin,
            destinations=fit.blocks[origin].destinations,
            feature_names=fit.blocks[origin].feature_names,
            point=fit.blocks[origin].theta.copy(),
            replicates=np.empty((0, fit.blocks[origin].dim)),
        )
        for origin in fit.block_order()
    }


# ---------------------------------------------------------------------------
# Direct bootstrap
# ---------------------------------------------------------------------------

def _direct_replicate(transitions: TransitionSet, multiplicities):
    """Refit from zero under one resample's practice weights."""
    refit = estimator.fit(transitions, practice_weights=multiplicities)
    return {origin: refit.blocks[origin].theta for origin in refit.blocks}


def direct_bootstrap(transitions: TransitionSet, B: int, seed: int, *,
                     fit: estimator.FitResult | None = None,
                     threads: int = 1,
                     multiplicities: np.ndarray | None = None) -> BootstrapSet:
    """Cluster bootstrap with a full refit per resample.

    Args:
        transitions: the full-data design blocks.
        B: number of replicates.
        seed: base seed; replicate b uses substream (seed, RESAMPLE, b).
        fit: full-data fit, refit here when not supplied.
        threads: worker threads for the refits (results are gathered in
            replicate order, so the output is thread-count invariant).
        multiplicities: optional pre-built (B, n_practices) multiplicity
            matrix overriding the seeded draws; used for method-comparison
            runs and tests.

    Returns:
        A :class:`BootstrapSet`; replicates that fail to converge (for
        example a resample that loses every observation of some
        destination) are dropped and recorded in ``failures``.

    Raises:
        ResamplingError: when more than 5% of replicates fail; the
            estimating-function bootstrap does not refit and is the
            recommended fallback.
    """
    if fit is None:
        fit = estimator.fit(transitions)
    M = (replicate_multiplicities(transitions.n_practices, B, seed)
         if multiplicities is None else np.asarray(multiplicities))
    if M.shape != (B, transitions.n_practices):
        raise ConfigError(
            f"multiplicity matrix shape {M.shape} != "
            f"({B}, {transitions.n_practices})"
        )

    results: list = [None] * B
    if threads > 1 and B > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {
                pool.submit(_try_direct, transitions, M[b]): b
                for b in range(B)
            }
            for fut, b in futures.items():
                results[b] = fut.result()
    else:
        for b in range(B):
            results[b] = _try_direct(transitions, M[b])

    failures = [(b, r) for b, r in enumerate(results) if isinstance(r, str)]
    if B > 0 and len(failures) > MAX_FAILURE_FRACTION * B:
        raise ResamplingError(
            f"{len(failures)} of {B} direct-bootstrap refits failed "
            f"(> {MAX_FAILURE_FRACTION:.0%}); consider the "
            f"estimating-function bootstrap, which does not refit"
        )

    blocks = _point_blocks(fit)
    kept = [r for r in results if not isinstance(r, str)]
    for origin, blk in blocks.items():
        rows = [r[origin] for r in kept if origin in r]
        blk.replicates = (np.vstack(rows) if rows
                          else np.empty((0, blk.dim)))
    return BootstrapSet(
        method="direct", seed=seed, n_requested=B,
        blocks=blocks, failures=failures,
    )


def _try_direct(transitions, mult):
    try:
        return _direct_replicate(transitions, mult)
    except (SeparationError, ConvergenceError) as e:
        return str(e)


# ---------------------------------------------------------------------------
# Estimating-function bootstrap
# ---------------------------------------------------------------------------

def practice_score_cache(fit: estimator.FitResult,
                         transitions: TransitionSet) -> dict:
    """Per-practice score contributions at theta_hat, per origin block.

    Returns ``{origin: (n_practices, dim) array}`` whose rows sum to the
    full-data score (approximately zero after convergence).  A resample's
    recentered score is ``(multiplicities - 1) @ cache[origin]``; caching
    these sums is what removes the refit from the bootstrap loop.
    """
    G = transitions.n_practices
    out = {}
    for origin in fit.block_order():
        block = transitions.blocks[origin]
        bfit = fit.blocks[origin]
        beta = bfit.coefficients
        ynr = estimator._nonref_outcomes(block)
        _, _, P = estimator._log_probs(block.X, beta)
        R = -P
        obs = ynr >= 0
        R[np.flatnonzero(obs), ynr[obs]] += 1.0
        # Row i's score contribution is the outer product R[i] x X[i],
        # flattened destination-major to match theta's layout.
        contrib = (R[:, :, None] * block.X[:, None, :]).reshape(
            block.n_rows, -1)
        S = np.zeros((G, bfit.dim))
        codes = block.practice_codes
        uniq, starts = np.unique(codes, return_index=True)
        S[uniq] = np.add.reduceat(contrib, starts, axis=0)
        out[origin] = S
    return out


def efb_from_multiplicities(fit: estimator.FitResult, score_cache: dict,
                            M: np.ndarray) -> dict:
    """One-step replicates for every multiplicity row at once.

    ``theta_b = theta_hat - sigma @ (U_b - U_hat)`` per block, vectorized
    over the B rows of ``M``.  Centering at the realized full-data score
    (instead of assuming it is zero) makes the identity resample return
    ``theta_hat`` bitwise even when an ill-conditioned information matrix
    would amplify the solver's residual gradient.
    """
    W = np.asarray(M, dtype=np.float64) - 1.0
    out = {}
    for origin, S in score_cache.items():
        bfit = fit.blocks[origin]
        U = W @ S                       # (B, dim) recentered scores
        out[origin] = bfit.theta[None, :] - U @ bfit.sigma  # sigma symmetric
    return out


def efb(fit: estimator.FitResult, transitions: TransitionSet, B: int,
        seed: int, *, multiplicities: np.ndarray | None = None) -> BootstrapSet:
    """Estimating-function bootstrap: one-step replicates, no refitting.

    The inverse information is taken from ``fit`` and evaluated once;
    each replicate costs one multiplicity-weighted sum of cached practice
    scores and one matrix-vector product.

    Args:
        fit: converged full-data fit.
        transitions: the full-data design blocks (for the score cache).
        B: number of replicates.
        seed: base seed; replicate b uses substream (seed, RESAMPLE, b),
            identical to the direct bootstrap's sequence for the same seed.
        multiplicities: optional pre-built multiplicity matrix.

    Raises:
        ConvergenceError: the fit did not converge (U(theta_hat) must be
            approximately zero for the one-step map to be anchored).
    """
    if not fit.converged:
        raise ConvergenceError(
            "estimating-function bootstrap needs a converged fit"
        )
    M = (replicate_multiplicities(transitions.n_practices, B, seed)
         if multiplicities is None else np.asarray(multiplicities))
    if M.shape != (B, transitions.n_practices):
        raise ConfigError(
            f"multiplicity matrix shape {M.shape} != "
            f"({B}, {transitions.n_practices})"
        )
    cache = practice_score_cache(fit, transitions)
    reps = efb_from_multiplicities(fit, cache, M)

    blocks = _point_blocks(fit)
    for origin, blk in blocks.items():
        r = reps[origin]
        if not np.isfinite(r).all():
            raise ResamplingError(
                f"non-finite EFB replicate for origin {origin!r}"
            )
        blk.replicates = r
    return BootstrapSet(
        method="efb", seed=seed, n_requested=B, blocks=blocks, failures=[],
    )


# ---------------------------------------------------------------------------
# Percentile intervals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntervalRow:
    origin: object
    destination: object
    predictor: str
    estimate: float
    lower: float
    upper: float


@dataclass
class IntervalTable:
    """Percentile confidence intervals for every coefficient."""

    method: str
    level: float
    rows: tuple

    def lookup(self, origin, destination, predictor) -> IntervalRow:
        for r in self.rows:
            if (r.origin == origin and r.destination == destination
                    and r.predictor == predictor):
                return r
        raise KeyError((origin, destination, predictor))

    def to_csv(self) -> str:
        lines = ["origin,destination,predictor,estimate,lower,upper"]
        for r in self.rows:
            lines.append(
                f"{r.origin},{r.destination},{r.predictor},"
                f"{format_number(r.estimate)},{format_number(r.lower)},"
                f"{format_number(r.upper)}"
            )
        return "\n".join(lines) + "\n"


def percentile_ci(bootstrap_set: BootstrapSet,
                  level: float = 0.95) -> IntervalTable:
    """Per-coefficient percentile intervals from bootstrap replicates.

    Quantiles are the inclusive linear-interpolation (type-7) definition
    at ``(1 - level)/2`` and ``1 - (1 - level)/2``.
    """
    if not 0 <= level < 1:
        raise ConfigError(f"confidence level must be in [0, 1), got {level}")
    lo_q = (1.0 - level) / 2.0
    rows = []
    for origin, blk in bootstrap_set.blocks.items():
        if blk.replicates.shape[0] < 2:
            raise ConfigError(
                f"need at least 2 bootstrap replicates for intervals, have "
                f"{blk.replicates.shape[0]} for origin {origin!r}"
            )
        lo, hi = np.quantile(
            blk.replicates, [lo_q, 1.0 - lo_q], axis=0, method="linear"
        )
        p = len(blk.feature_names)
        for k, dest in enumerate(blk.destinations):
            for j, name in enumerate(blk.feature_names):
                flat = k * p + j
                rows.append(IntervalRow(
                    origin=origin, destination=dest, predictor=name,
                    estimate=float(blk.point[flat]),
                    lower=float(lo[flat]), upper=float(hi[flat]),
                ))
    return IntervalTable(method=bootstrap_set.method, level=level,
                         rows=tuple(rows))


def paired_interval_csv(efb_table: IntervalTable,
                        direct_table: IntervalTable) -> str:
    """Side-by-side layout: point estimate, EFB bounds, direct bounds."""
    lines = ["origin,destination,predictor,estimate,"
             "efb_lower,efb_upper,direct_lower,direct_upper"]
    for r in efb_table.rows:
        d = direct_table.lookup(r.origin, r.destination, r.predictor)
        lines.append(
            f"{r.origin},{r.destination},{r.predictor},"
            f"{format_number(r.estimate)},"
            f"{format_number(r.lower)},{format_number(r.upper)},"
            f"{format_number(d.lower)},{format_number(d.upper)}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Method comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    """Both bootstrap methods on one shared resample sequence."""

    direct: BootstrapSet
    efb: BootstrapSet
    intervals_direct: IntervalTable
    intervals_efb: IntervalTable
    direct_seconds_per_replicate: float
    efb_seconds_per_replicate: float
    max_endpoint_difference: float

    @property
    def speed_ratio(self) -> float:
        if self.efb_seconds_per_replicate == 0:
            return float("inf")
        return (self.direct_seconds_per_replicate
                / self.efb_seconds_per_replicate)


def compare_methods(fit: estimator.FitResult, transitions: TransitionSet,
                    B: int, seed: int, *, level: float = 0.95,
                    threads: int = 1) -> ComparisonReport:
    """Run direct and EFB bootstraps on identical seeded resamples.

    Returns both interval tables, per-replicate wall times, and the
    maximum absolute difference between corresponding CI endpoints.
    """
    if B < 2:
        raise ConfigError("method comparison needs at least 2 replicates")
    M = replicate_multiplicities(transitions.n_practices, B, seed)

    t0 = time.perf_counter()
    direct_set = direct_bootstrap(
        transitions, B, seed, fit=fit, threads=threads, multiplicities=M
    )
    direct_elapsed = time.perf_counter() - t0

    t0 = time.perf_counter()
    efb_set = efb(fit, transitions, B, seed, multiplicities=M)
    efb_elapsed = time.perf_counter() - t0

    ci_direct = percentile_ci(direct_set, level)
    ci_efb = percentile_ci(efb_set, level)
    diff = 0.0
    for r in ci_efb.rows:
        d = ci_direct.lookup(r.origin, r.destination, r.predictor)
        diff = max(diff, abs(r.lower - d.lower), abs(r.upper - d.upper))

    return ComparisonReport(
        direct=direct_set,
        efb=efb_set,
        intervals_direct=ci_direct,
        intervals_efb=ci_efb,
        direct_seconds_per_replicate=direct_elapsed / B,
        efb_seconds_per_replicate=efb_elapsed / B,
        max_endpoint_difference=diff,
    )
