"""Exception hierarchy for the visitchain package.

Every error raised by the library derives from :class:`VisitChainError`.
The CLI maps subclasses to exit codes: input/parse problems exit 2,
fitting failures exit 3, invalid configuration exits 4.
"""

from __future__ import annotations


class VisitChainError(Exception):
    """Base class for all errors raised by visitchain."""


class VisitDataError(VisitChainError):
    """Malformed visit data: bad CSV, non-increasing days, absorbing-state
    violations, covariates varying within a course, and similar."""


class EncodingError(VisitChainError):
    """A covariate value cannot be encoded under the model spec, e.g. an
    unknown categorical level with no missing category configured, or a
    non-finite numeric value."""


class ConfigError(VisitChainError):
    """An invalid configuration object or flag combination."""


class ConvergenceError(VisitChainError):
    """Newton iteration failed to reach the gradient tolerance.

    Attributes:
        origin: origin-state label of the failing block, if known.
        iterations: iterations completed before giving up.
        grad_norm: gradient max-norm at the final iterate.
    """

    def __init__(self, message, *, origin=None, iterations=None, grad_norm=None):
        super().__init__(message)
        self.origin = origin
        self.iterations = iterations
        self.grad_norm = grad_norm


class SeparationError(ConvergenceError):
    """Perfect or quasi-perfect separation: a destination with zero
    observations, or a coefficient diverging past the separation bound.

    Attributes:
        destination: destination label driving the separation, if known.
        predictor: name of the diverging predictor, if known.
    """

    def __init__(self, message, *, origin=None, destination=None, predictor=None):
        super().__init__(message, origin=origin)
        self.destination = destination
        self.predictor = predictor


class ResamplingError(VisitChainError):
    """Bootstrap could not produce a usable replicate set, e.g. more than
    5% of direct-bootstrap refits failed."""
