"""Shared exception hierarchy.

Every error class carries an ``exit_code`` so the command-line layer can
honor its exit-code contract (0 success, 1 user error, 2 upstream-data
error, 3 transport error) without a separate mapping table.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_USER = 1
EXIT_DATA = 2
EXIT_TRANSPORT = 3


class DriveForgeError(Exception):
    """Base class for all forge errors."""

    exit_code = EXIT_DATA


class ConfigError(DriveForgeError):
    """Invalid, incomplete, or inconsistent configuration."""

    exit_code = EXIT_USER


class MissingInputError(DriveForgeError):
    """A required upstream artifact (file, cache, log) is absent."""


# ---------------------------------------------------------------------------
# Scene ingestion

class SchemaError(DriveForgeError):
    """Scene document violates the input schema.

    ``path`` points at the offending field, dotted JSON style
    (``frames[3].ego.rotation``).
    """

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class OrderError(DriveForgeError):
    """Frame timestamps are not strictly increasing."""


class GeometryError(DriveForgeError):
    """A rotation matrix is not orthonormal with determinant +1."""


class TooShortError(DriveForgeError):
    """Scene has fewer frames than one window."""


# ---------------------------------------------------------------------------
# Action labeling

class DegenerateTrajectoryError(DriveForgeError):
    """Trajectory horizon is too short to classify."""


# ---------------------------------------------------------------------------
# Template generation

class MissingSlotError(DriveForgeError):
    """No fact matches a predicate required by the template."""

    def __init__(self, message: str, template_id: str | None = None,
                 predicate: str | None = None):
        super().__init__(message)
        self.template_id = template_id
        self.predicate = predicate


class EmptyTemplateSetError(DriveForgeError):
    """The template set has no templates for the requested category."""

    exit_code = EXIT_USER


# ---------------------------------------------------------------------------
# MLLM orchestration

class BudgetError(DriveForgeError):
    """Mandatory prompt content alone exceeds the token budget."""

    exit_code = EXIT_USER


class EndpointError(DriveForgeError):
    """Base class for completion-endpoint failures."""

    exit_code = EXIT_TRANSPORT


class TransportError(EndpointError):
    """Network or server failure that persisted through all retries."""


class AuthError(EndpointError):
    """Endpoint rejected the credentials (401/403). Never retried."""


class RateLimitError(EndpointError):
    """Endpoint throttled the request (429) beyond the retry budget."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class MalformedResponseError(EndpointError):
    """Endpoint returned a body that is not a valid completion payload."""


# ---------------------------------------------------------------------------
# Metrics

class GridMismatchError(DriveForgeError):
    """Prediction and ground truth do not share the horizon grid."""


class EmptyBatchError(DriveForgeError):
    """Batch metric invoked on zero samples."""


class DegenerateGeometryError(DriveForgeError):
    """Polygon with fewer than 3 vertices (or zero area)."""


class EmptyCandidateError(DriveForgeError):
    """Text metric invoked on an empty candidate."""


class CorpusTooSmallError(DriveForgeError):
    """Consensus metric needs >= 2 reference documents for IDF."""


# ---------------------------------------------------------------------------
# Temporal-memory reference

class ShapeError(DriveForgeError):
    """Tensor shapes are inconsistent with the configured sizes."""


class RangeError(DriveForgeError):
    """Requested k exceeds the number of available query rows."""


# ---------------------------------------------------------------------------
# Analysis

class EmptyCorpusError(DriveForgeError):
    """Statistics requested over an empty corpus."""
