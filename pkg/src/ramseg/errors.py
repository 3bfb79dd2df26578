"""Exception taxonomy shared across the package.

Every error carries a machine-readable ``code`` and a default HTTP status so
the service layer can map failures onto API error bodies without a lookup
table scattered elsewhere.
"""

from __future__ import annotations


class RamsegError(Exception):
    """Base class for all package errors."""

    code = "INTERNAL"
    http_status = 500


# --- dataset / preprocessing ---------------------------------------------

class MissingFile(RamsegError):
    code = "MISSING_FILE"
    http_status = 404


class SchemaViolation(RamsegError):
    code = "SCHEMA_VIOLATION"
    http_status = 400


class DuplicateId(RamsegError):
    code = "DUPLICATE_ID"
    http_status = 409


class ShapeMismatch(RamsegError):
    code = "SHAPE_MISMATCH"
    http_status = 400


class NonFiniteInput(RamsegError):
    code = "NON_FINITE_INPUT"
    http_status = 400


# --- embedding -------------------------------------------------------------

class NonFiniteOutput(RamsegError):
    code = "NON_FINITE_OUTPUT"
    http_status = 500


# --- retrieval index --------------------------------------------------------

class DimMismatch(RamsegError):
    code = "DIM_MISMATCH"
    http_status = 400


class NotNormalized(RamsegError):
    code = "NOT_NORMALIZED"
    http_status = 400


class EmptyIndex(RamsegError):
    code = "EMPTY_INDEX"
    http_status = 409


class InvalidK(RamsegError):
    code = "INVALID_K"
    http_status = 400


class IoError(RamsegError):
    code = "IO_ERROR"
    http_status = 500


class CorruptFile(RamsegError):
    code = "CORRUPT_FILE"
    http_status = 500


class VersionUnsupported(RamsegError):
    code = "VERSION_UNSUPPORTED"
    http_status = 500


# --- segmentation engines ----------------------------------------------------

class NonBinaryMask(RamsegError):
    code = "NON_BINARY_MASK"
    http_status = 400


class EmptyMemoryBank(RamsegError):
    code = "EMPTY_MEMORY_BANK"
    http_status = 409


class CheckpointMissing(RamsegError):
    code = "CHECKPOINT_MISSING"
    http_status = 503


class UnknownClass(RamsegError):
    code = "UNKNOWN_CLASS"
    http_status = 400


# --- evaluation ---------------------------------------------------------------

class SubjectLeakage(RamsegError):
    code = "SUBJECT_LEAKAGE"
    http_status = 400
