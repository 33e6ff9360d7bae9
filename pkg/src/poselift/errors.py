"""Exception taxonomy shared across the toolkit.

Every error raised by poselift derives from PoseliftError so callers can
catch the whole family; the CLI maps subfamilies onto exit codes.
"""


class PoseliftError(Exception):
    """Base class for all poselift errors."""


# --- topology / pose data -------------------------------------------------

class CycleError(PoseliftError):
    """Parent links do not form a tree (a cycle or disconnection exists)."""


class DuplicateEdgeError(PoseliftError):
    """Edge set contains a duplicate or a self-loop."""


class DegeneratePoseError(PoseliftError):
    """All joints coincide; the pose cannot be scale-normalized."""


class FormatError(PoseliftError):
    """A pose file record is malformed."""


class TopologyMismatchError(PoseliftError):
    """A record's joint count or topology name disagrees with the expectation."""


# --- geometry ---------------------------------------------------------------

class NonPositiveDepthError(PoseliftError):
    """Perspective projection requested for a point with depth <= 0."""


class EmptyBatchError(PoseliftError):
    """A batch statistic was requested for an empty batch."""


# --- flow prior -------------------------------------------------------------

class RankError(PoseliftError):
    """Not enough independent samples to fit the requested PCA dimension."""


# --- losses -----------------------------------------------------------------

class ShapeMismatchError(PoseliftError):
    """Operand shapes disagree."""


class PairingError(PoseliftError):
    """Batch too small to form sample pairs."""


class ZeroSkeletonError(PoseliftError):
    """All bones of a pose have zero length."""


class DomainError(PoseliftError):
    """A value lies outside its required open interval."""


class NonFiniteLossError(PoseliftError):
    """A loss term evaluated to NaN or infinity; the message names the term."""


# --- evaluation ---------------------------------------------------------------

class DegenerateTargetError(PoseliftError):
    """Procrustes target has zero spatial spread."""


class LengthMismatchError(PoseliftError):
    """Prediction and target lists have different lengths."""


class EmptyErrorsError(PoseliftError):
    """PCK/AUC requested for an empty error list."""


# --- training / persistence ---------------------------------------------------

class VersionError(PoseliftError):
    """Checkpoint version or topology does not match the running code."""


class CorruptCheckpointError(PoseliftError):
    """Checkpoint failed its checksum or could not be decoded."""


class DatasetEmptyError(PoseliftError):
    """A training split contains no samples."""
