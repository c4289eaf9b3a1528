"""Exception taxonomy shared by all rlmerge modules."""


class MergeError(Exception):
    """Base class for every error raised by this package."""


# --- checkpoint file format ---

class BadMagic(MergeError):
    """File header is not a supported checkpoint header."""


class TruncatedFile(MergeError):
    """File ends before the bytes promised by its manifest."""


class ShapeMismatch(MergeError):
    """Array shapes disagree with a declared or required shape."""


class IoFailure(MergeError):
    """Underlying file I/O failed."""


class EmptyCheckpoint(MergeError):
    """Checkpoint with no parameter groups."""


class ArchMismatch(MergeError):
    """Operands belong to different architecture families."""


# --- merge operators ---

class EmptyInput(MergeError):
    """Operator invoked with no input layers."""


class InvalidDropProb(MergeError):
    """Drop probability outside [0, 1)."""


# --- merging environment ---

class InvalidConfig(MergeError):
    """Environment or search configuration violates its invariants."""


class IllegalAction(MergeError):
    """Action not in the legal set for the current state."""


class EmptyPlan(MergeError):
    """Merge plan with no steps."""


class DimensionBreak(MergeError):
    """Adjacent assembled layers have incompatible inner dimensions."""


# --- evaluation / rewards ---

class EmptyBatch(MergeError):
    """Evaluation batch contains no samples."""


# --- agent ---

class AllMasked(MergeError):
    """No legal action available to the policy."""


class NonFiniteLogits(MergeError):
    """Policy network produced NaN or infinite logits."""


class NonFiniteLoss(MergeError):
    """Loss computation produced a NaN or infinite value."""


# --- search driver ---

class SpaceTooLarge(MergeError):
    """Exhaustive enumeration refused: plan space exceeds the bound."""


class UnknownOperator(MergeError):
    """Operator id not in the configured operator set."""


class IncompleteEpisode(MergeError):
    """Episode ended by step budget before the cursor passed the last layer."""


# --- task zoo ---

class InvalidSpec(MergeError):
    """Task specification violates its invariants."""


class DivergedTraining(MergeError):
    """Training produced a non-finite loss."""
