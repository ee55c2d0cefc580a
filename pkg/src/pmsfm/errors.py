"""Exception hierarchy shared by all pmsfm modules."""


class PmsfmError(Exception):
    """Base class for all pmsfm errors."""


class NonPositiveDepth(PmsfmError):
    """A depth or camera-frame z fell at or below the positivity guard."""


class CycleDetected(PmsfmError):
    """Kinematic tree contains a cycle."""


class MissingNode(PmsfmError):
    """Kinematic tree does not cover the requested camera."""


class InsufficientSamples(PmsfmError):
    """Too few samples to fit whitening or a codebook."""


class DimensionMismatch(PmsfmError):
    """Feature dimensions of the operands disagree."""


class BadCount(PmsfmError):
    """A requested count (keyframes, neighbours) is out of range."""


class Disconnected(PmsfmError):
    """Scene graph is not a single connected component."""


class EmptyEstimates(PmsfmError):
    """No pointmap estimates were supplied for aggregation."""


class ShapeMismatch(PmsfmError):
    """Grid shapes of the operands disagree."""


class DegenerateGeometry(PmsfmError):
    """Geometry does not constrain the quantity being estimated."""


class MissingPrediction(PmsfmError):
    """A scene-graph edge has no pairwise prediction."""


class TooFewMatches(PmsfmError):
    """Not enough correspondences to estimate a relative transform."""


class NonFiniteLoss(PmsfmError):
    """The optimization loss became NaN or infinite."""

    def __init__(self, stage, iteration):
        super().__init__(f"non-finite loss in stage {stage!r} at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


class DegenerateConfiguration(PmsfmError):
    """Point sets are collinear or coincident; alignment is ambiguous."""


class NoOverlap(PmsfmError):
    """Two views share no co-visible surface."""


class BundleError(PmsfmError):
    """A tensor bundle failed to parse or verify."""


class ConfigError(PmsfmError):
    """A configuration value is invalid."""
