"""Exception hierarchy shared across the package."""


class FaceReconError(Exception):
    """Base class for all package errors."""


class ManifestError(FaceReconError, ValueError):
    pass


class ManifestParseError(ManifestError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateIdentityError(ManifestError):
    pass


class MissingFieldError(ManifestParseError):
    pass


class DegenerateLandmarksError(FaceReconError, ValueError):
    pass


class PixelRangeError(FaceReconError, ValueError):
    pass


class ResolutionMismatchError(FaceReconError, ValueError):
    pass


class DimensionMismatchError(FaceReconError, ValueError):
    pass


class ExtractorError(FaceReconError, RuntimeError):
    pass


class InsufficientIdentitiesError(FaceReconError, ValueError):
    pass


class TrainingDivergedError(FaceReconError, RuntimeError):
    """Raised when a loss becomes non-finite; carries the last checkpoint path."""

    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)


class SpecError(FaceReconError, ValueError):
    pass


class InsufficientImpostorsError(FaceReconError, ValueError):
    pass


class EvaluationError(FaceReconError, ValueError):
    pass


class InfeasibleCovarianceError(FaceReconError, ValueError):
    pass


class NonConvergenceError(FaceReconError, RuntimeError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class CheckpointError(FaceReconError, RuntimeError):
    pass


class ConfigError(FaceReconError, ValueError):
    """Config validation failure; ``problems`` lists every issue found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NonMonotoneCovarianceError(InfeasibleCovarianceError):
    """Pair covariance is not monotone in the base correlation, so the match is ambiguous."""
