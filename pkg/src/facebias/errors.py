"""Exception types raised across the toolkit."""


class FaceBiasError(Exception):
    """Base class for all toolkit errors."""


# ingest
class MalformedName(FaceBiasError, ValueError):
    pass


class NegativeAge(FaceBiasError, ValueError):
    pass


class NoPositiveScore(FaceBiasError, ValueError):
    pass


# shapes / inputs shared by several modules
class ShapeMismatch(FaceBiasError, ValueError):
    pass


class EmptyImage(FaceBiasError, ValueError):
    pass


class CropOutOfBounds(FaceBiasError, ValueError):
    pass


class EmptyList(FaceBiasError, ValueError):
    pass


class LengthMismatch(FaceBiasError, ValueError):
    pass


class InvalidSplitSpec(FaceBiasError, ValueError):
    pass


class StratumTooSmall(FaceBiasError, ValueError):
    pass


# augmentation
class EmptyClass(FaceBiasError, ValueError):
    pass


class GeneratorFailure(FaceBiasError, RuntimeError):
    def __init__(self, cls, message):
        super().__init__(f"generator failed for class {cls!r}: {message}")
        self.cls = cls


class UnknownClass(FaceBiasError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# training
class EmptyDataset(FaceBiasError, ValueError):
    pass


class NonFiniteLoss(FaceBiasError, FloatingPointError):
    def __init__(self, term, step, value):
        super().__init__(f"non-finite value {value!r} for loss term {term!r} at step {step}")
        self.term = term
        self.step = step
        self.value = value


class NonPositiveSigma(FaceBiasError, ValueError):
    pass


class InvalidDomain(FaceBiasError, ValueError):
    pass


class InvalidClassCount(FaceBiasError, ValueError):
    pass


class LabelOutOfRange(FaceBiasError, ValueError):
    pass


# metrics
class EmptyClassInLabels(FaceBiasError, ValueError):
    pass


class TooFewValues(FaceBiasError, ValueError):
    pass


class TooSmall(FaceBiasError, ValueError):
    pass


class InsufficientClass(FaceBiasError, ValueError):
    pass


class MalformedDump(FaceBiasError, ValueError):
    pass


# pipeline
class ConfigError(FaceBiasError, ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


class StageFailure(FaceBiasError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
