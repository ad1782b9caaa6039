class Grad2TaskError(Exception):
    """Base class for every error raised by this project."""


class ShapeError(Grad2TaskError, ValueError):
    pass


class NonFiniteError(Grad2TaskError, FloatingPointError):
    pass


class MissingGradError(Grad2TaskError, RuntimeError):
    pass


class TapeError(Grad2TaskError, RuntimeError):
    pass


class CheckpointError(Grad2TaskError):
    pass


class ConfigError(Grad2TaskError, ValueError):
    pass


class DatasetError(Grad2TaskError, ValueError):
    pass


class InsufficientExamplesError(DatasetError):
    pass


class FrozenParameterError(Grad2TaskError, AssertionError):
    pass


class TrainingDivergedError(Grad2TaskError, RuntimeError):
    pass


class RoleViolationError(Grad2TaskError):
    pass


class UnknownVariantError(Grad2TaskError, ValueError):
    pass


class UndefinedMetricError(Grad2TaskError, ValueError):
    pass


class IdentityInitError(Grad2TaskError, AssertionError):
    pass
