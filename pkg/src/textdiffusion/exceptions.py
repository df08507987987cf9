"""Error types shared across the package."""


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class InvalidScheduleError(ValueError):
    pass


class DegenerateStepError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass
