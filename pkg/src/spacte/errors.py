class SpacteError(Exception):
    pass


class ConfigError(SpacteError, ValueError):
    """Invalid configuration; ``key`` names the offending setting when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class InputError(SpacteError, ValueError):
    pass


class FormatError(SpacteError, ValueError):
    pass


class NumericError(SpacteError, ArithmeticError):
    pass


class TrainingError(SpacteError, RuntimeError):
    pass
