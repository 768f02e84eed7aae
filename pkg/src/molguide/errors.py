"""Exception types shared across the package."""


class MolguideError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MolguideError, ValueError):
    pass


class InvalidConfigError(MolguideError, ValueError):
    pass


class ParseError(MolguideError, ValueError):
    """Malformed geometry or property file."""


class UnknownElementError(ParseError):
    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class IngestionError(MolguideError):
    pass


class StateError(MolguideError, RuntimeError):
    """Operation called on an object that is not ready for it."""


class TrainingDivergedError(MolguideError, FloatingPointError):
    def __init__(self, message, step=None, block=None):
        super().__init__(message)
        self.step = step
        self.block = block


class SamplingDivergedError(MolguideError, FloatingPointError):
    """The reverse chain produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CorruptCheckpointError(MolguideError):
    pass


class ConfigMismatchError(MolguideError):
    pass


class UnparseablePromptError(MolguideError, ValueError):
    def __init__(self, text):
        super().__init__(f"no recognizable clause in prompt: {text!r}")
        self.text = text
