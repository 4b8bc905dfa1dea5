"""Exceptions raised across the dualpt package.

Every error carries a human readable ``message`` and the process exit code
the command line front door uses when the error escapes a command.
"""


class DualPTError(Exception):
    exit_code = 2

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return self.message


# Numerical value errors


class ShapeMismatch(DualPTError):
    pass


class DegenerateVector(DualPTError):
    pass


class InvalidTemperature(DualPTError):
    pass


class InvalidLogits(DualPTError):
    pass


class InvalidEmbedding(DualPTError):
    pass


class InvalidCost(DualPTError):
    pass


class InvalidGraph(DualPTError):
    pass


class InvalidWeight(DualPTError):
    pass


class InvalidMarginal(DualPTError):
    pass


class TooLarge(DualPTError):
    pass


# Objective errors


class InvalidClass(DualPTError):
    pass


class InvalidLabel(DualPTError):
    pass


class MissingDescriptors(DualPTError):
    pass


# Description pipeline errors


class InvalidClassName(DualPTError):
    pass


class InvalidDim(DualPTError):
    pass


class FetchError(DualPTError):
    """A chat-completion request failed for one or more classes."""
    exit_code = 3

    def __init__(self, class_names, message: str):
        super().__init__(message)
        self.class_names = list(class_names)


class ProtocolError(DualPTError):
    exit_code = 3


# Harness and CLI errors


class InvalidConfig(DualPTError):
    pass


class InvalidEpoch(DualPTError):
    pass


class InvalidSplit(DualPTError):
    pass


class DegenerateMetric(DualPTError):
    pass


class SchemaError(DualPTError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f'{pointer or "/"}: {message}')
        self.pointer = pointer or '/'


class OutputLocked(DualPTError):
    pass


class NumericalError(DualPTError):
    exit_code = 4
