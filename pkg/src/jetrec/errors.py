"""Exception hierarchy. The CLI maps each family onto a stable exit code."""


class JetRecError(Exception):
    exit_code = 1


class ConfigError(JetRecError):
    exit_code = 2


class DataError(JetRecError):
    exit_code = 3


class ZeroMomentum(DataError):
    pass


class EmptyInput(DataError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class SchemaError(DataError):
    pass


class ShapeMismatch(JetRecError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class NonScalarSeed(JetRecError, ValueError):
    pass


class EmptyEvent(DataError):
    pass


class TrainingError(JetRecError):
    exit_code = 4


class SingleClassDataset(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    def __init__(self, step: int, value: float, where: str = "loss"):
        if where == "loss":
            msg = f"non-finite loss {value!r} at step {step}"
        else:
            msg = f"non-finite {where} at step {step} (loss {value!r})"
        super().__init__(msg)
        self.step = step
        self.value = value
        self.where = where


class EvaluationError(JetRecError):
    exit_code = 5


class SingleClass(EvaluationError):
    pass


class UnreachableEfficiency(EvaluationError):
    pass
