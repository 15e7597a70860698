"""Exception hierarchy.

Errors split into data/schema problems (CLI exit code 2) and numerical
failures (exit code 3).
"""


class FeatQAError(Exception):
    """Base class for all package errors."""


class DataError(FeatQAError):
    """Bad input data or files."""


class MalformedJson(DataError):
    pass


class SchemaViolation(DataError):
    pass


class SpanMismatch(DataError):
    pass


class BadCount(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class ConfigViolation(DataError):
    pass


class DuplicateLabel(DataError):
    pass


class EmptyFile(DataError):
    pass


class MalformedLine(DataError):
    def __init__(self, path, lineno, reason):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


class UnknownKind(DataError):
    pass


class CoverageGap(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class MissingPrediction(DataError):
    def __init__(self, qids):
        shown = ", ".join(qids[:10])
        more = f" (+{len(qids) - 10} more)" if len(qids) > 10 else ""
        super().__init__(f"missing predictions for {len(qids)} qids: {shown}{more}")
        self.qids = list(qids)


class CheckpointMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class DeadTarget(DataError):
    pass


class NumericalError(FeatQAError):
    """Numerical failure during computation."""


class ShapeMismatch(NumericalError, ValueError):
    pass


class IndexOutOfRange(NumericalError, IndexError):
    pass


class NonScalarLoss(NumericalError, ValueError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
