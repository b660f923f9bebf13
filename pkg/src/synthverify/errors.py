"""Exception types shared across the package."""


class SynthVerifyError(Exception):
    """Base class for all errors raised by this package."""


# panel store


class SchemaError(SynthVerifyError):
    pass


class DuplicateKey(SynthVerifyError):
    def __init__(self, entity, year):
        super().__init__(f"duplicate (entity, year) pair: ({entity!r}, {year})")
        self.entity = entity
        self.year = year


class TypeViolation(SynthVerifyError):
    def __init__(self, row, column, value=None):
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")
        self.row = row
        self.column = column
        self.value = value


class LevelViolation(SynthVerifyError):
    def __init__(self, column, level, row=None):
        where = f"row {row}, " if row is not None else ""
        super().__init__(f"{where}column {column!r}: unknown level {level!r}")
        self.row = row
        self.column = column
        self.level = level


class TransformDomain(SynthVerifyError):
    pass


class FormulaError(SynthVerifyError):
    pass


# regression


class Inestimable(SynthVerifyError):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class DegenerateClusters(SynthVerifyError):
    pass


class UnknownYear(SynthVerifyError):
    pass


# partitioner


class InvalidM(SynthVerifyError):
    pass


class TooManyPartitions(SynthVerifyError):
    pass


# privacy accounting


class BudgetExhausted(SynthVerifyError):
    def __init__(self, analysis_id, requested, remaining):
        super().__init__(
            f"analysis {analysis_id!r}: requested epsilon {requested:g} "
            f"exceeds remaining budget {remaining:g}"
        )
        self.analysis_id = analysis_id
        self.requested = requested
        self.remaining = remaining


# verification


class QueryError(SynthVerifyError):
    """A verification query is malformed or inconsistent with the dataset."""


class DegenerateSlope(SynthVerifyError):
    pass


# synthesis


class InvalidTriple(SynthVerifyError):
    pass


class SamplingStalled(SynthVerifyError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoData(SynthVerifyError):
    pass


class PlanOrder(SynthVerifyError):
    pass
