"""Exception hierarchy.

Every error raised by the package derives from :class:`PeriopError`.  The
three intermediate classes map onto the command-line exit codes
(config 2, data 3, modeling 4).
"""


class PeriopError(Exception):
    exit_code = 1


class ConfigError(PeriopError):
    exit_code = 2


class DataError(PeriopError):
    exit_code = 3


class ModelingError(PeriopError):
    exit_code = 4


# -- ingestion / cohort -------------------------------------------------------

class MissingColumn(DataError):
    def __init__(self, column, source=""):
        self.column = column
        self.source = source
        where = f" in {source}" if source else ""
        super().__init__(f"missing column {column!r}{where}")


class MalformedRow(DataError):
    def __init__(self, line, reason, source=""):
        self.line = line
        self.reason = reason
        self.source = source
        super().__init__(f"{source or 'input'}:{line}: {reason}")


class DuplicatePatientId(DataError):
    def __init__(self, patient_id):
        self.patient_id = patient_id
        super().__init__(f"duplicate patient_id {patient_id!r}")


class UnknownSignal(DataError):
    def __init__(self, signal):
        self.signal = signal
        super().__init__(f"signal {signal!r} has no configured valid range")


class EmptyCohort(DataError):
    pass


class InfeasiblePrevalence(ModelingError):
    pass


class TooFewPerClass(ModelingError):
    pass


class RowMisalignment(DataError):
    pass


# -- labeling / features ------------------------------------------------------

class NoBaselineAvailable(DataError):
    pass


class SeriesUnusable(DataError):
    pass


class EmptyLab(DataError):
    pass


class NoOxygenData(DataError):
    pass


# -- modeling / evaluation ----------------------------------------------------

class DegenerateOutcome(ModelingError):
    pass


class NonConvergence(ModelingError):
    pass


class SingleClass(ModelingError):
    pass


class ResampleDegenerate(ModelingError):
    pass


class SchemaMismatch(DataError):
    pass
