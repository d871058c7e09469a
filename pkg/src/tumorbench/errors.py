"""Exception hierarchy shared across the package."""


class TumorBenchError(Exception):
    """Base class for every error raised by tumorbench."""


# data ingest
class RecordError(TumorBenchError):
    """A MAT record could not be turned into a valid TumorRecord."""

    def __init__(self, message, filename=None):
        self.filename = filename
        if filename is not None:
            message = f"{filename}: {message}"
        super().__init__(message)

    def with_filename(self, filename):
        """Return a copy of this error tagged with the offending file."""
        err = type(self)(str(self), filename=filename)
        err.__cause__ = self.__cause__
        return err


class MissingField(RecordError):
    pass


class InvalidLabel(RecordError):
    pass


class ShapeMismatch(RecordError):
    pass


class InvalidRecord(RecordError):
    pass


class EmptyDataset(TumorBenchError):
    pass


class InvalidSpec(TumorBenchError):
    pass


class CountOverflow(InvalidSpec):
    pass


# preprocessing
class InvalidSize(TumorBenchError):
    pass


# model
class UnknownBackbone(TumorBenchError):
    pass


class WeightsUnavailable(TumorBenchError):
    pass


class ShapeIncompatible(TumorBenchError):
    pass


class ShapeError(TumorBenchError):
    pass


class CorruptArtifact(TumorBenchError):
    pass


class VersionMismatch(TumorBenchError):
    pass


# training
class EmptySplit(TumorBenchError):
    pass


class DivergedLoss(TumorBenchError):
    def __init__(self, message, epoch=None, batch=None, dump_path=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.dump_path = dump_path


# metrics
class LabelOutOfRange(TumorBenchError):
    pass


class LengthMismatch(TumorBenchError):
    pass


class EmptyMatrix(TumorBenchError):
    pass


class EmptyInput(TumorBenchError):
    pass


class DegenerateMarginals(TumorBenchError):
    pass


class MetricWarning(UserWarning):
    """Emitted when a per-class ratio is 0/0 and is reported as 0."""


# reporting / cli
class MissingMetrics(TumorBenchError):
    pass


class EmptyHistory(TumorBenchError):
    pass


class ConfigError(TumorBenchError):
    pass
