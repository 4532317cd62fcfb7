"""Exception hierarchy. Each class carries a short ``category`` used by the CLI."""


class SRDistillError(Exception):
    category = "error"


class ConfigError(SRDistillError, ValueError):
    category = "config"


class IngestError(SRDistillError):
    category = "ingest"


class EmptyCorpusError(IngestError):
    category = "empty-corpus"


class ExtractionError(SRDistillError, ValueError):
    category = "extraction"


class SamplingError(SRDistillError, ValueError):
    category = "sampling"


class IntegrityError(SRDistillError):
    category = "integrity"


class ShapeError(SRDistillError, ValueError):
    category = "shape"


class MetricError(SRDistillError, ValueError):
    category = "metric"


class TrainingError(SRDistillError, RuntimeError):
    category = "training"


class DataError(SRDistillError, ValueError):
    category = "data"


class DistillationError(SRDistillError, RuntimeError):
    category = "distillation"


class InversionError(SRDistillError, RuntimeError):
    category = "inversion"


class DumpError(SRDistillError):
    category = "dump"
