"""Exception types shared across the package."""


class FecTekError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(FecTekError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class DataFormatError(FecTekError):
    """Malformed input data: corpus, triples, qrels, or weight streams."""


class CorruptFileError(FecTekError):
    """A binary artifact (checkpoint, index) failed structural validation."""


class TrainingDivergedError(FecTekError):
    """Training produced a non-finite loss."""
