"""Exception types shared across the package.

Plain argument validation raises ValueError; the classes below mark
conditions a caller may want to handle separately (bad files, diverged
training, a broken finite-difference oracle).
"""


class DpqError(Exception):
    """Base class for package-specific errors."""


class CorruptCodebookError(DpqError):
    """A code outside {0..K-1} or inconsistent codebook shapes."""


class CorruptFileError(DpqError):
    """Artifact payload fails structural checks or its checksum."""


class UnsupportedFileError(DpqError):
    """Unknown magic or format version."""


class OracleFailureError(DpqError):
    """The numeric differentiation oracle hit a non-finite evaluation."""


class TrainingDivergedError(DpqError):
    """Loss became non-finite; carries the epoch where it happened."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch
