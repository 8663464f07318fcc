"""Exception hierarchy.

Every error carries a stable ``token`` (the class name) so the CLI can map it
to an exit code without string matching.
"""


class VoxelZipError(Exception):
    exit_code = 1

    @property
    def token(self) -> str:
        return type(self).__name__


class DimensionTooSmall(VoxelZipError):
    exit_code = 10


class DimensionMismatch(VoxelZipError):
    exit_code = 11


class IndexOutOfRange(VoxelZipError):
    exit_code = 12


class NonMonotonicIndices(VoxelZipError):
    exit_code = 13


class InvalidConfig(VoxelZipError):
    exit_code = 14


class UnsupportedDegree(VoxelZipError):
    exit_code = 15


class EmptyGrid(VoxelZipError):
    exit_code = 20


class NoCameras(VoxelZipError):
    exit_code = 21


class NonFiniteInput(VoxelZipError):
    exit_code = 30


class NonFiniteLoss(VoxelZipError):
    exit_code = 31


class BadMagic(VoxelZipError):
    exit_code = 40


class UnsupportedVersion(VoxelZipError):
    exit_code = 41


class ChecksumMismatch(VoxelZipError):
    exit_code = 42

    def __init__(self, section: str, message: str = ""):
        self.section = section
        super().__init__(message or f"checksum mismatch in section {section}")


class TruncatedSection(VoxelZipError):
    exit_code = 43


class UnknownSection(VoxelZipError):
    exit_code = 44


class AlreadyHasNcb(VoxelZipError):
    exit_code = 50


class GridTooLargeForOracle(VoxelZipError):
    exit_code = 60


class InputNotFound(VoxelZipError):
    exit_code = 2


class IoFailure(VoxelZipError):
    exit_code = 3
