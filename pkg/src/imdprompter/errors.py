"""Exception hierarchy.

The three top-level groups map onto CLI exit codes: ``ConfigError`` (2),
``DataError`` (3) and ``CheckpointError`` (4).
"""


class IMDPError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(IMDPError):
    pass


class DataError(IMDPError):
    pass


class CheckpointError(IMDPError):
    pass


class DimensionMismatch(IMDPError, ValueError):
    pass


class ChannelMismatch(IMDPError, ValueError):
    pass


class ValueRange(IMDPError, ValueError):
    pass


class NonFinite(IMDPError, ValueError):
    pass


class DegenerateKernel(IMDPError, ValueError):
    pass


class UnprojectedKernel(IMDPError, ValueError):
    pass


class PaddingRequired(IMDPError, ValueError):
    pass


class InvalidBox(IMDPError, ValueError):
    pass


class MissingGroundTruth(IMDPError, ValueError):
    pass


class EmptyInput(IMDPError, ValueError):
    pass


class RegionTooLarge(IMDPError, ValueError):
    pass


class NonFiniteLoss(IMDPError, FloatingPointError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class MissingMask(DataError):
    pass


class UnreadableImage(DataError):
    pass


class EmptyDataset(DataError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass
