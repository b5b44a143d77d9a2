"""Exception hierarchy shared across the package."""


class PyNetError(Exception):
    """Base class for all package errors."""


class RawFormatError(PyNetError):
    """RAW file has an unsupported layout (odd dimensions, wrong channel count)."""


class MetadataMismatchError(PyNetError):
    """Sample values do not fit the declared sensor metadata."""


class ContractError(PyNetError, ValueError):
    """An operation was called with arguments that violate its preconditions."""


class RegistrationError(PyNetError):
    """Global keypoint registration could not find a usable homography."""


class ConfigError(PyNetError, ValueError):
    """Invalid or unavailable configuration."""


class ScheduleError(PyNetError):
    """Progressive training was asked to run a level out of order."""


class CheckpointFormatError(PyNetError):
    """Checkpoint archive is corrupt or has an unknown format tag."""


class ConfigMismatchError(PyNetError):
    """Checkpoint was written for a different network configuration."""


class TrainingDivergedError(PyNetError):
    """Loss became non-finite during training."""
