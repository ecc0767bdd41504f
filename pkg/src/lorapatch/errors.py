"""Exception hierarchy shared by the toolkit.

Every error carries an ``exit_code`` so the CLI can map failures onto
distinct process exit statuses without a lookup table.
"""


class LoraPatchError(Exception):
    exit_code = 1


class ConfigError(LoraPatchError, ValueError):
    """Invalid configuration or specification values."""

    exit_code = 2


class DatasetError(LoraPatchError, ValueError):
    exit_code = 2


class ShapeError(LoraPatchError, ValueError):
    exit_code = 2


class InjectionError(ConfigError):
    """Adapter cannot be injected into a layer (e.g. rank too large)."""


class ApplyError(LoraPatchError, ValueError):
    """A patch does not fit the model it is applied to."""

    exit_code = 2


class AttackError(LoraPatchError, RuntimeError):
    exit_code = 4


class TrainingDivergenceError(LoraPatchError, RuntimeError):
    """Loss became non-finite or exploded during training.

    ``trace`` holds whatever training history was recorded before the abort.
    """

    exit_code = 4

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class EncoderLoadError(LoraPatchError, OSError):
    exit_code = 3


class WatermarkError(ConfigError):
    pass


class PatchFormatError(LoraPatchError, ValueError):
    exit_code = 3
    code = "format"


class BadMagicError(PatchFormatError):
    code = "bad_magic"


class VersionError(PatchFormatError):
    code = "version"


class ChecksumError(PatchFormatError):
    code = "checksum"
