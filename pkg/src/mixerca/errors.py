"""Exception taxonomy shared by every module in the package.

All engine errors derive from MixerError so callers can catch one base
class at the CLI boundary. Subclasses mark which contract was violated,
not where the violation was detected.
"""


class MixerError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MixerError):
    """Tensor rank, extent, or dtype does not match the operation's contract."""


class ConfigError(MixerError):
    """A configuration value is out of range or internally inconsistent."""


class UsageError(MixerError):
    """An API or CLI entry point was invoked incorrectly."""


class InputError(MixerError):
    """Input data is structurally valid but semantically unusable."""


class SplitError(MixerError):
    """A dataset split cannot be formed with the requested sizes."""


class DegenerateStatisticsError(MixerError):
    """A statistic is undefined for the given sample (for example zero variance)."""


class DegenerateSampleError(MixerError):
    """A sample is too small for the requested statistical test."""


class UndefinedClassError(MixerError):
    """A metric is undefined because some class has no ground-truth samples."""


class FormatError(MixerError):
    """A serialized file does not match the on-disk container layout."""


class VersionError(FormatError):
    """A serialized file declares an unsupported format version."""


class CorruptionError(FormatError):
    """A serialized file is truncated or fails its integrity checksum."""
