"""Exception types raised across the package.

Every error carries a stable class name; the CLI prints it as the
machine-parseable prefix of its one-line failure message.
"""


class RobustAdaptError(Exception):
    """Base class for all package errors."""


class NonFinite(RobustAdaptError, ValueError):
    pass


class ShapeMismatch(RobustAdaptError, ValueError):
    pass


class InvalidSpec(RobustAdaptError, ValueError):
    pass


class FormatError(RobustAdaptError, ValueError):
    def __init__(self, message, *, field=None, offset=None):
        parts = [message]
        if field is not None:
            parts.append(f"field={field}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__("; ".join(parts))
        self.field = field
        self.offset = offset


class VersionMismatch(RobustAdaptError, ValueError):
    pass


class TooFewSamples(RobustAdaptError, ValueError):
    pass


class MissingGroupPrompts(RobustAdaptError, ValueError):
    pass


class DegenerateClustering(RobustAdaptError, ValueError):
    pass


class BatchTooSmall(RobustAdaptError, ValueError):
    pass


class EmptyPositives(RobustAdaptError, ValueError):
    pass


class NoPositives(RobustAdaptError, ValueError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has incorrect anchors but no correct samples")
        self.class_id = class_id


class NoAnchors(RobustAdaptError, ValueError):
    pass


class Diverged(RobustAdaptError, FloatingPointError):
    pass


class AlphaOutOfRange(RobustAdaptError, ValueError):
    pass


class DegenerateGroups(RobustAdaptError, ValueError):
    pass


class EmptyCache(RobustAdaptError, ValueError):
    pass


class EmptyGroup(RobustAdaptError, ValueError):
    pass


class InsufficientGroups(RobustAdaptError, ValueError):
    pass


class ConfigError(RobustAdaptError, ValueError):
    pass


class ChecksumError(FormatError):
    pass


class IoError(RobustAdaptError, OSError):
    pass
