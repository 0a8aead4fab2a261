"""Exception types raised by duflow.

Every error a caller is expected to handle programmatically derives from
DuflowError; message text always names the offending values (shapes, paths,
keys) so failures are actionable without a debugger.
"""


class DuflowError(Exception):
    pass


class ShapeError(DuflowError):
    """Operand shapes are incompatible, or an op would produce an empty output."""


class MaskEmptyError(DuflowError):
    """A masked reduction received an all-zero mask."""


class GraphError(DuflowError):
    """Tape misuse: backward on a non-scalar, or backward twice without reset."""


class CheckpointError(DuflowError):
    """Malformed or truncated checkpoint file."""


class FloError(DuflowError):
    """Malformed .flo flow file."""


class FloBadMagicError(FloError):
    pass


class FloTruncatedError(FloError):
    pass


class FloBadDimsError(FloError):
    pass


class ConfigError(DuflowError):
    """Bad training config: unknown key, unparsable value, missing file."""


class DataError(DuflowError):
    """Dataset directory missing or unreadable."""


class SceneError(DuflowError):
    """Scene spec cannot be realized (e.g. sprite larger than the image)."""


class NanGradientError(DuflowError):
    """A training step produced a non-finite loss or gradient."""
