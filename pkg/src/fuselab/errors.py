"""Exception hierarchy shared by every fuselab module.

The CLI maps :class:`FuselabError` to exit status 1; anything else is a bug.
"""


class FuselabError(Exception):
    """Base class for domain errors (bad inputs, violated preconditions)."""


class ImageFormatError(FuselabError, ValueError):
    """File is readable but its bit depth or color type is unsupported."""


class TruncatedImageError(FuselabError, ValueError):
    """Image stream ends before all pixel data has been read."""


class ShapeError(FuselabError, ValueError):
    """Array dimensions do not agree."""


class SetConstructionError(FuselabError, ValueError):
    """Index lists do not describe valid fusion/measurement sets."""


class NonFiniteError(FuselabError, FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class ParamFileError(FuselabError, ValueError):
    """Parameter container is corrupt or does not match the configuration."""
