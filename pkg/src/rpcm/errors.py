"""Exception types shared across the package."""


class RPCMError(Exception):
    """Base class for all package errors."""


class DimMismatch(RPCMError, ValueError):
    pass


class NonFinite(RPCMError, ValueError):
    pass


class EmptyMask(RPCMError, ValueError):
    pass


class LabelOutOfRange(RPCMError, ValueError):
    pass


class BadDims(RPCMError, ValueError):
    pass


class UnknownObjectId(RPCMError, KeyError):
    pass


class EmptyPool(RPCMError, ValueError):
    pass


class BadTimestamp(RPCMError, ValueError):
    pass


class MissingBuffer(RPCMError, RuntimeError):
    pass


class BufferOverwrite(RPCMError, RuntimeError):
    pass


class BadLabels(RPCMError, ValueError):
    pass


class EmptyObjectList(RPCMError, ValueError):
    pass


class BadSpec(RPCMError, ValueError):
    pass


class FormatError(RPCMError, ValueError):
    pass


class LengthMismatch(RPCMError, ValueError):
    pass


class TooShort(RPCMError, ValueError):
    pass


class ConfigError(RPCMError, ValueError):
    pass


class GradientCheckFailed(RPCMError, RuntimeError):
    pass
