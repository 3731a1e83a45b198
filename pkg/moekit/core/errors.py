class MoeKitError(Exception):
    """
    Base class for every error raised by the kit
    """


class ShapeMismatchError(MoeKitError, ValueError):
    pass


class RoutingError(MoeKitError, ValueError):
    pass


class TensorFormatError(MoeKitError):
    pass


class MalformedHeaderError(TensorFormatError):
    pass


class DimensionOverflowError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError, ValueError):
    pass


class AllocationError(MoeKitError, ValueError):
    pass


class CacheCapacityError(MoeKitError):
    pass


class ConfigError(MoeKitError, ValueError):
    pass
