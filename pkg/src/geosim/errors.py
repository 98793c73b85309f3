"""Exception types shared across the package."""


class GeosimError(Exception):
    pass


class DimensionError(GeosimError, ValueError):
    pass


class ConfigError(GeosimError, ValueError):
    pass


class InputError(GeosimError, ValueError):
    pass


class NumericError(GeosimError, ArithmeticError):
    pass


class ProtocolError(GeosimError, ValueError):
    pass
