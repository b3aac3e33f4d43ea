"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class NoisyFerError(Exception):
    exit_code = 2


class UsageError(NoisyFerError):
    exit_code = 1


class ConfigError(NoisyFerError):
    exit_code = 1


class InputError(NoisyFerError):
    """Bad data: wrong shapes of samples, empty sets, malformed files."""

    exit_code = 2


class DimensionError(InputError):
    pass


class GeometryError(InputError):
    pass


class NumericError(NoisyFerError):
    """Non-finite values in the forward pass, loss or gradients."""

    exit_code = 3
