"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class NucdetError(Exception):
    """Base class for all package errors."""


class ConfigError(NucdetError):
    """Invalid configuration value, unknown key, or inconsistent options."""


class DataError(NucdetError):
    """Malformed annotation files, manifests, or registry inputs."""


class NumericalError(NucdetError):
    """Non-finite value encountered where the math requires finiteness."""
