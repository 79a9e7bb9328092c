"""Exception types raised across the package.

The CLI maps each family onto a process exit code, so new errors should
subclass one of these rather than raising bare built-ins.
"""


class CcfError(Exception):
    """Base class for every error raised by ccfkit."""


class ContractError(CcfError, ValueError):
    """Shapes or arguments violate an operation's preconditions."""


class ConfigError(CcfError, ValueError):
    """Invalid or unknown configuration keys and values."""


class FormatError(CcfError):
    """A file does not follow the expected on-disk layout."""


class DataError(CcfError, ValueError):
    """Feature data violates a bank invariant (non-finite values, empty classes...)."""


class DomainError(DataError):
    """A value falls outside the domain of a transform."""


class TrainingError(CcfError, ArithmeticError):
    """Optimization diverged or could not run."""
