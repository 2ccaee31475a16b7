""" Exceptions and error handling. """

import functools
import typing as t

import click
import simpleeval


class DiffmeshError(RuntimeError):
    """
    Base class for all errors raised by diffmesh. The class variable
    `exit_code` is the process exit code used when the error reaches the
    command line interface.
    """

    exit_code = 1


class ConfigError(DiffmeshError, ValueError):
    """Exception raised for invalid configuration or failed validation."""

    exit_code = 2


class DimensionError(ConfigError):
    """Exception raised when operand extents do not line up."""

    pass


class ShapeError(ConfigError):
    """Exception raised when an input has the wrong shape for its consumer."""

    pass


class SizeError(ConfigError):
    """Exception raised when a requested count exceeds what is available."""

    pass


class OrderingError(ConfigError):
    """Exception raised when timesteps are given in the wrong order."""

    pass


class StateError(ConfigError):
    """Exception raised when an operation is called in the wrong state."""

    pass


class TimestepError(ConfigError, IndexError):
    """Exception raised for a timestep outside the schedule."""

    pass


class ProjectionError(ConfigError):
    """Exception raised when a point cannot be projected by the camera."""

    def __init__(self, index: int, depth: float):
        super().__init__(
            f"Cannot project joint {index}: depth {depth!r} is not positive"
        )
        self.index = index
        self.depth = depth


class FormatError(DiffmeshError):
    """Exception raised for unreadable, truncated or mismatched files."""

    exit_code = 3


class NumericError(DiffmeshError, ArithmeticError):
    """Exception raised when training produces non-finite values."""

    exit_code = 4


class ExitCodeException(click.ClickException):
    """A `click.ClickException` that exits with a chosen exit code."""

    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


def errorhandler(decorated: t.Callable) -> t.Callable:
    """
    Decorator for handling known exceptions in the decorated function by
    re-raising them as `click.ClickException` with the exit code matching the
    kind of failure: 2 for configuration, 3 for I/O, 4 for numeric failures.
    """

    @functools.wraps(decorated)
    def decorator(*args, **kwargs) -> t.Any:
        try:
            return decorated(*args, **kwargs)
        except click.ClickException:
            raise
        except SyntaxError as e:
            if e.text and e.offset:
                message = e.text + " " * (e.offset - 1) + "^"
            else:
                message = str(e)
            raise ExitCodeException(
                f"Syntax error in config value:\n\n{message}", ConfigError.exit_code
            )
        except simpleeval.InvalidExpression as e:
            message = getattr(e, "message", str(e))
            raise ExitCodeException(message, ConfigError.exit_code)
        except DiffmeshError as e:
            raise ExitCodeException(str(e), e.exit_code)
        except OSError as e:
            raise ExitCodeException(str(e), FormatError.exit_code)

    return decorator
