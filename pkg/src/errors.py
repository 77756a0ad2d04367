"""
Error Types for rmflow-lab

Library code raises these; only the process entry point maps them to exit codes.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class RMFlowError(Exception):
    """Base class for all rmflow-lab errors"""


class ConfigurationError(RMFlowError, ValueError):
    """Invalid run configuration or environment (exit code 2)"""


class NumericalError(RMFlowError, ArithmeticError):
    """Non-finite values, diverging losses or gradients (exit code 3)"""


class ShapeError(RMFlowError, ValueError):
    """Shape, dimension or histogram-grid mismatch"""


class AutodiffError(RMFlowError, RuntimeError):
    """Non-scalar loss or a graph the autodiff engine cannot differentiate"""


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the documented process exit code

    Args:
        error: Exception raised by a command

    Returns:
        2 for configuration errors, 3 for numerical failures, 1 otherwise
    """
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(error, NumericalError):
        return EXIT_NUMERIC
    return 1
