# core/errors.py
"""
Exception hierarchy shared by every CFSC component.
The CLI maps ConfigError to exit code 2 and the rest to exit code 3.
"""


class CFSCError(Exception):
    """Base class for all errors raised by this package"""


class ConfigError(CFSCError, ValueError):
    """Invalid configuration, flag, manifest or clip document"""


class ShapeError(CFSCError, ValueError):
    """Tensor or graph dimensions do not agree"""


class NumericError(CFSCError, ArithmeticError):
    """Non-finite values met during forward, backward or an optimizer step"""


class TapeError(CFSCError, RuntimeError):
    """Misuse of the computation tape"""


def shape_str(shape) -> str:
    return "×".join(str(int(s)) for s in shape) if len(shape) else "scalar"
