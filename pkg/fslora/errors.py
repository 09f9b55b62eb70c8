from __future__ import annotations


class FsloraError(Exception):
    """Base class for every error raised by the simulator."""


class ShapeError(FsloraError, ValueError):
    pass


class RangeError(FsloraError, ValueError):
    pass


class NumericalError(FsloraError, ArithmeticError):
    def __init__(self, message: str, *, iterations: int | None = None, round: int | None = None, step: int | None = None):
        ctx = []
        if iterations is not None:
            ctx.append(f"iterations={iterations}")
        if round is not None:
            ctx.append(f"round={round}")
        if step is not None:
            ctx.append(f"step={step}")
        super().__init__(f"{message} ({', '.join(ctx)})" if ctx else message)
        self.iterations = iterations
        self.round = round
        self.step = step


class ContractViolation(FsloraError, RuntimeError):
    pass


class ProtocolError(FsloraError, RuntimeError):
    pass


class DegenerateScoresError(FsloraError, ValueError):
    pass


class InfeasiblePartitionError(FsloraError, ValueError):
    pass


class ConfigError(FsloraError, ValueError):
    def __init__(self, message: str, *, keys: list[str] | None = None):
        self.keys = list(keys or [])
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)
