"""Exception types raised across the package."""


class BlockCalError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    code = "error"


class RegionUnreachable(BlockCalError):
    code = "region_unreachable"


class OutOfDomain(BlockCalError):
    code = "out_of_domain"


class DimensionMismatch(BlockCalError, ValueError):
    code = "dimension_mismatch"


class NotPositiveDefinite(BlockCalError, ArithmeticError):
    code = "not_positive_definite"


class OptimizerDiverged(BlockCalError):
    code = "optimizer_diverged"


class InitInfeasible(BlockCalError):
    code = "init_infeasible"


class NonDifferentiablePoint(BlockCalError):
    code = "non_differentiable_point"


class EmptyChain(BlockCalError):
    code = "empty_chain"


class ConfigError(BlockCalError):
    code = "config_error"


class ParseError(BlockCalError, ValueError):
    """Malformed input file; the message carries the path and line number."""

    code = "parse_error"

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line
