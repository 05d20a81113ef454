"""Exception types shared across the package.

Every error carries a short machine-parsable ``category`` used by the CLI
exit path.
"""


class LdtError(Exception):
    category = "error"


class ShapeError(LdtError):
    category = "shape"


class NotPositiveDefiniteError(LdtError):
    category = "not-positive-definite"

    def __init__(self, pivot_index, value):
        self.pivot_index = pivot_index
        self.value = value
        super().__init__(
            f"matrix not positive definite: pivot {pivot_index} = {value:g}"
        )


class ConvergenceError(LdtError):
    category = "no-convergence"


class EmptyMaskError(LdtError):
    category = "empty-mask"


class TapeError(LdtError):
    category = "tape"


class ConfigError(LdtError):
    category = "config"


class CheckpointError(LdtError):
    category = "checkpoint"


class InfeasibleRateError(LdtError):
    category = "infeasible-rate"

    def __init__(self, requested, achievable):
        self.requested = requested
        self.achievable = achievable
        super().__init__(
            f"requested pruning rate {requested:.4f} infeasible; "
            f"max achievable under constraints is {achievable:.4f}"
        )


class EvalError(LdtError):
    category = "eval"
