"""Exception types mapped to process exit codes by the CLI."""


class BranchforgeError(Exception):
    """Base class; exit_code drives the CLI process status."""

    exit_code = 1


class ConfigViolation(BranchforgeError):
    """A parameter relation or config schema constraint is violated."""

    exit_code = 2


class RegimeError(BranchforgeError):
    """Input outside the regime the construction needs (coercivity lost,
    ball exits the sampled domain, materialization budget exhausted)."""

    exit_code = 3


class ConvergenceError(BranchforgeError):
    """An iterative solve (CG, Gauss-Newton, plane refinement) did not reach
    its tolerance within the iteration budget."""

    exit_code = 4


class InvariantViolation(BranchforgeError):
    """A structural invariant that must hold on every run failed."""

    exit_code = 5
