"""Exception types shared by the simulator, trainer, baselines and harness."""


class SimulationError(Exception):
    """Base class for every error raised by the power-control simulator."""

    exit_code = 1


class ConfigurationError(SimulationError, ValueError):
    """Invalid scenario, experiment or network configuration."""

    exit_code = 2


class ShapeError(SimulationError, ValueError):
    """Array dimensions do not match what an operation expects."""

    exit_code = 3


class NumericError(SimulationError, ArithmeticError):
    """Non-finite values appeared in inputs, losses or gradients."""

    exit_code = 3


class DomainError(SimulationError, ValueError):
    """An argument lies outside the mathematical domain of a function."""

    exit_code = 3


class ContractViolation(SimulationError):
    """A caller broke an operation's precondition (e.g. action out of range)."""


class ReconstructionError(SimulationError):
    """Interference gains could not be recovered from auxiliary measurements."""


class IncompleteSlotError(SimulationError):
    """Uploads for a slot are missing or carry mismatched slot stamps."""


class InsufficientDataError(SimulationError):
    """The replay buffer holds fewer experiences than the requested batch."""


class CostGuardError(SimulationError):
    """Exhaustive search was requested for an instance that is too large."""


class OutputError(SimulationError):
    """Writing or reading experiment artifacts failed."""

    exit_code = 4
