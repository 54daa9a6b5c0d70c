"""
Exceptions shared by the simulation, optimization and experiment modules
"""

from typing import Optional


class SimulationError(RuntimeError):
    """Base class for numerical failures (mapped to exit status 2 by the CLI)"""


class BlowUpError(SimulationError):
    """A particle state became non-finite during time stepping"""

    def __init__(self, step: int, particle: int, replica: Optional[int] = None):
        self.step = step
        self.particle = particle
        self.replica = replica
        where = f"step {step}, particle {particle}"
        if replica is not None:
            where += f", replica {replica}"
        super().__init__(f"Non-finite state at {where}")


class SolverConvergenceError(SimulationError):
    """The entropic transport solver hit its iteration cap"""

    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"Sinkhorn did not converge after {iterations} iterations "
            f"(marginal residual {residual:.3e})"
        )


class ProvenanceError(ValueError):
    """A trajectory and a noise path (or epsilon) do not belong together"""


class BudgetError(ValueError):
    """A control lies outside the declared energy budget"""
