"""Safety filtering with receding-horizon reach-avoid optimal control.

The package builds an implicit control barrier function each control cycle by
solving a reach-avoid trajectory optimisation, then minimally corrects a task
policy's control through a quadratically constrained program. A switching
baseline, an analytic-barrier baseline, and closed-loop vehicle experiments
are included.
"""

from .errors import CbfDdpError, ConfigError, SolverNumericError

__all__ = [
    "CbfDdpError",
    "ConfigError",
    "SolverNumericError",
]

__version__ = "0.1.0"
