"""
Enums for opflayer

String-valued so they round-trip through JSON/YAML configs unchanged.
"""

from enum import Enum


class BusRole(str, Enum):
    """Role of a bus in the variable partition"""

    SLACK = "slack"
    """Reference bus: angle fixed, V predicted, P^g and Q^g post-completed"""

    GENERATOR = "generator"
    """Voltage-controlled bus: P^g and V predicted, θ completed, Q^g post-completed"""

    LOAD = "load"
    """Load bus: θ and V completed"""


class RefinementKind(str, Enum):
    """Differentiable refinement used after the guide phase"""

    SINGLE_NR = "single_nr"
    """One Newton-Raphson step on the completion residual"""

    KSTEP_FDPF = "kstep_fdpf"
    """K_R fast-decoupled steps sharing the constant factorizations"""


class GradientMode(str, Enum):
    """Jacobian used to push loss gradients from z back to x"""

    KSTEP = "kstep"
    """Reverse sweep through the recorded refinement steps"""

    EXACT = "exact"
    """Implicit-function Jacobian at the converged state"""


class FdpfVariant(str, Enum):
    """Fast-decoupled matrix construction"""

    XB = "XB"
    """B' from series reactance only, B'' from the full susceptance"""


class Quantity(str, Enum):
    """Physical quantity addressed by a partition index map"""

    PG = "pg"
    QG = "qg"
    VM = "vm"
    VA = "va"
