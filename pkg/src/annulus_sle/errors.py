"""Exception types shared across the package."""


class AnnulusSLEError(Exception):
    """Base class for all package errors."""


class PoleProximity(AnnulusSLEError, ValueError):
    """Kernel evaluated within the guard distance of a pole."""


class NonConvergence(AnnulusSLEError, RuntimeError):
    """A series needed more terms than allowed."""


class StepFailure(AnnulusSLEError, RuntimeError):
    """Adaptive integrator could not meet its tolerance."""


class HorizonExceedsModulus(AnnulusSLEError, ValueError):
    """Requested annulus evolution time reaches the modulus."""


class SeedTooCentral(AnnulusSLEError, ValueError):
    """Disc seed violates the truncation bound 12 e^{r_start} <= |z|."""


class NoConvergence(AnnulusSLEError, RuntimeError):
    """Trace epsilon-refinement did not settle."""

    def __init__(self, message, last=None, previous=None):
        super().__init__(message)
        self.last = last
        self.previous = previous


class MeshTooCoarse(AnnulusSLEError, ValueError):
    """Lattice too coarse for the requested construction."""


class DegenerateSpec(AnnulusSLEError, ValueError):
    """Domain description is geometrically invalid."""


class Disconnected(AnnulusSLEError, RuntimeError):
    """Target boundary is not reachable from the start."""


class MissingValue(AnnulusSLEError, KeyError):
    """Field has no value at a required vertex."""


class SolverFailure(AnnulusSLEError, RuntimeError):
    """Linear solve did not reach the residual tolerance."""


class EmptyBoundary(AnnulusSLEError, ValueError):
    """Dirichlet data missing on a required boundary set."""


class ZeroAccess(AnnulusSLEError, ValueError):
    """Hitting probability vanishes where it must be positive."""


class MartingaleStop(AnnulusSLEError):
    """The discrete martingale is not defined past this prefix."""


class TipAtTarget(MartingaleStop):
    """The tip lies in the target boundary or is adjacent to it."""


class BlockedTip(MartingaleStop):
    """No admissible next step from the tip."""


class DisconnectedObservationPoint(MartingaleStop):
    """The prefix separates the observation vertex from the target."""


class PeriodMismatch(AnnulusSLEError, RuntimeError):
    """Harmonic conjugate period differs from 2*pi."""


class TipIsolated(AnnulusSLEError, RuntimeError):
    """No surviving cell or vertex next to the slit tip."""


class ConfigError(AnnulusSLEError, ValueError):
    """Invalid experiment configuration."""
