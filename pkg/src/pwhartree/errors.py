"""Exception hierarchy shared by all solver stages."""

from __future__ import annotations


class PwhError(Exception):
    """Base class for all solver errors."""


class ConfigInvalid(PwhError):
    """Run configuration failed validation.

    Carries the full list of (field path, message) pairs so every problem
    is reported in one pass.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = "; ".join(f"{path}: {msg}" for path, msg in self.problems)
        super().__init__(f"invalid configuration: {lines}")


class DegenerateLattice(PwhError):
    """Lattice vectors are linearly dependent (cell volume below cutoff)."""


class NonNeutralCell(PwhError):
    """A charge density that must integrate to zero over the cell does not."""


class CoulombSingularity(PwhError):
    """Coulomb pairing requested with a zero-wavevector mode present."""


class EigensolverFailure(PwhError):
    """Dense Hermitian diagonalization did not converge."""


class NotAnInsulator(PwhError):
    """Converged ground state has a non-positive gap after band N."""

    def __init__(self, gap, message=None):
        self.gap = gap
        super().__init__(message or f"gap after the occupied bands is {gap:.6g} <= 0")


class ScfNotConverged(PwhError):
    """Damped fixed-point iteration exhausted max_iter.

    The residual history is attached for diagnostics.
    """

    def __init__(self, history, tol):
        self.history = list(history)
        self.tol = tol
        last = self.history[-1] if self.history else float("nan")
        super().__init__(
            f"SCF residual {last:.3e} above tol {tol:.3e} "
            f"after {len(self.history)} iterations"
        )


class IncommensurateQ(PwhError):
    """Requested Bloch offset is not a point of the sampling grid."""


class GapViolated(PwhError):
    """A response denominator fell below half the recorded gap."""


class ContourTouchesSpectrum(PwhError):
    """A contour quadrature node came within gap/8 of an eigenvalue."""


class SingularBody(PwhError):
    """Body block of the dielectric matrix is numerically singular."""


class PerturbationTooLarge(PwhError):
    """Defect coupling exceeds the smallness heuristic (gap/4)."""

    def __init__(self, norm, bound):
        self.norm = norm
        self.bound = bound
        super().__init__(
            f"fiber coupling norm {norm:.3e} exceeds heuristic bound {bound:.3e}; "
            "pass force=True to proceed with the linearized solve anyway"
        )


class StepTooCoarse(PwhError):
    """Time step resolves less than two points per fastest transition period."""


class CorrectorNotConverged(PwhError):
    """Implicit-midpoint fixed-point corrector stalled."""


class SeriesDivergenceWarning(UserWarning):
    """Truncated Dyson series is used outside its guaranteed window."""
