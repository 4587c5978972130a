"""Plane-wave spectral solver for the Hartree model of perfect crystals.

Bloch band structures, the self-consistent periodic ground state, static
dielectric response (microscopic matrices, the L tensor, the macroscopic
permittivity), linearized defect screening, and time-dependent linear and
nonlinear propagation with the frequency-dependent permittivity.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigInvalid,
    ContourTouchesSpectrum,
    CorrectorNotConverged,
    CoulombSingularity,
    DegenerateLattice,
    EigensolverFailure,
    GapViolated,
    IncommensurateQ,
    NonNeutralCell,
    NotAnInsulator,
    PerturbationTooLarge,
    PwhError,
    ScfNotConverged,
    SeriesDivergenceWarning,
    SingularBody,
    StepTooCoarse,
)
from .lattice import (
    Lattice,
    PeriodicFunction,
    PlaneWaveBasis,
    QGrid,
    build_basis,
    build_lattice,
    build_qgrid,
    coulomb_inner,
    coulomb_norm,
    gaussian_density,
    poisson_solve,
    uniform_density,
)
from .bloch import (
    BandStructure,
    assemble_bloch_hamiltonian,
    band_edges,
    band_gap,
    band_structure,
    density_from_bands,
    diagonalize_bloch,
    fermi_level,
)
from .scf import GroundState, ScfParams, scf_solve
from .response import (
    ResponseBlocks,
    chi0_matrix,
    compute_L,
    defect_screening,
    dielectric_limits,
    dielectric_matrix,
    epsilon_m_smallq,
    gaussian_fourier,
    inverse_eps_row0,
    macroscopic_epsilon,
    q1v_contour,
    q1v_sum_over_states,
    qnv_higher_order,
    rescaled_potential_limit,
)
from .dynamics import (
    DrivenPotential,
    ResponseTrajectory,
    TimeGrid,
    charge_drive,
    chi0_omega,
    epsilonM_omega,
    free_propagate,
    kick_state,
    propagate_hartree,
    q1v_time,
    qnv_time,
)
from .config import RunConfig, validate_config
