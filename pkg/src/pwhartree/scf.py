"""Self-consistent Hartree ground state of the neutral crystal.

Damped fixed-point iteration on the density: rho_{k+1} = (1-a) rho_k
+ a rho[V(rho_k)], where V(rho) is the periodic Coulomb potential of
rho_nuc - rho and rho[V] is the aufbau density of the N lowest bands.
Convergence is measured in the Coulomb norm of the density residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bloch import BandStructure, band_edges, band_structure, density_from_bands
from .errors import NotAnInsulator, ScfNotConverged
from .lattice import (
    PeriodicFunction,
    PlaneWaveBasis,
    QGrid,
    build_basis,
    coulomb_inner,
    coulomb_norm,
    gaussian_density,
    poisson_solve,
    uniform_density,
)

_NEUTRAL_CHARGE_TOL = 1e-8


@dataclass(frozen=True)
class ScfParams:
    """Iteration controls for scf_solve."""

    mixing: float = 0.6
    tol_density: float = 1e-9
    max_iter: int = 200
    nbands_extra: int = 8
    require_insulator: bool = True
    workers: int = 1


@dataclass(frozen=True, eq=False)
class GroundState:
    """Converged periodic ground state and its spectral data."""

    basis: PlaneWaveBasis
    qgrid: QGrid
    sites: tuple  # ((center, charge, width), ...)
    nocc: int
    nbands: int
    rho_nuc: PeriodicFunction
    rho0: PeriodicFunction
    v0: PeriodicFunction
    bands: BandStructure
    gap: float
    fermi: float
    residual: float
    niter: int
    residual_history: tuple
    energy_history: tuple
    energy_kinetic: float
    energy_coulomb: float

    @property
    def energy_total(self) -> float:
        return self.energy_kinetic + self.energy_coulomb

    @property
    def spectrum_min(self) -> float:
        return float(min(f.energies[0] for f in self.bands.fibers))


def kinetic_energy_per_cell(bands: BandStructure, nocc: int) -> float:
    """Zone-averaged kinetic energy of the nocc lowest bands (nonnegative)."""
    acc = 0.0
    for fiber in bands.fibers:
        shifted = bands.basis.kvecs + fiber.q
        w = np.einsum("ij,ij->i", shifted, shifted)
        occ = fiber.vectors[:, :nocc]
        acc += 0.5 * float(np.einsum("k,kn->", w, np.abs(occ) ** 2))
    return acc / bands.qgrid.size


def coulomb_energy_per_cell(rho_nuc: PeriodicFunction, rho: PeriodicFunction) -> float:
    """Half the Coulomb pairing of the net charge rho_nuc - rho with itself."""
    diff = PeriodicFunction(basis=rho.basis, coeffs=rho_nuc.coeffs - rho.coeffs)
    return 0.5 * coulomb_inner(diff, diff, (0.0, 0.0, 0.0)).real


def hartree_energy_per_cell(gs: GroundState) -> tuple:
    """(kinetic, coulomb) energy addends of the converged state, both >= 0."""
    return (
        kinetic_energy_per_cell(gs.bands, gs.nocc),
        coulomb_energy_per_cell(gs.rho_nuc, gs.rho0),
    )


def nuclear_tail_energy(basis: PlaneWaveBasis, sites, rel_tol: float = 1e-13) -> float:
    """Coulomb self-pairing of the nuclear charge carried by modes above ecut.

    Makes the Coulomb addend independent of the basis ball: the electronic
    coefficients vanish there, so the tail is a pure Gaussian lattice sum,
    accumulated over growing shells until it stops changing.
    """
    lattice = basis.lattice
    total = 0.0
    ecut_lo = basis.ecut
    ecut_hi = 4.0 * basis.ecut
    while True:
        big = build_basis(lattice, ecut_hi)
        rho = gaussian_density(big, sites)
        mask = big.kinetic > ecut_lo + 1e-12
        ksq = 2.0 * big.kinetic[mask]
        part = 4.0 * np.pi / lattice.cell_volume * np.sum(np.abs(rho.coeffs[mask]) ** 2 / ksq)
        increment = 0.5 * part - total
        total = 0.5 * part
        if abs(increment) <= rel_tol * max(abs(total), 1.0):
            return float(total)
        ecut_hi *= 2.0


def scf_solve(
    basis: PlaneWaveBasis,
    qgrid: QGrid,
    sites,
    params: ScfParams = ScfParams(),
    initial_density: PeriodicFunction | None = None,
) -> GroundState:
    """Iterate the damped Hartree map to the insulating fixed point.

    sites define the Gaussian nuclear charge; the electron count is its total
    charge, which must be a positive integer (neutral cell).  Convergence is
    declared when the Coulomb-norm residual of the density update drops below
    tol_density; the insulator check runs only on the converged state.
    """
    sites = tuple((tuple(float(x) for x in c), float(z), float(w)) for c, z, w in sites)
    ztot = sum(z for _, z, _ in sites)
    nocc = int(round(ztot))
    if nocc < 1 or abs(ztot - nocc) > _NEUTRAL_CHARGE_TOL:
        raise ValueError(f"total nuclear charge {ztot} must be a positive integer")
    if not 0.0 < params.mixing <= 1.0:
        raise ValueError(f"mixing must lie in (0, 1], got {params.mixing}")
    nbands = nocc + params.nbands_extra
    rho_nuc = gaussian_density(basis, sites)
    rho = initial_density if initial_density is not None else uniform_density(basis, float(nocc))

    residual_history = []
    energy_history = []
    converged = False
    bands = rho_out = v = None
    for _ in range(params.max_iter):
        net = PeriodicFunction(basis=basis, coeffs=rho_nuc.coeffs - rho.coeffs)
        v = poisson_solve(net)
        bands = band_structure(basis, v, qgrid, nbands, workers=params.workers)
        rho_out = density_from_bands(bands, nocc)
        diff = PeriodicFunction(basis=basis, coeffs=rho_out.coeffs - rho.coeffs)
        residual = coulomb_norm(diff)
        residual_history.append(residual)
        energy_history.append(
            kinetic_energy_per_cell(bands, nocc) + coulomb_energy_per_cell(rho_nuc, rho_out)
        )
        if residual < params.tol_density:
            converged = True
            break
        rho = PeriodicFunction(
            basis=basis, coeffs=(1.0 - params.mixing) * rho.coeffs + params.mixing * rho_out.coeffs
        )
    if not converged:
        raise ScfNotConverged(residual_history, params.tol_density)

    edges = band_edges(bands)
    gap = float(edges.sigma_minus[nocc] - edges.sigma_plus[nocc - 1])
    if params.require_insulator and gap <= 0.0:
        raise NotAnInsulator(gap)
    fermi = (
        0.5 * (edges.sigma_plus[nocc - 1] + edges.sigma_minus[nocc]) if gap > 0.0 else float("nan")
    )
    return GroundState(
        basis=basis,
        qgrid=qgrid,
        sites=sites,
        nocc=nocc,
        nbands=nbands,
        rho_nuc=rho_nuc,
        rho0=rho_out,
        v0=v,
        bands=bands,
        gap=gap,
        fermi=fermi,
        residual=residual_history[-1],
        niter=len(residual_history) - 1,
        residual_history=tuple(residual_history),
        energy_history=tuple(energy_history),
        energy_kinetic=kinetic_energy_per_cell(bands, nocc),
        energy_coulomb=coulomb_energy_per_cell(rho_nuc, rho_out),
    )
