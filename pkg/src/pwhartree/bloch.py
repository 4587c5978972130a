"""Bloch fiber Hamiltonians, band structures, edges and crystal densities.

The fiber at Bloch vector q acts on cell-periodic functions as
-lap/2 - i q.grad + |q|^2/2 + V_per, i.e. matrix entries
(K, K') -> |q+K|^2/2 delta_KK' + |cell|^(-1/2) c_{K-K'}(V_per).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import EigensolverFailure, NotAnInsulator
from .lattice import PeriodicFunction, PlaneWaveBasis, QGrid


@dataclass(frozen=True, eq=False)
class BlochEigenpairs:
    """Lowest eigenpairs of one fiber: ascending energies, phase-fixed vectors."""

    q: np.ndarray
    energies: np.ndarray  # (nbands,)
    vectors: np.ndarray  # (npw, nbands)


@dataclass(frozen=True, eq=False)
class BandStructure:
    """Eigen-data for every grid fiber at a common basis and band count."""

    basis: PlaneWaveBasis
    qgrid: QGrid
    nbands: int
    fibers: tuple  # of BlochEigenpairs, one per grid point

    def energies_array(self) -> np.ndarray:
        """Band energies as an (nq, nbands) array."""
        return np.array([f.energies for f in self.fibers])


@dataclass(frozen=True, eq=False)
class BandEdges:
    """Per-band extrema over the sampled zone and the gaps between them."""

    sigma_minus: np.ndarray  # (nbands,) min over q
    sigma_plus: np.ndarray  # (nbands,) max over q
    gap_after: np.ndarray  # (nbands-1,) sigma_minus[n+1] - sigma_plus[n]


def _coefficient_grid(basis: PlaneWaveBasis, coeffs: np.ndarray) -> np.ndarray:
    """Scatter Fourier coefficients onto the padded dense triple grid."""
    pad = basis._idxpad
    grid = np.zeros(tuple(2 * pad + 1), dtype=complex)
    shifted = basis.mtriples + pad
    grid[shifted[:, 0], shifted[:, 1], shifted[:, 2]] = coeffs
    return grid


def assemble_bloch_hamiltonian(basis: PlaneWaveBasis, vper: PeriodicFunction, q) -> np.ndarray:
    """Dense Hermitian fiber matrix at Bloch vector q (any q, not only grid points)."""
    qv = np.asarray(q, dtype=float)
    shifted = basis.kvecs + qv
    kin = 0.5 * np.einsum("ij,ij->i", shifted, shifted)
    cgrid = _coefficient_grid(basis, vper.coeffs)
    pad = basis._idxpad
    diffs = basis.mtriples[:, None, :] - basis.mtriples[None, :, :] + pad
    pot = cgrid[diffs[..., 0], diffs[..., 1], diffs[..., 2]]
    h = pot / np.sqrt(basis.lattice.cell_volume)
    h[np.arange(basis.size), np.arange(basis.size)] += kin
    return h


def fix_phases(vectors: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-magnitude entry is real positive."""
    out = vectors.copy()
    for n in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, n])))
        piv = out[i, n]
        mag = abs(piv)
        if mag > 0.0:
            out[:, n] *= np.conj(piv) / mag
    return out


def diagonalize_bloch(
    basis: PlaneWaveBasis, vper: PeriodicFunction, q, nbands: int
) -> BlochEigenpairs:
    """Lowest nbands eigenpairs of the fiber at q with the fixed phase convention."""
    if nbands > basis.size:
        raise ValueError(f"nbands={nbands} exceeds basis size {basis.size}")
    h = assemble_bloch_hamiltonian(basis, vper, q)
    try:
        energies, vectors = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:
        raise EigensolverFailure(f"eigh failed at q={np.asarray(q)}") from exc
    return BlochEigenpairs(
        q=np.asarray(q, dtype=float),
        energies=energies[:nbands].copy(),
        vectors=fix_phases(vectors[:, :nbands]),
    )


def band_structure(
    basis: PlaneWaveBasis,
    vper: PeriodicFunction,
    qgrid: QGrid,
    nbands: int,
    workers: int = 1,
) -> BandStructure:
    """Diagonalize every grid fiber; fibers are independent so the map threads."""

    def solve(iq):
        return diagonalize_bloch(basis, vper, qgrid.points[iq], nbands)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fibers = tuple(pool.map(solve, range(qgrid.size)))
    else:
        fibers = tuple(solve(iq) for iq in range(qgrid.size))
    return BandStructure(basis=basis, qgrid=qgrid, nbands=nbands, fibers=fibers)


def band_edges(bands: BandStructure) -> BandEdges:
    """Min/max of each band over the grid and the inter-band gaps."""
    e = bands.energies_array()
    lo = e.min(axis=0)
    hi = e.max(axis=0)
    return BandEdges(sigma_minus=lo, sigma_plus=hi, gap_after=lo[1:] - hi[:-1])


def band_gap(edges: BandEdges, nocc: int) -> float:
    """Gap between band nocc and band nocc+1 (1-based occupied count)."""
    if nocc < 1 or nocc >= edges.sigma_minus.size:
        raise ValueError(f"need 1 <= nocc < nbands to measure a gap, got {nocc}")
    return float(edges.gap_after[nocc - 1])


def fermi_level(edges: BandEdges, nocc: int) -> float:
    """Midgap Fermi level (sigma_plus[N] + sigma_minus[N+1]) / 2; insulators only."""
    g = band_gap(edges, nocc)
    if g <= 0.0:
        raise NotAnInsulator(g)
    return float(0.5 * (edges.sigma_plus[nocc - 1] + edges.sigma_minus[nocc]))


def occupancy_counts(bands: BandStructure, fermi: float) -> np.ndarray:
    """Number of band energies below fermi at each grid point."""
    return (bands.energies_array() < fermi).sum(axis=1)


def density_from_bands(bands: BandStructure, nocc: int) -> PeriodicFunction:
    """Zone-averaged density of the nocc lowest bands per fiber.

    c_G(rho) = |cell|^(-1/2) (1/nq) sum_q sum_{n<=N} sum_K conj(c_K) c_{K+G};
    the cell integral is exactly nocc.
    """
    basis = bands.basis
    if nocc > bands.nbands:
        raise ValueError(f"nocc={nocc} exceeds computed bands {bands.nbands}")
    shift = basis.mode_index_array(
        basis.mtriples[None, :, :] + basis.mtriples[:, None, :]
    )  # [g, k] -> index of K_k + G_g
    coeffs = np.zeros(basis.size, dtype=complex)
    for fiber in bands.fibers:
        occ = fiber.vectors[:, :nocc]
        padded = np.vstack([occ, np.zeros((1, nocc), dtype=complex)])  # row -1 = 0
        # sum_K conj(c_K) c_{K+G} accumulated for every G at once
        coeffs += np.einsum("kn,gkn->g", np.conj(occ), padded[shift], optimize=True)
    vol = basis.lattice.cell_volume
    coeffs /= np.sqrt(vol) * bands.qgrid.size
    return PeriodicFunction(basis=basis, coeffs=coeffs)
