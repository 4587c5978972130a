"""Lattice geometry, plane-wave bases, Brillouin-zone grids and periodic fields.

Fourier conventions: the cell modes are e_K(r) = |cell|^(-1/2) exp(i K.r), a
periodic field is v = sum_K c_K e_K, and real fields satisfy
c_{-K} = conj(c_K).  All quantities are in Hartree atomic units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CoulombSingularity, DegenerateLattice, IncommensurateQ, NonNeutralCell

_DEGENERACY_CUTOFF = 1e-12
_NEUTRALITY_TOL = 1e-10
_MODE_ZERO_TOL = 1e-12
_COMMENSURATE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Lattice:
    """Direct and reciprocal cell data.

    vectors: rows are the direct lattice vectors a1, a2, a3.
    dual: rows are the reciprocal vectors b_j with a_i . b_j = 2 pi delta_ij.
    """

    vectors: np.ndarray
    dual: np.ndarray
    cell_volume: float
    bz_volume: float


@dataclass(frozen=True, eq=False)
class PlaneWaveBasis:
    """Kinetic-energy ball of reciprocal modes, deterministically ordered.

    Modes are every K = m . dual with |K|^2/2 <= ecut, sorted by
    (|K|^2/2, m1, m2, m3).  The set is closed under negation.
    """

    lattice: Lattice
    ecut: float
    mtriples: np.ndarray  # (npw, 3) int
    kvecs: np.ndarray  # (npw, 3) float
    kinetic: np.ndarray  # (npw,) |K|^2 / 2
    _lookup: dict = field(repr=False, default_factory=dict)
    # dense triple -> index map padded to cover sums/differences of two modes
    _idxgrid: np.ndarray = field(repr=False, default=None)
    _idxpad: np.ndarray = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return self.mtriples.shape[0]

    def index_of(self, mtriple) -> int:
        """Index of an integer mode triple, or -1 when outside the ball."""
        return self._lookup.get(tuple(int(m) for m in mtriple), -1)

    def mode_index_array(self, mtriples) -> np.ndarray:
        """Vectorized index_of for an (..., 3) integer array."""
        m = np.asarray(mtriples, dtype=int)
        inside = np.all(np.abs(m) <= self._idxpad, axis=-1)
        clipped = np.clip(m, -self._idxpad, self._idxpad) + self._idxpad
        out = self._idxgrid[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
        return np.where(inside, out, -1)

    def shift_table(self, gtriple) -> np.ndarray:
        """Index of K + G for each basis mode K (-1 where it leaves the ball)."""
        return self.mode_index_array(self.mtriples + np.asarray(gtriple, dtype=int))


@dataclass(frozen=True, eq=False)
class QGrid:
    """Gamma-centered Monkhorst-Pack sampling of the Brillouin zone.

    points: q = sum_i (j_i / n_i) b_i with fractional parts folded to
    (-1/2, 1/2].  Weights are uniform.
    """

    lattice: Lattice
    dims: tuple
    jtriples: np.ndarray  # (nq, 3) signed folded integers
    points: np.ndarray  # (nq, 3)
    _lookup: dict = field(repr=False, default_factory=dict)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)

    def index_of_point(self, q) -> int:
        """Grid index of a Bloch vector; raises IncommensurateQ if off-grid."""
        frac = np.asarray(q, dtype=float) @ self.lattice.vectors.T / (2.0 * np.pi)
        scaled = frac * np.asarray(self.dims)
        j = np.rint(scaled)
        if np.max(np.abs(scaled - j)) > _COMMENSURATE_TOL:
            raise IncommensurateQ(f"Bloch vector {np.asarray(q)} is not on the {self.dims} grid")
        key = tuple(int(_fold_signed(int(ji), n)) for ji, n in zip(j, self.dims))
        idx = self._lookup.get(key, -1)
        if idx < 0:
            raise IncommensurateQ(f"folded index {key} missing from grid")
        return idx

    def add_offset(self, iq: int, jp) -> tuple:
        """Fold q_iq + offset back onto the grid.

        Returns (index of the folded point, integer triple G0 such that
        q_iq + q_offset = q_folded + G0 . dual).
        """
        jtot = self.jtriples[iq] + np.asarray(jp, dtype=int)
        folded = np.array([_fold_signed(int(t), n) for t, n in zip(jtot, self.dims)])
        g0 = (jtot - folded) // np.asarray(self.dims)
        return self._lookup[tuple(int(x) for x in folded)], g0


@dataclass(frozen=True, eq=False)
class PeriodicFunction:
    """Periodic field stored as Fourier coefficients on a plane-wave basis."""

    basis: PlaneWaveBasis
    coeffs: np.ndarray  # (npw,) complex

    def integral(self) -> complex:
        """Integral over one cell, |cell|^(1/2) c_0."""
        i0 = self.basis.index_of((0, 0, 0))
        c0 = self.coeffs[i0] if i0 >= 0 else 0.0
        return np.sqrt(self.basis.lattice.cell_volume) * c0

    def is_real(self, tol: float = 1e-12) -> bool:
        """Check c_{-K} = conj(c_K) over the whole ball."""
        for i, m in enumerate(self.basis.mtriples):
            j = self.basis.index_of(-m)
            if abs(self.coeffs[j] - np.conj(self.coeffs[i])) > tol:
                return False
        return True

    def evaluate(self, points) -> np.ndarray:
        """Evaluate sum_K c_K e_K at Cartesian points, shape (..., 3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        phases = np.exp(1j * pts @ self.basis.kvecs.T)
        vol = self.basis.lattice.cell_volume
        return (phases @ self.coeffs) / np.sqrt(vol)

    def norm_sq(self) -> float:
        """Squared L2 norm over the cell (Parseval)."""
        return float(np.vdot(self.coeffs, self.coeffs).real)


def _fold_signed(j: int, n: int) -> int:
    """Fold an integer grid index to the signed residue in (-n/2, n/2]."""
    r = j % n
    return r - n if 2 * r > n else r


def build_lattice(a1, a2, a3) -> Lattice:
    """Assemble direct/reciprocal data from three direct lattice vectors."""
    a = np.array([a1, a2, a3], dtype=float)
    if a.shape != (3, 3):
        raise ValueError("lattice vectors must be three 3-vectors")
    vol = float(abs(np.linalg.det(a)))
    scale = float(np.max(np.linalg.norm(a, axis=1))) ** 3
    if vol <= _DEGENERACY_CUTOFF * max(scale, 1.0):
        raise DegenerateLattice(f"cell volume {vol:.3e} below degeneracy cutoff")
    # rows of b solve a_i . b_j = 2 pi delta_ij
    b = 2.0 * np.pi * np.linalg.inv(a).T
    return Lattice(vectors=a, dual=b, cell_volume=vol, bz_volume=(2.0 * np.pi) ** 3 / vol)


def build_basis(lattice: Lattice, ecut: float) -> PlaneWaveBasis:
    """Enumerate all modes with kinetic energy |K|^2/2 <= ecut.

    Ordering is lexicographic on (|K|^2/2, m1, m2, m3), which fixes every
    downstream array layout.
    """
    if ecut <= 0.0:
        raise ValueError(f"ecut must be positive, got {ecut}")
    kmax = np.sqrt(2.0 * ecut)
    # |m_i| = |K . a_i| / (2 pi) <= |K| |a_i| / (2 pi)
    bounds = np.floor(kmax * np.linalg.norm(lattice.vectors, axis=1) / (2.0 * np.pi)).astype(int)
    rng = [np.arange(-b, b + 1) for b in bounds]
    m1, m2, m3 = np.meshgrid(*rng, indexing="ij")
    mtriples = np.stack([m1.ravel(), m2.ravel(), m3.ravel()], axis=1)
    kvecs = mtriples @ lattice.dual
    kinetic = 0.5 * np.einsum("ij,ij->i", kvecs, kvecs)
    keep = kinetic <= ecut + 1e-12
    mtriples, kvecs, kinetic = mtriples[keep], kvecs[keep], kinetic[keep]
    order = np.lexsort((mtriples[:, 2], mtriples[:, 1], mtriples[:, 0], kinetic))
    mtriples, kvecs, kinetic = mtriples[order], kvecs[order], kinetic[order]
    lookup = {tuple(int(x) for x in m): i for i, m in enumerate(mtriples)}
    pad = 2 * np.max(np.abs(mtriples), axis=0)
    idxgrid = np.full(tuple(2 * pad + 1), -1, dtype=int)
    shifted = mtriples + pad
    idxgrid[shifted[:, 0], shifted[:, 1], shifted[:, 2]] = np.arange(mtriples.shape[0])
    return PlaneWaveBasis(
        lattice=lattice,
        ecut=float(ecut),
        mtriples=mtriples,
        kvecs=kvecs,
        kinetic=kinetic,
        _lookup=lookup,
        _idxgrid=idxgrid,
        _idxpad=pad,
    )


def build_qgrid(lattice: Lattice, dims) -> QGrid:
    """Gamma-centered grid with dims = (n1, n2, n3), folded to the first zone."""
    dims = tuple(int(n) for n in dims)
    if any(n < 1 for n in dims):
        raise ValueError(f"grid dims must be >= 1, got {dims}")
    jtriples = []
    for j1 in range(dims[0]):
        for j2 in range(dims[1]):
            for j3 in range(dims[2]):
                jtriples.append(
                    (
                        _fold_signed(j1, dims[0]),
                        _fold_signed(j2, dims[1]),
                        _fold_signed(j3, dims[2]),
                    )
                )
    jarr = np.array(jtriples, dtype=int)
    fracs = jarr / np.asarray(dims, dtype=float)
    points = fracs @ lattice.dual
    lookup = {tuple(int(x) for x in j): i for i, j in enumerate(jarr)}
    return QGrid(lattice=lattice, dims=dims, jtriples=jarr, points=points, _lookup=lookup)


def poisson_solve(rho: PeriodicFunction, neutralize: bool = False) -> PeriodicFunction:
    """Periodic Coulomb potential of a neutral cell charge: -lap V = 4 pi rho.

    Coefficients map as c_K(V) = 4 pi c_K(rho)/|K|^2 with the zero mode
    gauged to 0.  The cell must be neutral unless neutralize=True, in which
    case the compensating uniform background is implied.
    """
    basis = rho.basis
    i0 = basis.index_of((0, 0, 0))
    if not neutralize and i0 >= 0 and abs(rho.coeffs[i0]) >= _NEUTRALITY_TOL:
        raise NonNeutralCell(
            f"zero-mode coefficient {abs(rho.coeffs[i0]):.3e} exceeds {_NEUTRALITY_TOL:.0e}"
        )
    out = np.zeros_like(rho.coeffs)
    ksq = 2.0 * basis.kinetic
    nonzero = ksq > 0.0
    out[nonzero] = 4.0 * np.pi * rho.coeffs[nonzero] / ksq[nonzero]
    return PeriodicFunction(basis=basis, coeffs=out)


def coulomb_inner(f: PeriodicFunction, g: PeriodicFunction, q) -> complex:
    """Per-cell Coulomb pairing at Bloch vector q.

    Returns (4 pi / |cell|) sum_K conj(c_K(f)) c_K(g) / |q + K|^2.  Modes
    with q + K = 0 must carry (numerically) zero coefficients on both sides.
    """
    if f.basis is not g.basis and f.basis.size != g.basis.size:
        raise ValueError("coulomb_inner requires a common basis")
    basis = f.basis
    shifted = basis.kvecs + np.asarray(q, dtype=float)
    denom = np.einsum("ij,ij->i", shifted, shifted)
    singular = denom < 1e-20
    if np.any(singular):
        bad = singular & (
            (np.abs(f.coeffs) > _MODE_ZERO_TOL) | (np.abs(g.coeffs) > _MODE_ZERO_TOL)
        )
        if np.any(bad):
            raise CoulombSingularity(
                "zero wavevector q+K carries a nonzero coefficient; "
                "neutralize the charge or shift q"
            )
    keep = ~singular
    acc = np.sum(np.conj(f.coeffs[keep]) * g.coeffs[keep] / denom[keep])
    return complex(4.0 * np.pi / basis.lattice.cell_volume * acc)


def coulomb_norm(f: PeriodicFunction) -> float:
    """Coulomb norm sqrt(coulomb_inner(f, f, 0)) of a neutral periodic charge."""
    value = coulomb_inner(f, f, (0.0, 0.0, 0.0))
    return float(np.sqrt(max(value.real, 0.0)))


def gaussian_density(basis: PlaneWaveBasis, sites) -> PeriodicFunction:
    """Lattice-periodized Gaussian charge mixture.

    sites: iterable of (center, charge, width).  Each site contributes
    coefficients (charge / |cell|^(1/2)) exp(-width^2 |K|^2 / 2) exp(-i K.center),
    and the cell integral is the total charge exactly.
    """
    coeffs = np.zeros(basis.size, dtype=complex)
    sqrt_vol = np.sqrt(basis.lattice.cell_volume)
    ksq = 2.0 * basis.kinetic
    for center, charge, width in sites:
        if width <= 0.0:
            raise ValueError(f"Gaussian width must be positive, got {width}")
        phase = np.exp(-1j * basis.kvecs @ np.asarray(center, dtype=float))
        coeffs += (charge / sqrt_vol) * np.exp(-0.5 * width**2 * ksq) * phase
    return PeriodicFunction(basis=basis, coeffs=coeffs)


def uniform_density(basis: PlaneWaveBasis, total_charge: float) -> PeriodicFunction:
    """Constant density integrating to total_charge over one cell."""
    coeffs = np.zeros(basis.size, dtype=complex)
    coeffs[basis.index_of((0, 0, 0))] = total_charge / np.sqrt(basis.lattice.cell_volume)
    return PeriodicFunction(basis=basis, coeffs=coeffs)
