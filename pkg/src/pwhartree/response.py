"""Static linear and higher-order response of the insulating ground state.

Covers first-order perturbation blocks (sum-over-states and contour
quadrature routes), higher-order resolvent expansion terms, the
independent-particle polarization matrix, the symmetrized dielectric
matrix with its small-wavevector head/wing/body limits, the macroscopic
permittivity tensor via Schur complement, and Gaussian defect screening
with charge renormalization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .bloch import BlochEigenpairs, diagonalize_bloch
from .errors import (
    ContourTouchesSpectrum,
    GapViolated,
    IncommensurateQ,
    NotAnInsulator,
    PerturbationTooLarge,
    SingularBody,
)
from .lattice import PeriodicFunction
from .scf import GroundState

_HERMITIAN_TOL = 1e-10
_Q_ZERO_TOL = 1e-12


def _require_insulating(gs: GroundState) -> None:
    if not gs.gap > 0.0:
        raise NotAnInsulator(gs.gap)


def _coefficient_grid(basis, coeffs):
    pad = basis._idxpad
    grid = np.zeros(tuple(2 * pad + 1), dtype=complex)
    shifted = basis.mtriples + pad
    grid[shifted[:, 0], shifted[:, 1], shifted[:, 2]] = coeffs
    return grid


def bloch_coupling_matrix(basis, wcoeffs: np.ndarray, g0=(0, 0, 0)) -> np.ndarray:
    """Plane-wave matrix of the potential component w between two fibers.

    Entry (K, K') is |cell|^(-1/2) w_{(K - G0) - K'}, the coupling of the
    source fiber to the fiber folded back by the reciprocal shift G0.
    """
    cgrid = _coefficient_grid(basis, wcoeffs)
    pad = basis._idxpad
    diffs = (
        basis.mtriples[:, None, :]
        - basis.mtriples[None, :, :]
        - np.asarray(g0, dtype=int)
        + pad
    )
    inside = np.all((diffs >= 0) & (diffs <= 2 * pad), axis=-1)
    clipped = np.clip(diffs, 0, 2 * pad)
    out = cgrid[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
    out[~inside] = 0.0
    return out / np.sqrt(basis.lattice.cell_volume)


def transition_elements(basis, from_vecs, to_vecs, gtriples, gshift=(0, 0, 0)) -> np.ndarray:
    """Per-mode matrix elements m[g, a, b] = <u_to[b], e_G e^{-i Gs.r} u_from[a]>.

    Gs is the integer reciprocal shift with q_to = q_from + q_offset + Gs.dual.
    conj(m[g, a, b]) is the e_G coefficient of the cell-periodic part of
    psi_to[b] conj(psi_from[a]).
    """
    g = np.asarray(gtriples, dtype=int).reshape(-1, 3)
    idx = basis.mode_index_array(
        basis.mtriples[None, :, :] - g[:, None, :] + np.asarray(gshift, dtype=int)
    )
    padded = np.vstack([from_vecs, np.zeros((1, from_vecs.shape[1]), dtype=complex)])
    gathered = padded[idx]  # (nG, npw, nfrom)
    out = np.einsum("kb,gka->gab", np.conj(to_vecs), gathered, optimize=True)
    return out / np.sqrt(basis.lattice.cell_volume)


@dataclass(frozen=True, eq=False)
class ResponseBlocks:
    """First-order occupied/unoccupied response blocks of a Bloch perturbation.

    blocks_plus[iq][p, n] multiplies |psi_{p, q+q_pert}><psi_{n, q}| and
    blocks_minus[iq][p, n] multiplies the conjugate family reached through
    -q_pert; the operator itself is the sum of both families plus their
    Hermitian conjugates, so its diagonal (and trace) vanish identically.
    """

    gs: GroundState
    jpert: tuple  # grid offset as integer triple
    wcoeffs: np.ndarray
    blocks_plus: tuple
    blocks_minus: tuple

    def frobenius_distance(self, other: "ResponseBlocks") -> float:
        acc = 0.0
        for a, b in zip(self.blocks_plus, other.blocks_plus):
            acc += float(np.sum(np.abs(a - b) ** 2))
        for a, b in zip(self.blocks_minus, other.blocks_minus):
            acc += float(np.sum(np.abs(a - b) ** 2))
        return float(np.sqrt(acc))

    def induced_density(self) -> np.ndarray:
        """Fourier coefficients (on the ground-state basis) of the density of
        the full first-order operator, taken at Bloch offset +q_pert."""
        gs = self.gs
        basis = gs.basis
        grid = gs.qgrid
        nocc, nb = gs.nocc, gs.nbands
        gtriples = basis.mtriples
        coeffs = np.zeros(basis.size, dtype=complex)
        for iq in range(grid.size):
            iq2, g0p = grid.add_offset(iq, self.jpert)
            occ_q = gs.bands.fibers[iq].vectors[:, :nocc]
            unocc_q2 = gs.bands.fibers[iq2].vectors[:, nocc:nb]
            m_up = transition_elements(basis, occ_q, unocc_q2, gtriples, gshift=-g0p)
            coeffs += np.einsum("pn,gnp->g", self.blocks_plus[iq], np.conj(m_up), optimize=True)

            iqm, g0m = grid.add_offset(iq, tuple(-j for j in self.jpert))
            unocc_qm = gs.bands.fibers[iqm].vectors[:, nocc:nb]
            occ_q_full = gs.bands.fibers[iq].vectors[:, :nocc]
            # h.c. of the minus family lands at +q_pert: to = occ at q, from = unocc at q - q_pert
            m_dn = transition_elements(basis, unocc_qm, occ_q_full, gtriples, gshift=g0m)
            coeffs += np.einsum(
                "pn,gpn->g", np.conj(self.blocks_minus[iq]), np.conj(m_dn), optimize=True
            )
        return coeffs / grid.size


def _resolve_offset(gs: GroundState, q_pert) -> tuple:
    if q_pert is None:
        return (0, 0, 0)
    q = np.asarray(q_pert, dtype=float)
    if q.shape == (3,):
        iq = gs.qgrid.index_of_point(q)
        return tuple(int(j) for j in gs.qgrid.jtriples[iq])
    return tuple(int(j) for j in q_pert)


def _check_hermitian_at_gamma(basis, wcoeffs, jpert) -> None:
    if any(jpert):
        return
    f = PeriodicFunction(basis=basis, coeffs=wcoeffs)
    if not f.is_real(_HERMITIAN_TOL):
        raise ValueError(
            "a zero-offset perturbation must be real to act as a Hermitian potential"
        )


def q1v_sum_over_states(gs: GroundState, v: PeriodicFunction, q_pert=None) -> ResponseBlocks:
    """First-order response blocks from explicit energy denominators.

    A[p, n](q) = <psi_{p,q+q_pert}|V|psi_{n,q}> / (eps_{n,q} - eps_{p,q+q_pert}).
    """
    _require_insulating(gs)
    jp = _resolve_offset(gs, q_pert)
    _check_hermitian_at_gamma(gs.basis, v.coeffs, jp)
    grid = gs.qgrid
    nocc, nb = gs.nocc, gs.nbands
    plus, minus = [], []
    for iq in range(grid.size):
        fibers = gs.bands.fibers
        for family, store in (("plus", plus), ("minus", minus)):
            joff = jp if family == "plus" else tuple(-j for j in jp)
            iq2, g0 = grid.add_offset(iq, joff)
            if family == "plus":
                w_pw = bloch_coupling_matrix(gs.basis, v.coeffs, g0=g0)
            else:
                w_pw = _mirror_coupling(gs.basis, v.coeffs, g0)
            to_u = fibers[iq2].vectors[:, nocc:nb]
            from_o = fibers[iq].vectors[:, :nocc]
            elements = to_u.conj().T @ w_pw @ from_o
            denom = fibers[iq].energies[None, :nocc] - fibers[iq2].energies[nocc:nb, None]
            if np.min(np.abs(denom)) < 0.5 * gs.gap:
                raise GapViolated(
                    f"denominator {np.min(np.abs(denom)):.3e} below gap/2 at grid point {iq}"
                )
            store.append(elements / denom)
    return ResponseBlocks(
        gs=gs,
        jpert=jp,
        wcoeffs=v.coeffs.copy(),
        blocks_plus=tuple(plus),
        blocks_minus=tuple(minus),
    )


def _mirror_coupling(basis, wcoeffs, g0) -> np.ndarray:
    """Plane-wave matrix of W^dagger toward the fiber folded by G0.

    Entry (K, K') = |cell|^(-1/2) conj(w_{K' - K + G0}).
    """
    cgrid = _coefficient_grid(basis, np.conj(wcoeffs))
    pad = basis._idxpad
    diffs = (
        basis.mtriples[None, :, :]
        - basis.mtriples[:, None, :]
        + np.asarray(g0, dtype=int)
        + pad
    )
    inside = np.all((diffs >= 0) & (diffs <= 2 * pad), axis=-1)
    clipped = np.clip(diffs, 0, 2 * pad)
    out = cgrid[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
    out[~inside] = 0.0
    return out / np.sqrt(basis.lattice.cell_volume)


def _contour_nodes(gs: GroundState, n_quad: int, half_height: float | None = None):
    """Gauss-Legendre nodes/weights on the ellipse through eps_F and inf - gap."""
    inf_spec = gs.spectrum_min
    c = inf_spec - gs.gap
    x0 = 0.5 * (c + gs.fermi)
    a = 0.5 * (gs.fermi - c)
    b = gs.gap if half_height is None else half_height
    t, w = leggauss(n_quad)
    theta = np.pi * (t + 1.0)  # map [-1, 1] -> [0, 2 pi]
    weights = np.pi * w
    z = x0 + a * np.cos(theta) + 1j * b * np.sin(theta)
    dz = -a * np.sin(theta) + 1j * b * np.cos(theta)
    return z, weights * dz


def _guard_contour(z: np.ndarray, energies: np.ndarray, gap: float) -> None:
    dist = np.min(np.abs(z[:, None] - energies[None, :]))
    if dist < gap / 8.0:
        raise ContourTouchesSpectrum(
            f"quadrature node within {dist:.3e} of the spectrum (< gap/8 = {gap / 8.0:.3e})"
        )


def q1v_contour(
    gs: GroundState, v: PeriodicFunction, q_pert=None, n_quad: int = 64
) -> ResponseBlocks:
    """First-order response blocks from the resolvent contour integral.

    Evaluates (2 i pi)^(-1) oint R(z) V R(z) dz by Gauss-Legendre quadrature
    in the elliptic contour angle; agrees with q1v_sum_over_states when the
    quadrature is converged.
    """
    _require_insulating(gs)
    jp = _resolve_offset(gs, q_pert)
    _check_hermitian_at_gamma(gs.basis, v.coeffs, jp)
    grid = gs.qgrid
    nocc, nb = gs.nocc, gs.nbands
    z, zw = _contour_nodes(gs, n_quad)
    plus, minus = [], []
    for iq in range(grid.size):
        fibers = gs.bands.fibers
        for family, store in (("plus", plus), ("minus", minus)):
            joff = jp if family == "plus" else tuple(-j for j in jp)
            iq2, g0 = grid.add_offset(iq, joff)
            if family == "plus":
                w_pw = bloch_coupling_matrix(gs.basis, v.coeffs, g0=g0)
            else:
                w_pw = _mirror_coupling(gs.basis, v.coeffs, g0)
            to_u = fibers[iq2].vectors[:, nocc:nb]
            from_o = fibers[iq].vectors[:, :nocc]
            elements = to_u.conj().T @ w_pw @ from_o
            e_occ = fibers[iq].energies[:nocc]
            e_unocc = fibers[iq2].energies[nocc:nb]
            _guard_contour(z, np.concatenate([fibers[iq].energies, fibers[iq2].energies]), gs.gap)
            # (2 i pi)^(-1) oint dz / ((z - e_u)(z - e_o))
            integral = np.einsum(
                "t,tp,tn->pn", zw, 1.0 / (z[:, None] - e_unocc[None, :]),
                1.0 / (z[:, None] - e_occ[None, :]), optimize=True,
            ) / (2j * np.pi)
            store.append(elements * integral)
    return ResponseBlocks(
        gs=gs,
        jpert=jp,
        wcoeffs=v.coeffs.copy(),
        blocks_plus=tuple(plus),
        blocks_minus=tuple(minus),
    )


def qnv_higher_order(
    gs: GroundState, v: PeriodicFunction, max_order: int, n_quad: int = 64
) -> dict:
    """Resolvent-expansion terms Q_n = (2 i pi)^(-1) oint R (V R)^n dz, n <= max_order.

    Lattice-periodic Hermitian perturbations only.  Returns
    {order: tuple over grid points of full matrices in the fiber eigenbasis
    (every computed band, occupied and empty blocks alike)}.
    """
    _require_insulating(gs)
    if not PeriodicFunction(basis=gs.basis, coeffs=v.coeffs).is_real(_HERMITIAN_TOL):
        raise ValueError("higher-order expansion requires a real lattice-periodic potential")
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    z, zw = _contour_nodes(gs, n_quad)
    v_pw = bloch_coupling_matrix(gs.basis, v.coeffs)
    out = {order: [] for order in range(1, max_order + 1)}
    for iq in range(gs.qgrid.size):
        # full spectrum of the fiber so the expansion is exact for the
        # discretized model, not just the stored band window
        energies, vectors = _full_fiber(gs, iq)
        _guard_contour(z, energies, gs.gap)
        v_eig = vectors.conj().T @ v_pw @ vectors
        acc = {
            order: np.zeros((energies.size, energies.size), dtype=complex)
            for order in range(1, max_order + 1)
        }
        for t in range(z.size):
            r = 1.0 / (z[t] - energies)
            vr = v_eig * r[None, :]
            chain = np.diag(r)
            for order in range(1, max_order + 1):
                chain = chain @ vr  # now R (V R)^order
                acc[order] += zw[t] * chain
        for order in out:
            out[order].append(acc[order] / (2j * np.pi))
    return {order: tuple(mats) for order, mats in out.items()}


def _full_fiber(gs: GroundState, iq: int):
    from .bloch import assemble_bloch_hamiltonian, fix_phases

    h = assemble_bloch_hamiltonian(gs.basis, gs.v0, gs.qgrid.points[iq])
    energies, vectors = np.linalg.eigh(h)
    return energies, fix_phases(vectors)


def eigenbasis_blocks_from_response(blocks: ResponseBlocks) -> tuple:
    """Full per-fiber matrices of a zero-offset first-order operator."""
    if any(blocks.jpert):
        raise ValueError("only zero-offset blocks embed in single-fiber matrices")
    gs = blocks.gs
    nocc, nb = gs.nocc, gs.nbands
    out = []
    for iq in range(gs.qgrid.size):
        m = np.zeros((nb, nb), dtype=complex)
        m[nocc:, :nocc] = blocks.blocks_plus[iq]
        m[:nocc, nocc:] = blocks.blocks_plus[iq].conj().T
        out.append(m)
    return tuple(out)


def chi_mode_selection(basis, ecut_chi: float) -> np.ndarray:
    """Indices of the response ball (modes with |K|^2/2 <= ecut_chi)."""
    if ecut_chi <= 0.0 or ecut_chi > basis.ecut + 1e-12:
        raise ValueError(f"need 0 < ecut_chi <= ecut, got {ecut_chi} vs {basis.ecut}")
    return np.flatnonzero(basis.kinetic <= ecut_chi + 1e-12)


def _fiber_pairs(gs: GroundState, qvec):
    """Yield (fiber at q_i, fiber at q_i + q, gshift) for every grid point.

    Grid-commensurate q reuses the stored eigen-data through folding; any
    other q diagonalizes the shifted fiber directly.
    """
    grid = gs.qgrid
    q = np.asarray(qvec, dtype=float)
    try:
        jp = None if float(np.linalg.norm(q)) < _Q_ZERO_TOL else grid.jtriples[
            grid.index_of_point(q)
        ]
    except IncommensurateQ:
        jp = "off-grid"
    for iq in range(grid.size):
        f1 = gs.bands.fibers[iq]
        if jp is None:
            yield f1, f1, (0, 0, 0)
        elif isinstance(jp, str):
            f2 = diagonalize_bloch(gs.basis, gs.v0, grid.points[iq] + q, gs.nbands)
            yield f1, f2, (0, 0, 0)
        else:
            iq2, g0 = grid.add_offset(iq, tuple(int(j) for j in jp))
            yield f1, gs.bands.fibers[iq2], tuple(int(x) for x in -g0)


def chi0_matrix(
    gs: GroundState, qvec, ecut_chi: float, omega: float = 0.0, eta: float = 0.0
) -> tuple:
    """Independent-particle polarization matrix at Bloch vector q.

    Maps potential-component coefficients to induced-density coefficients on
    the response ball.  Static (omega = eta = 0) matrices are Hermitian with
    -chi0 positive semidefinite.  Returns (mode indices into the basis, matrix).
    """
    _require_insulating(gs)
    sel = chi_mode_selection(gs.basis, ecut_chi)
    gtriples = gs.basis.mtriples[sel]
    nocc, nb = gs.nocc, gs.nbands
    chi = np.zeros((sel.size, sel.size), dtype=complex)
    for f1, f2, gshift in _fiber_pairs(gs, qvec):
        m_all = transition_elements(
            gs.basis, f1.vectors[:, :nb], f2.vectors[:, :nb], gtriples, gshift=gshift
        )
        m_up = m_all[:, :nocc, nocc:]  # occupied at q_i -> empty at q_i + q
        m_dn = m_all[:, nocc:, :nocc]  # empty at q_i -> occupied at q_i + q
        delta_up = f2.energies[None, nocc:] - f1.energies[:nocc, None]
        delta_dn = f2.energies[None, :nocc] - f1.energies[nocc:, None]
        if min(np.min(delta_up), np.min(-delta_dn)) < 0.5 * gs.gap:
            raise GapViolated("transition energy below gap/2 in the polarization sum")
        d_up = -delta_up + omega + 1j * eta
        d_dn = delta_dn - omega - 1j * eta
        chi += np.einsum("gnp,hnp->gh", np.conj(m_up), m_up / d_up, optimize=True)
        chi += np.einsum("gpn,hpn->gh", np.conj(m_dn), m_dn / d_dn, optimize=True)
    return sel, chi / gs.qgrid.size


def dielectric_matrix(
    gs: GroundState, qvec, ecut_chi: float, omega: float = 0.0, eta: float = 0.0
) -> tuple:
    """Symmetrized dielectric matrix 1 - vc^(1/2) chi0 vc^(1/2) at q != 0.

    Static matrices are Hermitian with Hermitian part >= 1.  Returns
    (mode indices, matrix).
    """
    q = np.asarray(qvec, dtype=float)
    sel, chi = chi0_matrix(gs, q, ecut_chi, omega=omega, eta=eta)
    shifted = gs.basis.kvecs[sel] + q
    norms = np.linalg.norm(shifted, axis=1)
    if np.min(norms) < 1e-9:
        raise ValueError("dielectric matrix is singular at q = 0; use the limit assembly")
    f = np.sqrt(4.0 * np.pi) / norms
    eps = -f[:, None] * chi * f[None, :]
    eps[np.arange(sel.size), np.arange(sel.size)] += 1.0
    return sel, eps


_SIX_DIRECTIONS = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ]
)


def compute_L(gs: GroundState) -> tuple:
    """Small-wavevector head tensor L of the dielectric response.

    k^T L k = (8 pi / |cell|) avg_q sum_{occ n, empty p}
              |<(k.grad) u_n, u_p>|^2 / (eps_p - eps_n)^3,
    evaluated along six polarization directions (axes and diagonals) and
    reassembled into the symmetric 3x3 tensor.  Also returns the largest
    share contributed by the last computed band, a truncation diagnostic.
    """
    _require_insulating(gs)
    nocc, nb = gs.nocc, gs.nbands
    totals = np.zeros(6)
    last_band = np.zeros(6)
    for fiber in gs.bands.fibers:
        occ = fiber.vectors[:, :nocc]
        unocc = fiber.vectors[:, nocc:nb]
        # d[a, n, p] = <(e_a . grad) u_n, u_p> with grad -> i K in coefficients
        d = -1j * np.einsum("ka,kn,kp->anp", gs.basis.kvecs, np.conj(occ), unocc, optimize=True)
        delta = fiber.energies[None, nocc:nb] - fiber.energies[:nocc, None]
        w = 1.0 / delta**3
        for j, k in enumerate(_SIX_DIRECTIONS):
            proj = np.abs(np.einsum("a,anp->np", k, d)) ** 2 * w
            totals[j] += proj.sum()
            last_band[j] += proj[:, -1].sum()
    pref = 8.0 * np.pi / (gs.basis.lattice.cell_volume * gs.qgrid.size)
    totals *= pref
    last_band *= pref
    l = np.zeros((3, 3))
    for a in range(3):
        l[a, a] = totals[a]
    pairs = {3: (0, 1), 4: (0, 2), 5: (1, 2)}
    for j, (a, b) in pairs.items():
        l[a, b] = l[b, a] = 0.5 * (totals[j] - totals[a] - totals[b])
    tail_share = float(np.max(last_band / np.maximum(totals, 1e-300)))
    return l, tail_share


@dataclass(frozen=True, eq=False)
class DielectricLimits:
    """Small-wavevector limit blocks of the dielectric matrix.

    head[a, b]: limit of eps~_00(eta sigma) as the quadratic form 1 + sigma^T L sigma.
    wings_upper[a, g]: direction-a component of the wing limit beta_G . sigma.
    wings_lower[g, a]: the transposed wing family (conjugate at omega = 0).
    body[g, h]: limit body block over the nonzero response modes.
    """

    mode_sel: np.ndarray  # indices into the basis, zero mode excluded
    head: np.ndarray  # (3, 3)
    wings_upper: np.ndarray  # (3, nK)
    wings_lower: np.ndarray  # (nK, 3)
    body: np.ndarray  # (nK, nK)


def dielectric_limits(
    gs: GroundState, ecut_chi: float, omega: float = 0.0, eta: float = 0.0
) -> DielectricLimits:
    """Assemble head, wings and body of the q -> 0 dielectric matrix.

    Built from same-fiber transition data: the head-mode factors come from
    first-order Bloch perturbation theory (momentum matrix elements over the
    transition energy), the finite modes from direct overlap elements.
    """
    _require_insulating(gs)
    basis = gs.basis
    sel = chi_mode_selection(basis, ecut_chi)
    if not np.all(basis.mtriples[sel[0]] == 0):
        raise AssertionError("response ball must contain the zero mode first")
    sel_nz = sel[1:]
    gtriples = basis.mtriples[sel_nz]
    knorm = np.linalg.norm(basis.kvecs[sel_nz], axis=1)
    nocc, nb = gs.nocc, gs.nbands
    vol = basis.lattice.cell_volume
    sq4pi = np.sqrt(4.0 * np.pi)

    nk = sel_nz.size
    head = np.zeros((3, 3), dtype=complex)
    wup = np.zeros((3, nk), dtype=complex)
    wlo = np.zeros((nk, 3), dtype=complex)
    body = np.zeros((nk, nk), dtype=complex)
    for fiber in gs.bands.fibers:
        occ = fiber.vectors[:, :nocc]
        unocc = fiber.vectors[:, nocc:nb]
        delta = fiber.energies[None, nocc:nb] - fiber.energies[:nocc, None]  # (N, M)
        g = 1j * np.einsum("ka,kp,kn->anp", basis.kvecs, np.conj(unocc), occ, optimize=True)
        t = transition_elements(basis, occ, unocc, gtriples)  # (nK, n, p) from occ to empty
        s = transition_elements(basis, unocc, occ, gtriples)  # (nK, p, n) from empty to occ

        phi0_a = (-1j * sq4pi / np.sqrt(vol)) * g / delta[None, :, :]
        phig_a = (sq4pi / knorm)[:, None, None] * t
        phi0_b = (-1j * sq4pi / np.sqrt(vol)) * np.conj(g) / delta[None, :, :]
        phig_b = (sq4pi / knorm)[:, None, None] * np.transpose(s, (0, 2, 1))  # index as (nK, n, p)

        d_a = -delta + omega + 1j * eta
        d_b = -delta - omega - 1j * eta
        for phi0, phig, d in ((phi0_a, phig_a, d_a), (phi0_b, phig_b, d_b)):
            w = 1.0 / d
            head -= np.einsum("anp,bnp,np->ab", np.conj(phi0), phi0, w, optimize=True)
            wup -= np.einsum("anp,gnp,np->ag", np.conj(phi0), phig, w, optimize=True)
            wlo -= np.einsum("gnp,anp,np->ga", np.conj(phig), phi0, w, optimize=True)
            body -= np.einsum("gnp,hnp,np->gh", np.conj(phig), phig, w, optimize=True)
    nq = gs.qgrid.size
    head /= nq
    wup /= nq
    wlo /= nq
    body /= nq
    head[np.diag_indices(3)] += 1.0
    body[np.diag_indices(nk)] += 1.0
    return DielectricLimits(mode_sel=sel_nz, head=head, wings_upper=wup, wings_lower=wlo, body=body)


@dataclass(frozen=True, eq=False)
class EpsilonMResult:
    """Macroscopic permittivity tensor and its assembly blocks."""

    eps_m: np.ndarray  # (3, 3); real symmetric in the static case
    l_tensor: np.ndarray  # (3, 3) static head curvature
    l_tail_share: float
    limits: DielectricLimits
    hermiticity_defect: float


def macroscopic_epsilon(
    gs: GroundState, ecut_chi: float, omega: float = 0.0, eta: float = 0.0
) -> EpsilonMResult:
    """Schur complement of the body in the small-wavevector dielectric matrix.

    eps_M = head - wings_upper body^(-1) wings_lower; static results are real
    symmetric with 1 <= eps_M <= 1 + L.
    """
    limits = dielectric_limits(gs, ecut_chi, omega=omega, eta=eta)
    try:
        solved = np.linalg.solve(limits.body, limits.wings_lower)
    except np.linalg.LinAlgError as exc:
        raise SingularBody("body block inversion failed") from exc
    cond = np.linalg.cond(limits.body)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularBody(f"body block condition number {cond:.3e}")
    eps = limits.head - limits.wings_upper @ solved
    l_tensor, tail = compute_L(gs)
    defect = float(np.max(np.abs(eps - eps.conj().T)))
    if omega == 0.0 and eta == 0.0:
        eps = 0.5 * (eps + eps.conj().T).real
    return EpsilonMResult(
        eps_m=eps,
        l_tensor=l_tensor,
        l_tail_share=tail,
        limits=limits,
        hermiticity_defect=defect,
    )


def inverse_eps_row0(gs: GroundState, qvec, ecut_chi: float) -> tuple:
    """Zero-mode row of the inverse dielectric matrix at q (mode indices, row)."""
    sel, eps = dielectric_matrix(gs, qvec, ecut_chi)
    rhs = np.zeros(sel.size, dtype=complex)
    rhs[0] = 1.0
    row = np.linalg.solve(eps.T, rhs)
    return sel, row


def epsilon_m_smallq(gs: GroundState, ecut_chi: float, etas=(0.02, 0.01), axes=None) -> dict:
    """Directly measured 1 / [eps~^(-1)]_00(eta sigma), linearly extrapolated to 0.

    The independent route to sigma^T eps_M sigma: evaluate the full dielectric
    matrix at small eta, invert, and extrapolate the head of the inverse.
    """
    if axes is None:
        axes = np.eye(3)
    etas = sorted(etas, reverse=True)
    out = {}
    for ax in np.asarray(axes, dtype=float):
        label = tuple(ax)
        vals = []
        for eta in etas:
            sel, row = inverse_eps_row0(gs, eta * ax, ecut_chi)
            vals.append(1.0 / row[0].real)
        if len(vals) >= 2:
            e1, e2 = etas[-2], etas[-1]
            v1, v2 = vals[-2], vals[-1]
            extrap = v2 + (v2 - v1) * e2 / (e1 - e2)
        else:
            extrap = vals[-1]
        out[label] = {"etas": tuple(etas), "values": tuple(vals), "extrapolated": float(extrap)}
    return out


def gaussian_fourier(sites):
    """R^3 Fourier transform (unitary convention) of a Gaussian charge mixture."""
    prepared = tuple((np.asarray(c, dtype=float), float(z), float(w)) for c, z, w in sites)

    def mhat(k):
        k = np.asarray(k, dtype=float)
        ksq = np.einsum("...i,...i->...", k, k)
        acc = np.zeros(np.shape(ksq), dtype=complex)
        for center, charge, width in prepared:
            acc = acc + charge * np.exp(-0.5 * width**2 * ksq) * np.exp(
                -1j * (k @ center if k.ndim else np.dot(k, center))
            )
        return acc * (2.0 * np.pi) ** -1.5

    return mhat


@dataclass(frozen=True, eq=False)
class ScreeningResult:
    """Defect screening data: renormalized charge, measured limit and fields."""

    total_charge: float
    l_tensor: np.ndarray
    l0: float
    renormalized_charge: float
    charge_rows: tuple  # (eta, axis_index, measured, target)
    grid_rows: tuple  # per offset: dict with qvec, kvecs, rho_tot, v_hat, rho_resp
    coupling_norm: float
    coupling_bound: float


def _defect_coupling_norm(gs: GroundState, mhat, ecut_chi: float) -> float:
    """Fiber-coupling norm of the defect potential under grid sampling.

    Offsets map a fiber into mutually orthogonal targets, so the squared
    norms add; the zero-offset constant mode is gauge and excluded.
    """
    basis = gs.basis
    grid = gs.qgrid
    vol = basis.lattice.cell_volume
    acc = 0.0
    for iq in range(grid.size):
        q = grid.points[iq]
        shifted = basis.kvecs + q
        norms2 = np.einsum("ij,ij->i", shifted, shifted)
        coeffs = (2.0 * np.pi) ** 1.5 / (np.sqrt(vol) * grid.size) * mhat(shifted)
        w = np.zeros(basis.size, dtype=complex)
        nz = norms2 > 1e-18
        w[nz] = 4.0 * np.pi * coeffs[nz] / norms2[nz]
        mat = bloch_coupling_matrix(basis, w)
        acc += np.linalg.norm(mat, 2) ** 2
    return float(np.sqrt(acc))


def defect_screening(
    gs: GroundState,
    sites,
    ecut_chi: float,
    eta_list=(0.04, 0.02, 0.01),
    force: bool = False,
) -> ScreeningResult:
    """Linearized self-consistent screening of a Gaussian defect charge.

    Solves the screened total charge through the inverse dielectric matrix on
    every grid offset, and measures the small-wavevector screened charge
    (2 pi)^(3/2) (mhat - rhohat)(eta sigma) whose eta -> 0 limit exposes the
    renormalized charge total / (1 + L0).
    """
    _require_insulating(gs)
    mhat = gaussian_fourier(sites)
    total = float(sum(z for _, z, _ in sites))
    l_tensor, _ = compute_L(gs)
    l0 = float(np.trace(l_tensor) / 3.0)
    renorm = total / (1.0 + l0)

    norm = _defect_coupling_norm(gs, mhat, ecut_chi)
    bound = gs.gap / 4.0
    if norm >= bound:
        if not force:
            raise PerturbationTooLarge(norm, bound)
        warnings.warn(
            f"defect coupling {norm:.3e} exceeds gap/4 = {bound:.3e}; "
            "linearized screening may sit outside the perturbative window",
            stacklevel=2,
        )

    axes = np.eye(3)
    charge_rows = []
    for eta in sorted(eta_list, reverse=True):
        for a in range(3):
            qv = eta * axes[a]
            sel, row = inverse_eps_row0(gs, qv, ecut_chi)
            kvecs = gs.basis.kvecs[sel] + qv
            knorm = np.linalg.norm(kvecs, axis=1)
            screened = np.sum(row * (eta / knorm) * mhat(kvecs))
            measured = float(((2.0 * np.pi) ** 1.5 * screened).real)
            charge_rows.append((float(eta), a, measured, renorm))

    grid_rows = []
    for iq in range(gs.qgrid.size):
        qv = gs.qgrid.points[iq]
        if np.linalg.norm(qv) < _Q_ZERO_TOL:
            limits = dielectric_limits(gs, ecut_chi)
            sel_nz = limits.mode_sel
            kv = gs.basis.kvecs[sel_nz]
            knorm = np.linalg.norm(kv, axis=1)
            rhs = mhat(kv) / knorm
            ctot = knorm * np.linalg.solve(limits.body, rhs)
        else:
            sel, eps = dielectric_matrix(gs, qv, ecut_chi)
            kv = gs.basis.kvecs[sel] + qv
            knorm = np.linalg.norm(kv, axis=1)
            ctot = knorm * np.linalg.solve(eps, mhat(kv) / knorm)
        vhat = 4.0 * np.pi * ctot / knorm**2
        grid_rows.append(
            {
                "qvec": qv.copy(),
                "kvecs": kv,
                "rho_tot": ctot,
                "v_hat": vhat,
                "rho_resp": mhat(kv) - ctot,
            }
        )
    return ScreeningResult(
        total_charge=total,
        l_tensor=l_tensor,
        l0=l0,
        renormalized_charge=renorm,
        charge_rows=tuple(charge_rows),
        grid_rows=tuple(grid_rows),
        coupling_norm=norm,
        coupling_bound=bound,
    )


def rescaled_potential_limit(
    gs: GroundState, sites, ecut_chi: float, eta_list=(0.04, 0.02, 0.01), eps_m=None
) -> tuple:
    """Screened rescaled-defect potential versus the homogenized prediction.

    For each eta and axis direction k, evaluates the linear screened potential
    of the rescaled defect at wavevector k and reports the ratio
    |k|^2 What(k) / (4 pi mhat(k)) next to the prediction |k|^2 / (k^T eps_M k).
    """
    if eps_m is None:
        eps_m = macroscopic_epsilon(gs, ecut_chi).eps_m
    mhat = gaussian_fourier(sites)
    axes = np.eye(3)
    rows = []
    for eta in sorted(eta_list, reverse=True):
        for a in range(3):
            k = axes[a]
            sel, row = inverse_eps_row0(gs, eta * k, ecut_chi)
            gvecs = gs.basis.kvecs[sel]
            denom = np.linalg.norm(eta * k + gvecs, axis=1)
            tails = mhat(k + gvecs / eta)
            what = 4.0 * np.pi * eta * np.sum(row * tails / denom)
            measured = float((what / (4.0 * np.pi * mhat(k))).real)
            predicted = float(1.0 / (k @ eps_m @ k))
            rows.append((float(eta), a, measured, predicted))
    return tuple(rows)
