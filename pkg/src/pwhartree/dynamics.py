"""Time-dependent response: free propagation, driven linear and iterated
response, nonlinear Hartree dynamics, and the frequency-dependent
permittivity tensor.

All states are density-matrix corrections Q(t) expressed per grid fiber in
the eigenbasis of the unperturbed Bloch Hamiltonian.  A lattice-periodic
drive keeps every fiber square and independent; a drive at a grid
commensurate Bloch offset couples each fiber to its folded target and the
stored sector carries rows in the target eigenbasis, columns in the source
one.  Frequency-domain quantities follow the Fourier convention
Ff(omega) = integral f(t) exp(+i omega t) dt, so causal kernels are
regularized by omega -> omega + i eta.
"""

from dataclasses import dataclass

import warnings

import numpy as np

from .errors import (
    CorrectorNotConverged,
    SeriesDivergenceWarning,
    SingularBody,
    StepTooCoarse,
)
from .lattice import PeriodicFunction, gaussian_density, poisson_solve
from .scf import GroundState
from .response import (
    _require_insulating,
    bloch_coupling_matrix,
    chi0_matrix,
    macroscopic_epsilon,
    transition_elements,
)

_ENVELOPES = ("delta-kick", "monochromatic", "gaussian-pulse")
_PAULI_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform time grid t_k = t0 + k dt, k = 0..nsteps."""

    dt: float
    nsteps: int
    t0: float = 0.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.nsteps < 1:
            raise ValueError(f"nsteps must be >= 1, got {self.nsteps}")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nsteps + 1)


@dataclass(frozen=True, eq=False)
class DrivenPotential:
    """Spatial profile times a named temporal envelope.

    profile holds Fourier coefficients of the spatial part; for a nonzero
    q_offset they are coefficients of the modes q_offset + K.  Envelopes:
    'delta-kick' (amplitude times a Dirac impulse at t = 0), 'monochromatic'
    (amplitude cos(omega t)) and 'gaussian-pulse'
    (amplitude exp(-(t - center)^2 / (2 width^2))).
    """

    profile: PeriodicFunction
    envelope: str
    amplitude: float
    omega: float = 0.0
    center: float = 0.0
    width: float = 1.0
    q_offset: tuple = (0, 0, 0)

    def __post_init__(self):
        if self.envelope not in _ENVELOPES:
            raise ValueError(f"unknown envelope {self.envelope!r}, pick from {_ENVELOPES}")
        if self.envelope == "gaussian-pulse" and self.width <= 0.0:
            raise ValueError("gaussian-pulse width must be positive")

    def envelope_at(self, t):
        """Temporal factor at time(s) t; undefined for the delta kick."""
        t = np.asarray(t, dtype=float)
        if self.envelope == "monochromatic":
            return self.amplitude * np.cos(self.omega * t)
        if self.envelope == "gaussian-pulse":
            return self.amplitude * np.exp(-((t - self.center) ** 2) / (2.0 * self.width**2))
        raise ValueError("the delta kick has no pointwise envelope; use its closed form")


def charge_drive(
    basis, sites, envelope: str, amplitude: float, omega: float = 0.0,
    center: float = 0.0, width: float = 1.0,
) -> DrivenPotential:
    """Drive whose spatial profile is the Coulomb potential of a periodized
    Gaussian charge mixture (zero-mean part; the constant mode is gauge)."""
    rho = gaussian_density(basis, sites)
    v = poisson_solve(rho, neutralize=True)
    return DrivenPotential(
        profile=v, envelope=envelope, amplitude=amplitude,
        omega=omega, center=center, width=width,
    )


@dataclass(frozen=True, eq=False)
class ResponseTrajectory:
    """Per-step scalar observables plus the final state of a propagation.

    density[k] holds the induced-density coefficients at step k on the basis
    modes (at the drive's Bloch offset when that is nonzero); trace0 is the
    zone-averaged trace per cell, conserved along nonlinear trajectories.
    Full blocks are kept only for the final time to bound memory.
    """

    times: np.ndarray
    trace0: np.ndarray
    block_norms: np.ndarray
    density: np.ndarray  # (nsteps + 1, npw) complex
    final_blocks: tuple
    jpert: tuple
    nbands: int


def _eigendata(gs: GroundState, nbands: int):
    """Per-fiber (energies, vectors) truncated to nbands stored bands."""
    if nbands > gs.nbands:
        raise ValueError(f"nbands={nbands} exceeds the {gs.nbands} stored bands")
    return [
        (f.energies[:nbands], f.vectors[:, :nbands]) for f in gs.bands.fibers
    ]


def _resolve_nbands(gs: GroundState, nbands) -> int:
    n = gs.nbands if nbands is None else int(nbands)
    if n < gs.nocc + 1:
        raise ValueError(f"need at least one empty band, got nbands={n}")
    return n


def _pair_tables(gs: GroundState, jpert):
    """For each fiber index, the folded target index and coupling shift."""
    jp = tuple(int(j) for j in jpert)
    out = []
    for iq in range(gs.qgrid.size):
        if jp == (0, 0, 0):
            out.append((iq, (0, 0, 0)))
        else:
            iq2, g0 = gs.qgrid.add_offset(iq, jp)
            out.append((iq2, tuple(int(x) for x in g0)))
    return out


def _density_tensors(gs: GroundState, eig, pairs):
    """P[g, a, b]: mode-g coefficient of psi_a(target) conj(psi_b)(source)."""
    tensors = []
    for iq, (iq2, g0) in enumerate(pairs):
        to_vecs = eig[iq2][1]
        from_vecs = eig[iq][1]
        m = transition_elements(
            gs.basis, from_vecs, to_vecs, gs.basis.mtriples,
            gshift=tuple(-x for x in g0),
        )
        tensors.append(np.conj(np.transpose(m, (0, 2, 1))))
    return tensors


def _coupling_matrices(gs: GroundState, profile: PeriodicFunction, eig, pairs):
    """W in the paired eigenbases: rows target fiber, columns source fiber."""
    out = []
    for iq, (iq2, g0) in enumerate(pairs):
        w_pw = bloch_coupling_matrix(gs.basis, profile.coeffs, g0=g0)
        out.append(eig[iq2][1].conj().T @ w_pw @ eig[iq][1])
    return out


def _max_transition(gs: GroundState, eig, pairs) -> float:
    spread = 0.0
    for iq, (iq2, _) in enumerate(pairs):
        e1, e2 = eig[iq][0], eig[iq2][0]
        spread = max(spread, float(e2.max() - e1.min()), float(e1.max() - e2.min()))
    return spread


def _guard_step(dt: float, max_delta: float) -> None:
    if dt * max_delta > 0.5:
        raise StepTooCoarse(
            f"dt * max transition frequency = {dt * max_delta:.3f} > 0.5; "
            "reduce dt or the band window"
        )


def free_propagate(gs: GroundState, blocks, t: float, jpert=(0, 0, 0), nbands=None):
    """Conjugate eigenbasis blocks by the free propagator for a time t.

    Block (a, b) picks up exp(-i (eps_a(target) - eps_b(source)) t); exactly
    unitary, so Frobenius norms are preserved.
    """
    nb = _resolve_nbands(gs, nbands)
    eig = _eigendata(gs, nb)
    pairs = _pair_tables(gs, jpert)
    out = []
    for iq, (iq2, _) in enumerate(pairs):
        delta = eig[iq2][0][:, None] - eig[iq][0][None, :]
        out.append(np.asarray(blocks[iq]) * np.exp(-1j * delta * t))
    return tuple(out)


def kick_state(gs: GroundState, profile: PeriodicFunction, amplitude: float,
               nbands=None, linear: bool = False):
    """State right after an impulsive potential amplitude * delta(t) * profile.

    The kick applies exp(-i amplitude W): exactly,
    Q(0+) = e^{-iaW} gamma e^{iaW} - gamma; to first order, -i a [W, gamma].
    Lattice-periodic profiles only (the exponential mixes offsets otherwise).
    """
    nb = _resolve_nbands(gs, nbands)
    eig = _eigendata(gs, nb)
    pairs = _pair_tables(gs, (0, 0, 0))
    if not profile.is_real(1e-10):
        raise ValueError("kick profile must be a real potential")
    wmats = _coupling_matrices(gs, profile, eig, pairs)
    occ = np.zeros(nb)
    occ[: gs.nocc] = 1.0
    gamma = np.diag(occ)
    out = []
    for w in wmats:
        if linear:
            out.append(-1j * amplitude * (w @ gamma - gamma @ w))
        else:
            evals, u = np.linalg.eigh(amplitude * w)
            phase = u * np.exp(-1j * evals)[None, :] @ u.conj().T
            out.append(phase @ gamma @ phase.conj().T - gamma)
    return tuple(out)


def _emit(step, blocks, pairs, ptens, nq, trace0, norms, density):
    tr = 0.0
    nrm = 0.0
    acc = np.zeros(density.shape[1], dtype=complex)
    for iq, (iq2, _) in enumerate(pairs):
        b = blocks[iq]
        if iq2 == iq:
            tr += np.trace(b).real
        nrm += float(np.vdot(b, b).real)
        acc += np.einsum("ab,gab->g", b, ptens[iq], optimize=True)
    trace0[step] = tr / nq
    norms[step] = np.sqrt(nrm)
    density[step] = acc / nq


def q1v_time(gs: GroundState, drive: DrivenPotential, tgrid: TimeGrid,
             nbands=None) -> ResponseTrajectory:
    """First-order response to a driven potential.

    Q1(t) = -i int_0^t U0(t-s) [v(s), gamma] U0(t-s)* ds; in the eigenbasis
    each block reduces to the commutator element times the scalar integral
    I_ab(t) = int_0^t f(s) exp(-i Delta_ab (t-s)) ds, advanced one step at a
    time with the free phase as integrating factor and composite Simpson on
    each step (envelope midpoints are known analytically).  The delta kick
    uses its closed form I_ab(t) = amplitude * exp(-i Delta_ab t).
    """
    _require_insulating(gs)
    nb = _resolve_nbands(gs, nbands)
    eig = _eigendata(gs, nb)
    pairs = _pair_tables(gs, drive.q_offset)
    _guard_step(tgrid.dt, _max_transition(gs, eig, pairs))
    ptens = _density_tensors(gs, eig, pairs)
    wmats = _coupling_matrices(gs, drive.profile, eig, pairs)
    occ = np.zeros(nb)
    occ[: gs.nocc] = 1.0
    nq = gs.qgrid.size
    nt = tgrid.nsteps + 1
    times = tgrid.times
    dt = tgrid.dt

    deltas, commutators = [], []
    for iq, (iq2, _) in enumerate(pairs):
        delta = eig[iq2][0][:, None] - eig[iq][0][None, :]
        deltas.append(delta)
        commutators.append(wmats[iq] * (occ[None, :] - occ[:, None]))

    trace0 = np.zeros(nt)
    norms = np.zeros(nt)
    density = np.zeros((nt, gs.basis.size), dtype=complex)
    integrals = [np.zeros_like(c) for c in commutators]
    kick = drive.envelope == "delta-kick"
    if kick:
        for iq in range(len(pairs)):
            integrals[iq] = drive.amplitude * np.exp(-1j * deltas[iq] * times[0])
    blocks = tuple(-1j * commutators[iq] * integrals[iq] for iq in range(len(pairs)))
    _emit(0, blocks, pairs, ptens, nq, trace0, norms, density)
    for k in range(1, nt):
        if kick:
            for iq in range(len(pairs)):
                integrals[iq] = drive.amplitude * np.exp(-1j * deltas[iq] * times[k])
        else:
            f0 = float(drive.envelope_at(times[k - 1]))
            fm = float(drive.envelope_at(times[k - 1] + 0.5 * dt))
            f1 = float(drive.envelope_at(times[k]))
            for iq in range(len(pairs)):
                full = np.exp(-1j * deltas[iq] * dt)
                half = np.exp(-1j * deltas[iq] * (0.5 * dt))
                integrals[iq] = full * integrals[iq] + (dt / 6.0) * (
                    f0 * full + 4.0 * fm * half + f1
                )
        blocks = tuple(-1j * commutators[iq] * integrals[iq] for iq in range(len(pairs)))
        _emit(k, blocks, pairs, ptens, nq, trace0, norms, density)
    return ResponseTrajectory(
        times=times, trace0=trace0, block_norms=norms, density=density,
        final_blocks=blocks, jpert=tuple(int(j) for j in drive.q_offset), nbands=nb,
    )


def qnv_time(gs: GroundState, drive: DrivenPotential, tgrid: TimeGrid,
             nmax: int, nbands=None) -> dict:
    """Iterated response orders Q_n(t), n = 1..nmax, lattice-periodic drives.

    Recursion Q_n(t) = -i int_0^t U0(t-s) [v(s), Q_{n-1}(s)] U0(t-s)* ds,
    advanced per step with the free-phase integrating factor and trapezoid
    quadrature (the integrand needs Q_{n-1} at sample points only).  A delta
    kick instead seeds each order with its closed form
    (-i a)^n / n! ad_W^n(gamma) and evolves by free phases.  Emits
    SeriesDivergenceWarning when an order fails to decrease in norm.
    """
    _require_insulating(gs)
    if tuple(int(j) for j in drive.q_offset) != (0, 0, 0):
        raise ValueError("iterated orders are implemented for lattice-periodic drives")
    if not 1 <= nmax <= 4:
        raise ValueError(f"nmax must be in 1..4, got {nmax}")
    nb = _resolve_nbands(gs, nbands)
    eig = _eigendata(gs, nb)
    pairs = _pair_tables(gs, (0, 0, 0))
    _guard_step(tgrid.dt, _max_transition(gs, eig, pairs))
    ptens = _density_tensors(gs, eig, pairs)
    wmats = _coupling_matrices(gs, drive.profile, eig, pairs)
    occ = np.zeros(nb)
    occ[: gs.nocc] = 1.0
    gamma = np.diag(occ).astype(complex)
    nq = gs.qgrid.size
    nfib = len(pairs)
    nt = tgrid.nsteps + 1
    times = tgrid.times
    dt = tgrid.dt
    deltas = [eig[iq][0][:, None] - eig[iq][0][None, :] for iq in range(nfib)]
    full_phase = [np.exp(-1j * d * dt) for d in deltas]

    if drive.envelope == "delta-kick":
        out = {}
        seeds = [gamma.copy() for _ in range(nfib)]
        scale = 1.0
        for n in range(1, nmax + 1):
            scale *= drive.amplitude / n
            seeds = [w @ s - s @ w for w, s in zip(wmats, seeds)]
            trace0 = np.zeros(nt)
            norms = np.zeros(nt)
            density = np.zeros((nt, gs.basis.size), dtype=complex)
            blocks = None
            for k in range(nt):
                blocks = tuple(
                    ((-1j) ** n * scale) * seeds[iq] * np.exp(-1j * deltas[iq] * times[k])
                    for iq in range(nfib)
                )
                _emit(k, blocks, pairs, ptens, nq, trace0, norms, density)
            out[n] = ResponseTrajectory(
                times=times, trace0=trace0, block_norms=norms, density=density,
                final_blocks=blocks, jpert=(0, 0, 0), nbands=nb,
            )
        _warn_on_growth(out)
        return out

    env = np.array([float(drive.envelope_at(t)) for t in times])
    prev = [[gamma.copy() for _ in range(nfib)] for _ in range(nt)]
    out = {}
    for n in range(1, nmax + 1):
        trace0 = np.zeros(nt)
        norms = np.zeros(nt)
        density = np.zeros((nt, gs.basis.size), dtype=complex)
        integrals = [np.zeros((nb, nb), dtype=complex) for _ in range(nfib)]
        cur = [None] * nt

        def commutator(step, iq):
            q = prev[step][iq]
            return -1j * env[step] * (wmats[iq] @ q - q @ wmats[iq])

        cur[0] = [np.zeros((nb, nb), dtype=complex) for _ in range(nfib)]
        _emit(0, cur[0], pairs, ptens, nq, trace0, norms, density)
        g_prev = [commutator(0, iq) for iq in range(nfib)]
        for k in range(1, nt):
            g_here = [commutator(k, iq) for iq in range(nfib)]
            step_blocks = []
            for iq in range(nfib):
                integrals[iq] = full_phase[iq] * integrals[iq] + (dt / 2.0) * (
                    g_prev[iq] * full_phase[iq] + g_here[iq]
                )
                step_blocks.append(integrals[iq].copy())
            cur[k] = step_blocks
            g_prev = g_here
            _emit(k, step_blocks, pairs, ptens, nq, trace0, norms, density)
        out[n] = ResponseTrajectory(
            times=times, trace0=trace0, block_norms=norms, density=density,
            final_blocks=tuple(cur[nt - 1]), jpert=(0, 0, 0), nbands=nb,
        )
        prev = cur
    _warn_on_growth(out)
    return out


def _warn_on_growth(orders: dict) -> None:
    ns = sorted(orders)
    for lo, hi in zip(ns, ns[1:]):
        a = orders[lo].block_norms
        b = orders[hi].block_norms
        mask = a > 0.0
        if np.any(b[mask] >= a[mask]):
            warnings.warn(
                f"order {hi} response norm is not below order {lo}; "
                "the expansion may sit outside its convergence window",
                SeriesDivergenceWarning,
                stacklevel=3,
            )
            return


def propagate_hartree(
    gs: GroundState,
    q0_blocks,
    tgrid: TimeGrid,
    drive: DrivenPotential | None = None,
    nbands=None,
    coulomb: bool = True,
    corrector_tol: float = 1e-12,
    max_corrector: int = 60,
) -> ResponseTrajectory:
    """Nonlinear Hartree propagation of a density-matrix correction.

    Integrates i dQ/dt = [H0 + v_ext(t) + v_c(rho_Q), gamma + Q] per fiber by
    implicit midpoint with a fixed-point corrector; the induced Coulomb term
    is rebuilt from the midpoint density on every corrector pass.  The
    commutator structure conserves the zone-averaged trace exactly, and the
    initial state must satisfy the Pauli bounds 0 <= gamma + Q0 <= 1.
    """
    _require_insulating(gs)
    if drive is not None:
        if tuple(int(j) for j in drive.q_offset) != (0, 0, 0):
            raise ValueError("nonlinear propagation takes lattice-periodic drives")
        if drive.envelope == "delta-kick":
            raise ValueError("fold delta kicks into the initial state via kick_state")
    nb = _resolve_nbands(gs, nbands)
    eig = _eigendata(gs, nb)
    pairs = _pair_tables(gs, (0, 0, 0))
    _guard_step(tgrid.dt, _max_transition(gs, eig, pairs))
    ptens = _density_tensors(gs, eig, pairs)
    wmats_drive = (
        _coupling_matrices(gs, drive.profile, eig, pairs) if drive is not None else None
    )
    occ = np.zeros(nb)
    occ[: gs.nocc] = 1.0
    gamma = np.diag(occ).astype(complex)
    nq = gs.qgrid.size
    nfib = len(pairs)
    nt = tgrid.nsteps + 1
    dt = tgrid.dt
    times = tgrid.times
    deltas = [eig[iq][0][:, None] - eig[iq][0][None, :] for iq in range(nfib)]

    blocks = [np.array(q0_blocks[iq], dtype=complex, copy=True) for iq in range(nfib)]
    for iq in range(nfib):
        lo = np.linalg.eigvalsh(gamma + blocks[iq])
        if lo.min() < -_PAULI_TOL or lo.max() > 1.0 + _PAULI_TOL:
            raise ValueError(
                f"initial state violates the Pauli bounds at fiber {iq}: "
                f"occupations in [{lo.min():.3e}, {lo.max():.3e}]"
            )

    def density_of(state):
        acc = np.zeros(gs.basis.size, dtype=complex)
        for iq in range(nfib):
            acc += np.einsum("ab,gab->g", state[iq], ptens[iq], optimize=True)
        return acc / nq

    def coulomb_matrices(state):
        rho = PeriodicFunction(basis=gs.basis, coeffs=density_of(state))
        v = poisson_solve(rho, neutralize=True)
        return [
            np.einsum("g,gab->ab", v.coeffs, np.conj(ptens[iq]), optimize=True)
            for iq in range(nfib)
        ]

    def rhs(state, t):
        vmats = coulomb_matrices(state) if coulomb else None
        f = float(drive.envelope_at(t)) if drive is not None else 0.0
        out = []
        for iq in range(nfib):
            g = deltas[iq] * state[iq]
            v = None
            if vmats is not None:
                v = vmats[iq]
            if drive is not None:
                v = f * wmats_drive[iq] if v is None else v + f * wmats_drive[iq]
            if v is not None:
                gq = gamma + state[iq]
                g = g + v @ gq - gq @ v
            out.append(-1j * g)
        return out

    trace0 = np.zeros(nt)
    norms = np.zeros(nt)
    density = np.zeros((nt, gs.basis.size), dtype=complex)
    _emit(0, blocks, pairs, ptens, nq, trace0, norms, density)
    for k in range(1, nt):
        t_mid = times[k - 1] + 0.5 * dt
        mid = [b.copy() for b in blocks]
        for _ in range(max_corrector):
            f_mid = rhs(mid, t_mid)
            new_mid = [blocks[iq] + 0.5 * dt * f_mid[iq] for iq in range(nfib)]
            err = max(
                float(np.max(np.abs(new_mid[iq] - mid[iq]))) for iq in range(nfib)
            )
            mid = new_mid
            if err < corrector_tol:
                break
        else:
            raise CorrectorNotConverged(
                f"fixed-point corrector stalled at step {k} (residual {err:.3e})"
            )
        blocks = [2.0 * mid[iq] - blocks[iq] for iq in range(nfib)]
        _emit(k, blocks, pairs, ptens, nq, trace0, norms, density)
    return ResponseTrajectory(
        times=times, trace0=trace0, block_norms=norms, density=density,
        final_blocks=tuple(blocks), jpert=(0, 0, 0), nbands=nb,
    )


def chi0_omega(gs: GroundState, qvec, ecut_chi: float, omegas, eta: float) -> tuple:
    """Frequency-dependent polarization matrices at Bloch vector q.

    Closed-form Fourier transform of the causal linear kernel: the two
    transition families of the static matrix with denominators carried to
    omega + i eta.  Returns (mode indices, list of matrices per omega).
    """
    if eta <= 0.0:
        raise ValueError("broadening eta must be positive")
    sel = None
    mats = []
    for w in np.asarray(omegas, dtype=float):
        sel, chi = chi0_matrix(gs, qvec, ecut_chi, omega=float(w), eta=eta)
        mats.append(chi)
    return sel, mats


def epsilonM_omega(gs: GroundState, ecut_chi: float, omegas, eta: float) -> list:
    """Frequency sweep of the macroscopic permittivity tensor.

    Reuses the static head/wings/body assembly with omega-dependent
    denominators and a Schur complement per frequency.  A singular body at
    one frequency is reported in its entry without aborting the sweep.
    """
    if eta <= 0.0:
        raise ValueError("broadening eta must be positive")
    rows = []
    for w in np.asarray(omegas, dtype=float):
        try:
            res = macroscopic_epsilon(gs, ecut_chi, omega=float(w), eta=eta)
            rows.append({"omega": float(w), "eta": eta, "eps": res.eps_m, "error": None})
        except SingularBody as exc:
            rows.append({"omega": float(w), "eta": eta, "eps": None, "error": str(exc)})
    return rows
