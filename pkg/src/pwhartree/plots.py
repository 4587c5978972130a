"""Report figures rendered to files next to the delimited outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_scf_convergence(gs, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    it = np.arange(1, len(gs.residual_history) + 1)
    ax.semilogy(it, gs.residual_history, "o-", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("density residual (Coulomb norm)")
    ax.set_title(f"SCF convergence, gap {gs.gap:.4f} Ha")
    ax.grid(alpha=0.3)
    _save(fig, path)


def fig_bands(gs, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5.6, 3.6))
    energies = np.array([f.energies for f in gs.bands.fibers])
    idx = np.arange(energies.shape[0])
    for n in range(energies.shape[1]):
        color = "tab:blue" if n < gs.nocc else "tab:gray"
        ax.plot(idx, energies[:, n], ".-", lw=0.7, ms=3, color=color)
    ax.axhline(gs.fermi, color="tab:red", lw=0.8, ls="--", label="midgap level")
    ax.set_xlabel("grid fiber index")
    ax.set_ylabel("energy (Ha)")
    ax.set_title("Bloch fiber spectra")
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def fig_dielectric(result, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    eps_eigs = np.linalg.eigvalsh(result.eps_m)
    top_eigs = np.linalg.eigvalsh(np.eye(3) + result.l_tensor)
    x = np.arange(3)
    ax.bar(x - 0.2, eps_eigs, width=0.4, label="eps_M eigenvalues")
    ax.bar(x + 0.2, top_eigs, width=0.4, label="1 + L eigenvalues")
    ax.axhline(1.0, color="k", lw=0.8)
    ax.set_xticks(x, [f"axis {i}" for i in range(3)])
    ax.set_ylabel("eigenvalue")
    ax.set_title("Macroscopic permittivity bounds")
    ax.legend(fontsize=8)
    _save(fig, path)


def fig_screening(screening, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    rows = screening.charge_rows
    axes = sorted({axis for _, axis, _, _ in rows})
    for axis in axes:
        etas = [eta for eta, a, _, _ in rows if a == axis]
        vals = [m for _, a, m, _ in rows if a == axis]
        ax.plot(etas, vals, "o-", ms=4, label=f"axis {axis}")
    ax.axhline(screening.renormalized_charge, color="k", ls="--", lw=0.9,
               label="total/(1+L0)")
    ax.set_xlabel("small-wavevector parameter eta")
    ax.set_ylabel("measured screened charge")
    ax.set_title("Defect charge renormalization")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def fig_epsm_omega(rows, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5.4, 3.4))
    ok = [r for r in rows if r["eps"] is not None]
    w = [r["omega"] for r in ok]
    tr_re = [np.trace(np.real(r["eps"])) / 3.0 for r in ok]
    tr_im = [np.trace(np.imag(r["eps"])) / 3.0 for r in ok]
    ax.plot(w, tr_re, "o-", ms=3, label="Re tr/3")
    ax.plot(w, tr_im, "s-", ms=3, label="Im tr/3")
    ax.axhline(1.0, color="k", lw=0.8)
    ax.set_xlabel("omega (Ha)")
    ax.set_ylabel("eps_M(omega)")
    ax.set_title("Frequency-dependent permittivity")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def fig_trajectory(traj, basis, path: str) -> None:
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.6, 4.6), sharex=True)
    ax1.plot(traj.times, traj.block_norms, lw=1.0, label="global block norm")
    ax1.plot(traj.times, np.abs(traj.trace0), lw=1.0, label="|trace per cell|")
    ax1.set_ylabel("state size")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    start = 1 if tuple(traj.jpert) == (0, 0, 0) else 0
    for g in range(start, min(start + 3, basis.size)):
        m = basis.mtriples[g]
        ax2.plot(traj.times, np.abs(traj.density[:, g]), lw=0.9,
                 label=f"|c({m[0]},{m[1]},{m[2]})|")
    ax2.set_xlabel("t (a.u.)")
    ax2.set_ylabel("induced density")
    ax2.legend(fontsize=8)
    ax2.grid(alpha=0.3)
    _save(fig, path)
