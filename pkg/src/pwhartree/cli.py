"""Batch front door: command dispatch, checkpointing, and result emission.

Physics parameters live in the INI configuration; flags cover only paths,
verbosity, parallelism, and figure rendering.  Every command ensures a
ground-state checkpoint (reusing one whose SCF hash matches), emits its
data files, optionally renders figures next to them, and writes the
manifest last as the completion marker.
"""

import argparse
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from .config import RunConfig, validate_config
from .errors import (
    ConfigInvalid,
    CorrectorNotConverged,
    NotAnInsulator,
    PwhError,
    ScfNotConverged,
    StepTooCoarse,
)
from .lattice import build_basis, build_lattice, build_qgrid
from .scf import ScfParams, scf_solve
from .response import (
    defect_screening,
    macroscopic_epsilon,
    rescaled_potential_limit,
)
from .dynamics import TimeGrid, charge_drive, epsilonM_omega, kick_state, propagate_hartree
from . import io

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCF = 3
EXIT_INSULATOR = 4
EXIT_RESPONSE = 5
EXIT_DYNAMICS = 6

_CHECKPOINT = "ground_state.json"


class _Run:
    """Shared per-command state: timing, warnings, emitted files, stdout."""

    def __init__(self, cfg: RunConfig, args):
        self.cfg = cfg
        self.args = args
        self.stages = []
        self.files = []
        self.caught = []  # live list from warnings.catch_warnings(record=True)
        self.reused = False
        self.scf_iterations = 0
        os.makedirs(cfg.outdir, exist_ok=True)

    def say(self, text: str) -> None:
        if not self.args.quiet:
            print(text)

    def path(self, name: str) -> str:
        return os.path.join(self.cfg.outdir, name)

    def emit(self, name: str) -> None:
        self.files.append(name)

    def stage(self, name: str):
        return _Stage(self, name)

    def finish(self, command: str, extra=None) -> None:
        payload = {"checkpoint_reused": self.reused, "scf_iterations": self.scf_iterations}
        if extra:
            payload.update(extra)
        io.write_manifest(
            self.cfg.outdir, command, self.cfg.config_hash, self.cfg.scf_hash,
            __version__, self.stages, [str(w.message) for w in self.caught],
            self.files, extra=payload,
        )


class _Stage:
    def __init__(self, run: _Run, name: str):
        self.run = run
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.run.stages.append((self.name, time.perf_counter() - self.t0))
        return False


def ensure_ground_state(run: _Run):
    cfg, args = run.cfg, run.args
    ckpt = run.path(_CHECKPOINT)
    with run.stage("scf"):
        if os.path.exists(ckpt) and io.checkpoint_hash(ckpt) == cfg.scf_hash:
            gs = io.load_ground_state(ckpt, workers=args.workers)
            run.reused = True
            run.scf_iterations = 0
            run.say(f"scf: checkpoint reused, 0 iterations (gap {gs.gap:.6f} Ha)")
        else:
            lattice = build_lattice(*cfg.lattice)
            basis = build_basis(lattice, cfg.ecut)
            qgrid = build_qgrid(lattice, cfg.qgrid)
            params = ScfParams(
                mixing=cfg.mixing, tol_density=cfg.tol_density, max_iter=cfg.max_iter,
                nbands_extra=cfg.nbands_extra, workers=args.workers,
            )
            gs = scf_solve(basis, qgrid, cfg.sites, params)
            run.scf_iterations = gs.niter
            run.say(
                f"scf: converged in {gs.niter} iterations, residual {gs.residual:.3e}, "
                f"gap {gs.gap:.6f} Ha, energy {gs.energy_total:.8f} Ha"
            )
            io.save_ground_state(gs, ckpt, scf_hash=cfg.scf_hash)
        run.emit(_CHECKPOINT)
    return gs


def cmd_scf(run: _Run) -> None:
    gs = ensure_ground_state(run)
    if not run.args.no_figures:
        from . import plots
        with run.stage("figures"):
            plots.fig_scf_convergence(gs, run.path("scf_convergence.png"))
            run.emit("scf_convergence.png")
    run.finish("scf")


def cmd_bands(run: _Run) -> None:
    gs = ensure_ground_state(run)
    with run.stage("bands"):
        io.write_bands_csv(gs, run.path("bands.csv"))
        run.emit("bands.csv")
        run.say(f"bands: {gs.qgrid.size} fibers x {gs.nbands} bands -> bands.csv")
    if not run.args.no_figures:
        from . import plots
        with run.stage("figures"):
            plots.fig_bands(gs, run.path("bands.png"))
            run.emit("bands.png")
    run.finish("bands")


def cmd_dielectric(run: _Run) -> None:
    cfg = run.cfg
    gs = ensure_ground_state(run)
    with run.stage("dielectric"):
        result = macroscopic_epsilon(gs, cfg.ecut_chi)
        eps = result.eps_m
        eigs = np.linalg.eigvalsh(eps)
        top = np.linalg.eigvalsh(np.eye(3) + result.l_tensor - eps)
        bounds_ok = bool(eigs.min() >= 1.0 - 1e-8 and top.min() >= -1e-8)
        aniso = float((eigs.max() - eigs.min()) / np.mean(eigs))
        obj = {
            "schema": "pwhartree-dielectric-1",
            "ecut_chi": float(cfg.ecut_chi),
            "gap": float(gs.gap),
            "l_tensor": [[float(x) for x in row] for row in result.l_tensor],
            "l0": float(np.trace(result.l_tensor) / 3.0),
            "l_tail_share": float(result.l_tail_share),
            "eps_m": [[float(x) for x in row] for row in eps],
            "eps_eigenvalues": [float(x) for x in eigs],
            "anisotropy_rel": aniso,
            "bounds_ok": bounds_ok,
            "hermiticity_defect": float(result.hermiticity_defect),
        }
        io.write_json(run.path("dielectric.json"), obj)
        run.emit("dielectric.json")
        run.say(
            f"dielectric: L0 {obj['l0']:.6f}, eps_M trace/3 {np.mean(eigs):.6f}, "
            f"anisotropy {aniso:.2e}, bounds_ok {bounds_ok}"
        )
    if not run.args.no_figures:
        from . import plots
        with run.stage("figures"):
            plots.fig_dielectric(result, run.path("dielectric.png"))
            run.emit("dielectric.png")
    run.finish("dielectric")


def cmd_defect(run: _Run) -> None:
    cfg = run.cfg
    if not cfg.defect_sites:
        raise ConfigInvalid([("defect", "section with siteN entries is required for this command")])
    gs = ensure_ground_state(run)
    with run.stage("screening"):
        screening = defect_screening(
            gs, cfg.defect_sites, cfg.ecut_chi, eta_list=cfg.eta_list, force=cfg.defect_force
        )
        rescaled = rescaled_potential_limit(
            gs, cfg.defect_sites, cfg.ecut_chi, eta_list=cfg.eta_list
        )
        io.write_screening_csv(screening, rescaled, run.path("screening.csv"))
        run.emit("screening.csv")
        run.say(
            f"defect: total charge {screening.total_charge:.6f}, L0 {screening.l0:.6f}, "
            f"renormalized {screening.renormalized_charge:.6f} -> screening.csv"
        )
    if not run.args.no_figures:
        from . import plots
        with run.stage("figures"):
            plots.fig_screening(screening, run.path("screening.png"))
            run.emit("screening.png")
    run.finish("defect")


def cmd_dynamics(run: _Run) -> None:
    cfg = run.cfg
    dyn = cfg.dynamics
    if dyn is None:
        raise ConfigInvalid([("dynamics", "section is required for this command")])
    gs = ensure_ground_state(run)
    nbands = dyn.nbands if dyn.nbands > 0 else gs.nbands
    with run.stage("propagation"):
        drive = charge_drive(
            gs.basis, dyn.sites, dyn.envelope, dyn.amplitude,
            omega=dyn.omega, center=dyn.center, width=dyn.width,
        )
        tgrid = TimeGrid(dt=dyn.dt, nsteps=dyn.nsteps)
        if dyn.envelope == "delta-kick":
            q0 = kick_state(gs, drive.profile, dyn.amplitude, nbands=nbands)
            traj = propagate_hartree(gs, q0, tgrid, nbands=nbands, coulomb=dyn.coulomb)
        else:
            zeros = tuple(
                np.zeros((nbands, nbands), dtype=complex) for _ in range(gs.qgrid.size)
            )
            traj = propagate_hartree(
                gs, zeros, tgrid, drive=drive, nbands=nbands, coulomb=dyn.coulomb
            )
        drift = float(np.max(np.abs(traj.trace0 - traj.trace0[0])))
        io.write_trajectory_csv(traj, gs.basis, run.path("trajectory.csv"))
        run.emit("trajectory.csv")
        run.say(
            f"dynamics: {dyn.nsteps} steps of dt {dyn.dt}, trace drift {drift:.2e} "
            f"-> trajectory.csv"
        )
    rows = None
    if cfg.omega_grid:
        with run.stage("epsM_omega"):
            rows = epsilonM_omega(gs, cfg.ecut_chi, cfg.omega_grid, cfg.broadening)
            io.write_epsm_omega_json(rows, run.path("epsM_omega.json"))
            run.emit("epsM_omega.json")
            bad = sum(1 for r in rows if r["eps"] is None)
            run.say(
                f"dynamics: eps_M over {len(rows)} frequencies "
                f"({bad} singular) -> epsM_omega.json"
            )
    if not run.args.no_figures:
        from . import plots
        with run.stage("figures"):
            plots.fig_trajectory(traj, gs.basis, run.path("trajectory.png"))
            run.emit("trajectory.png")
            if rows is not None:
                plots.fig_epsm_omega(rows, run.path("epsM_omega.png"))
                run.emit("epsM_omega.png")
    run.finish("dynamics")


_COMMANDS = {
    "scf": cmd_scf,
    "bands": cmd_bands,
    "dielectric": cmd_dielectric,
    "defect": cmd_defect,
    "dynamics": cmd_dynamics,
}


def _classify(exc: Exception, command: str, stage: str) -> int:
    if isinstance(exc, ConfigInvalid):
        return EXIT_CONFIG
    if isinstance(exc, NotAnInsulator):
        return EXIT_INSULATOR
    if isinstance(exc, ScfNotConverged) or stage == "scf":
        return EXIT_SCF
    if isinstance(exc, (StepTooCoarse, CorrectorNotConverged)):
        return EXIT_DYNAMICS
    return EXIT_DYNAMICS if command == "dynamics" else EXIT_RESPONSE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pwhartree",
        description="Plane-wave Hartree crystal solver: SCF, bands, dielectric response, "
        "defect screening, and time propagation.",
    )
    parser.add_argument("--version", action="version", version=f"pwhartree {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("scf", "converge the periodic ground state and write the checkpoint"),
        ("bands", "emit per-fiber Bloch spectra"),
        ("dielectric", "static L tensor and macroscopic permittivity"),
        ("defect", "linearized defect screening and charge renormalization"),
        ("dynamics", "nonlinear time propagation and eps_M(omega)"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("config", help="INI configuration file")
        p.add_argument("--workers", type=int, default=1, help="parallel fiber workers")
        p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = validate_config(args.config)
    except ConfigInvalid as exc:
        for path, msg in exc.problems:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    run = _Run(cfg, args)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            run.caught = caught
            _COMMANDS[args.command](run)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        return EXIT_OK
    except ConfigInvalid as exc:
        for path, msg in exc.problems:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (PwhError, ValueError) as exc:
        stage = run.stages[-1][0] if run.stages else args.command
        print(f"stage {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _classify(exc, args.command, stage)


if __name__ == "__main__":
    sys.exit(main())
