"""Result serialization: ground-state checkpoint, delimited tables, JSON
artifacts, and the run manifest.

All JSON is emitted with sorted keys and no timestamps so identical runs
produce bit-identical files; every writer goes through an atomic
replace so an interrupted run never leaves a truncated artifact.  The
checkpoint stores the converged density and effective potential but no
eigenvectors; loading re-diagonalizes the Bloch fibers from the stored
potential, which reproduces the original spectral data exactly.
"""

import csv
import hashlib
import json
import os

import numpy as np

from .bloch import band_structure
from .lattice import PeriodicFunction, build_basis, build_lattice, build_qgrid, gaussian_density
from .scf import GroundState


def _atomic_write(path: str, data: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_json(path: str, obj) -> None:
    _atomic_write(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _complex_pairs(arr: np.ndarray):
    return [[float(c.real), float(c.imag)] for c in arr]


def _pairs_complex(pairs) -> np.ndarray:
    out = np.array([complex(re, im) for re, im in pairs])
    return out


def save_ground_state(gs: GroundState, path: str, scf_hash: str = "") -> None:
    obj = {
        "schema": "pwhartree-ground-state-1",
        "scf_hash": scf_hash,
        "lattice": [[float(x) for x in row] for row in gs.basis.lattice.vectors],
        "ecut": float(gs.basis.ecut),
        "qgrid": [int(n) for n in gs.qgrid.dims],
        "sites": [[*(float(x) for x in c), float(z), float(w)] for c, z, w in gs.sites],
        "nocc": int(gs.nocc),
        "nbands": int(gs.nbands),
        "gap": float(gs.gap),
        "fermi": float(gs.fermi),
        "residual": float(gs.residual),
        "niter": int(gs.niter),
        "residual_history": [float(r) for r in gs.residual_history],
        "energy_history": [float(e) for e in gs.energy_history],
        "energy_kinetic": float(gs.energy_kinetic),
        "energy_coulomb": float(gs.energy_coulomb),
        "rho0": _complex_pairs(gs.rho0.coeffs),
        "v0": _complex_pairs(gs.v0.coeffs),
    }
    write_json(path, obj)


def load_ground_state(path: str, workers: int = 1) -> GroundState:
    """Rebuild a GroundState from its checkpoint.

    Bands are re-diagonalized from the stored effective potential, so the
    loaded state carries full eigenvector data identical to the original.
    """
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("schema") != "pwhartree-ground-state-1":
        raise ValueError(f"{path} is not a ground-state checkpoint")
    lattice = build_lattice(*np.array(obj["lattice"]))
    basis = build_basis(lattice, float(obj["ecut"]))
    qgrid = build_qgrid(lattice, tuple(obj["qgrid"]))
    sites = tuple(((s[0], s[1], s[2]), s[3], s[4]) for s in obj["sites"])
    for key in ("rho0", "v0"):
        if len(obj[key]) != basis.size:
            raise ValueError(f"{path}: {key} has {len(obj[key])} coefficients, basis has {basis.size}")
    rho0 = PeriodicFunction(basis=basis, coeffs=_pairs_complex(obj["rho0"]))
    v0 = PeriodicFunction(basis=basis, coeffs=_pairs_complex(obj["v0"]))
    bands = band_structure(basis, v0, qgrid, int(obj["nbands"]), workers=workers)
    return GroundState(
        basis=basis,
        qgrid=qgrid,
        sites=sites,
        nocc=int(obj["nocc"]),
        nbands=int(obj["nbands"]),
        rho_nuc=gaussian_density(basis, sites),
        rho0=rho0,
        v0=v0,
        bands=bands,
        gap=float(obj["gap"]),
        fermi=float(obj["fermi"]),
        residual=float(obj["residual"]),
        niter=int(obj["niter"]),
        residual_history=tuple(obj["residual_history"]),
        energy_history=tuple(obj["energy_history"]),
        energy_kinetic=float(obj["energy_kinetic"]),
        energy_coulomb=float(obj["energy_coulomb"]),
    )


def checkpoint_hash(path: str) -> str:
    """scf_hash recorded in a checkpoint, or '' if unreadable."""
    try:
        with open(path) as fh:
            return str(json.load(fh).get("scf_hash", ""))
    except (OSError, ValueError):
        return ""


def write_bands_csv(gs: GroundState, path: str) -> None:
    lines = ["iq,qx,qy,qz,band,energy"]
    for iq, fiber in enumerate(gs.bands.fibers):
        q = [repr(float(x)) for x in gs.qgrid.points[iq]]
        for n, e in enumerate(fiber.energies):
            lines.append(f"{iq},{q[0]},{q[1]},{q[2]},{n},{float(e)!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


def write_screening_csv(screening, rescaled_rows, path: str) -> None:
    """Rows: charge measurements per (eta, axis), their extrapolation, and
    the rescaled-potential cross-check."""
    lines = ["kind,eta,axis,measured,reference"]
    for eta, axis, measured, target in screening.charge_rows:
        lines.append(f"charge,{float(eta)!r},{axis},{float(measured)!r},{float(target)!r}")
    for eta, axis, measured, predicted in rescaled_rows:
        lines.append(f"rescaled,{float(eta)!r},{axis},{float(measured)!r},{float(predicted)!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


def write_epsm_omega_json(rows, path: str) -> None:
    out = []
    for row in rows:
        eps = row["eps"]
        out.append({
            "omega": float(row["omega"]),
            "eta": float(row["eta"]),
            "tensor_re": None if eps is None else [[float(x) for x in r] for r in np.real(eps)],
            "tensor_im": None if eps is None else [[float(x) for x in r] for r in np.imag(eps)],
            "error": row["error"],
        })
    write_json(path, out)


def write_trajectory_csv(traj, basis, path: str, nmodes: int = 6) -> None:
    """t, zone trace, global norm, then the first few density coefficients
    (basis order, zero mode skipped for lattice-periodic runs)."""
    start = 1 if tuple(traj.jpert) == (0, 0, 0) else 0
    sel = list(range(start, min(start + nmodes, basis.size)))
    head = ["t", "trace0", "norm"]
    for g in sel:
        m = basis.mtriples[g]
        tag = f"{m[0]}_{m[1]}_{m[2]}"
        head += [f"re_{tag}", f"im_{tag}"]
    lines = [",".join(head)]
    for k, t in enumerate(traj.times):
        row = [repr(float(t)), repr(float(traj.trace0[k])), repr(float(traj.block_norms[k]))]
        for g in sel:
            c = traj.density[k, g]
            row += [repr(float(c.real)), repr(float(c.imag))]
        lines.append(",".join(row))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_csv_rows(path: str) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def file_inventory(outdir: str, names) -> list:
    inv = []
    for name in sorted(names):
        full = os.path.join(outdir, name)
        h = hashlib.sha256()
        with open(full, "rb") as fh:
            for chunk in iter(lambda: fh.read(65536), b""):
                h.update(chunk)
        inv.append({"name": name, "bytes": os.path.getsize(full), "sha256": h.hexdigest()})
    return inv


def write_manifest(outdir: str, command: str, config_hash: str, scf_hash: str,
                   version: str, stages, warnings_list, files, extra=None) -> None:
    """Completion marker; always the last file written."""
    obj = {
        "schema": "pwhartree-manifest-1",
        "command": command,
        "config_hash": config_hash,
        "scf_hash": scf_hash,
        "version": version,
        "stages": [{"name": n, "seconds": float(s)} for n, s in stages],
        "warnings": list(warnings_list),
        "files": file_inventory(outdir, files),
    }
    if extra:
        obj.update(extra)
    write_json(os.path.join(outdir, "manifest.json"), obj)
