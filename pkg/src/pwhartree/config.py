"""Run configuration: INI parsing with full cross-field validation.

Every problem in the file is collected and reported in one pass; nothing is
computed from a configuration that has not validated.  The SCF-relevant
subset of fields is hashed separately so response and dynamics stages can
reuse a ground-state checkpoint produced under identical physics.
"""

import configparser
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid

_SECTIONS = {
    "lattice": {"cubic", "a1", "a2", "a3"},
    "nuclei": {"z"},
    "basis": {"ecut", "ecut_chi", "qgrid"},
    "scf": {"mixing", "tol_density", "max_iter", "nbands_extra"},
    "response": {"n_quad", "eta_list", "omega_grid", "broadening"},
    "defect": {"force"},
    "dynamics": {
        "envelope", "amplitude", "omega", "center", "width",
        "dt", "nsteps", "nbands", "coulomb",
    },
    "output": {"directory"},
}
_SITE_SECTIONS = ("nuclei", "defect", "dynamics")
_ENVELOPES = ("delta-kick", "monochromatic", "gaussian-pulse")


@dataclass(frozen=True)
class DynamicsSpec:
    envelope: str
    amplitude: float
    dt: float
    nsteps: int
    omega: float = 0.0
    center: float = 0.0
    width: float = 1.0
    nbands: int = 0  # 0 means all stored bands
    coulomb: bool = True
    sites: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    lattice: np.ndarray  # rows a1, a2, a3
    sites: tuple  # ((center, charge, width), ...)
    ztot: float
    ecut: float
    ecut_chi: float
    qgrid: tuple
    mixing: float
    tol_density: float
    max_iter: int
    nbands_extra: int
    n_quad: int
    eta_list: tuple
    omega_grid: tuple
    broadening: float
    defect_sites: tuple
    defect_force: bool
    dynamics: DynamicsSpec | None
    outdir: str
    scf_hash: str = field(default="", compare=False)
    config_hash: str = field(default="", compare=False)


def _floats(text: str):
    return [float(tok) for tok in text.replace(",", " ").split()]


def _parse_site(text: str):
    vals = _floats(text)
    if len(vals) != 5:
        raise ValueError("expected 5 numbers: cx cy cz charge width")
    center = (vals[0], vals[1], vals[2])
    return (center, vals[3], vals[4])


def _collect_sites(cp, section, problems, require_positive_charge):
    sites = []
    if not cp.has_section(section):
        return tuple(sites)
    for key in cp.options(section):
        if not key.startswith("site"):
            continue
        path = f"{section}.{key}"
        try:
            center, charge, width = _parse_site(cp.get(section, key))
        except ValueError as exc:
            problems.append((path, str(exc)))
            continue
        if width <= 0.0:
            problems.append((path, f"width must be positive, got {width}"))
        if require_positive_charge and charge <= 0.0:
            problems.append((path, f"charge must be positive, got {charge}"))
        if not require_positive_charge and charge == 0.0:
            problems.append((path, "charge must be nonzero"))
        sites.append((center, charge, width))
    return tuple(sites)


def _get(cp, section, key, default, cast, problems, check=None):
    if not cp.has_section(section) or not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        val = cast(raw)
    except ValueError as exc:
        problems.append((f"{section}.{key}", f"cannot parse {raw!r}: {exc}"))
        return default
    if check is not None:
        msg = check(val)
        if msg:
            problems.append((f"{section}.{key}", msg))
    return val


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def validate_config(path: str) -> RunConfig:
    """Parse and validate an INI run configuration.

    Raises ConfigInvalid carrying every (field path, message) pair found.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    problems = []
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigInvalid([("file", str(exc))]) from None
    except configparser.Error as exc:
        raise ConfigInvalid([("file", f"INI syntax: {exc}")]) from None

    for section in cp.sections():
        if section not in _SECTIONS:
            problems.append((section, "unknown section"))
            continue
        allowed = _SECTIONS[section]
        for key in cp.options(section):
            if key in allowed:
                continue
            if section in _SITE_SECTIONS and key.startswith("site"):
                continue
            problems.append((f"{section}.{key}", "unknown key"))

    lattice = np.eye(3)
    if not cp.has_section("lattice"):
        problems.append(("lattice", "section is required"))
    else:
        has_cubic = cp.has_option("lattice", "cubic")
        has_vecs = [cp.has_option("lattice", k) for k in ("a1", "a2", "a3")]
        if has_cubic and any(has_vecs):
            problems.append(("lattice", "give either cubic or a1/a2/a3, not both"))
        elif has_cubic:
            a = _get(cp, "lattice", "cubic", 0.0, float, problems,
                     lambda v: None if v > 0.0 else f"cell edge must be positive, got {v}")
            lattice = a * np.eye(3)
        elif all(has_vecs):
            rows = []
            for k in ("a1", "a2", "a3"):
                try:
                    vals = _floats(cp.get("lattice", k))
                    if len(vals) != 3:
                        raise ValueError("expected 3 numbers")
                    rows.append(vals)
                except ValueError as exc:
                    problems.append((f"lattice.{k}", str(exc)))
                    rows.append([0.0, 0.0, 0.0])
            lattice = np.array(rows)
            if abs(np.linalg.det(lattice)) < 1e-12:
                problems.append(("lattice", "vectors are linearly dependent"))
        else:
            problems.append(("lattice", "give cubic or all of a1, a2, a3"))

    sites = _collect_sites(cp, "nuclei", problems, require_positive_charge=True)
    if not sites:
        problems.append(("nuclei", "at least one siteN entry is required"))
    zsum = sum(z for _, z, _ in sites)
    ztot = _get(cp, "nuclei", "z", zsum, float, problems)
    if sites and abs(ztot - zsum) > 1e-8:
        problems.append(
            ("nuclei.z", f"Z = {ztot} must equal the total nuclear charge {zsum} (neutral cell)")
        )
    if sites and abs(zsum - round(zsum)) > 1e-8:
        problems.append(("nuclei", f"total nuclear charge {zsum} must be an integer"))

    ecut = _get(cp, "basis", "ecut", 0.0, float, problems,
                lambda v: None if v > 0.0 else f"must be positive, got {v}")
    if not (cp.has_section("basis") and cp.has_option("basis", "ecut")):
        problems.append(("basis.ecut", "key is required"))
    ecut_chi = _get(cp, "basis", "ecut_chi", ecut, float, problems,
                    lambda v: None if v > 0.0 else f"must be positive, got {v}")
    if ecut > 0.0 and ecut_chi > ecut:
        problems.append(("basis.ecut_chi", f"ecut_chi = {ecut_chi} exceeds ecut = {ecut}"))
    qgrid = (3, 3, 3)
    if cp.has_option("basis", "qgrid") if cp.has_section("basis") else False:
        try:
            dims = [int(tok) for tok in cp.get("basis", "qgrid").replace(",", " ").split()]
            if len(dims) != 3 or any(d < 1 for d in dims):
                raise ValueError("expected 3 positive integers")
            qgrid = tuple(dims)
        except ValueError as exc:
            problems.append(("basis.qgrid", str(exc)))

    mixing = _get(cp, "scf", "mixing", 0.6, float, problems,
                  lambda v: None if 0.0 < v <= 1.0 else f"must lie in (0, 1], got {v}")
    tol_density = _get(cp, "scf", "tol_density", 1e-9, float, problems,
                       lambda v: None if v > 0.0 else f"must be positive, got {v}")
    max_iter = _get(cp, "scf", "max_iter", 200, int, problems,
                    lambda v: None if v >= 1 else f"must be at least 1, got {v}")
    nbands_extra = _get(cp, "scf", "nbands_extra", 8, int, problems,
                        lambda v: None if v >= 1 else f"must be at least 1, got {v}")

    n_quad = _get(cp, "response", "n_quad", 64, int, problems,
                  lambda v: None if v >= 4 else f"must be at least 4, got {v}")
    eta_list = (0.04, 0.02, 0.01)
    if cp.has_section("response") and cp.has_option("response", "eta_list"):
        try:
            vals = _floats(cp.get("response", "eta_list"))
            if not vals or any(v <= 0.0 for v in vals):
                raise ValueError("expected positive floats")
            eta_list = tuple(vals)
        except ValueError as exc:
            problems.append(("response.eta_list", str(exc)))
    omega_grid = ()
    if cp.has_section("response") and cp.has_option("response", "omega_grid"):
        try:
            omega_grid = tuple(_floats(cp.get("response", "omega_grid")))
        except ValueError as exc:
            problems.append(("response.omega_grid", str(exc)))
    broadening = _get(cp, "response", "broadening", 1e-3, float, problems,
                      lambda v: None if v > 0.0 else f"must be positive, got {v}")

    defect_sites = _collect_sites(cp, "defect", problems, require_positive_charge=False)
    defect_force = _get(cp, "defect", "force", False, _bool, problems)

    dynamics = None
    if cp.has_section("dynamics"):
        envelope = _get(cp, "dynamics", "envelope", "", str, problems,
                        lambda v: None if v in _ENVELOPES else f"pick from {_ENVELOPES}")
        if not cp.has_option("dynamics", "envelope"):
            problems.append(("dynamics.envelope", "key is required"))
        amplitude = _get(cp, "dynamics", "amplitude", 0.0, float, problems,
                         lambda v: None if np.isfinite(v) and v != 0.0 else "must be finite and nonzero")
        if not cp.has_option("dynamics", "amplitude"):
            problems.append(("dynamics.amplitude", "key is required"))
        dt = _get(cp, "dynamics", "dt", 0.0, float, problems,
                  lambda v: None if v > 0.0 else f"must be positive, got {v}")
        if not cp.has_option("dynamics", "dt"):
            problems.append(("dynamics.dt", "key is required"))
        nsteps = _get(cp, "dynamics", "nsteps", 0, int, problems,
                      lambda v: None if v >= 1 else f"must be at least 1, got {v}")
        if not cp.has_option("dynamics", "nsteps"):
            problems.append(("dynamics.nsteps", "key is required"))
        omega = _get(cp, "dynamics", "omega", 0.0, float, problems)
        center = _get(cp, "dynamics", "center", 0.0, float, problems)
        width = _get(cp, "dynamics", "width", 1.0, float, problems,
                     lambda v: None if v > 0.0 else f"must be positive, got {v}")
        nbands = _get(cp, "dynamics", "nbands", 0, int, problems,
                      lambda v: None if v >= 0 else f"must be nonnegative, got {v}")
        coulomb = _get(cp, "dynamics", "coulomb", True, _bool, problems)
        dyn_sites = _collect_sites(cp, "dynamics", problems, require_positive_charge=False)
        if not dyn_sites:
            problems.append(("dynamics", "at least one siteN drive charge is required"))
        dynamics = DynamicsSpec(
            envelope=envelope, amplitude=amplitude, dt=dt, nsteps=nsteps,
            omega=omega, center=center, width=width, nbands=nbands,
            coulomb=coulomb, sites=dyn_sites,
        )

    outdir = _get(cp, "output", "directory", "pwh_out", str, problems,
                  lambda v: None if v.strip() else "must be a nonempty path")

    if problems:
        raise ConfigInvalid(problems)

    scf_part = {
        "lattice": [[float(x) for x in row] for row in lattice],
        "sites": [[*c, z, w] for c, z, w in sites],
        "ztot": float(ztot),
        "ecut": float(ecut),
        "qgrid": list(qgrid),
        "mixing": float(mixing),
        "tol_density": float(tol_density),
        "max_iter": int(max_iter),
        "nbands_extra": int(nbands_extra),
    }
    full_part = dict(scf_part)
    full_part.update({
        "ecut_chi": float(ecut_chi),
        "n_quad": int(n_quad),
        "eta_list": list(eta_list),
        "omega_grid": list(omega_grid),
        "broadening": float(broadening),
        "defect_sites": [[*c, z, w] for c, z, w in defect_sites],
        "defect_force": bool(defect_force),
        "dynamics": None if dynamics is None else {
            "envelope": dynamics.envelope, "amplitude": dynamics.amplitude,
            "dt": dynamics.dt, "nsteps": dynamics.nsteps, "omega": dynamics.omega,
            "center": dynamics.center, "width": dynamics.width,
            "nbands": dynamics.nbands, "coulomb": dynamics.coulomb,
            "sites": [[*c, z, w] for c, z, w in dynamics.sites],
        },
    })

    def digest(obj):
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()

    return RunConfig(
        lattice=lattice, sites=sites, ztot=float(ztot), ecut=float(ecut),
        ecut_chi=float(ecut_chi), qgrid=qgrid, mixing=float(mixing),
        tol_density=float(tol_density), max_iter=int(max_iter),
        nbands_extra=int(nbands_extra), n_quad=int(n_quad), eta_list=eta_list,
        omega_grid=omega_grid, broadening=float(broadening),
        defect_sites=defect_sites, defect_force=bool(defect_force),
        dynamics=dynamics, outdir=str(outdir),
        scf_hash=digest(scf_part), config_hash=digest(full_part),
    )
