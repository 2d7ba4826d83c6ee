"""Physical constants, species/grid/run configuration and derived kinematics.

All values held by the dataclasses in this module are SI.  The propagator works
in a nondimensional system built from the Bragg momentum transfer ``p_k`` and
the mass of species B (see :class:`Units`):

* length  ``1/k``              with ``k = p_k / hbar``
* time    ``m_B / (hbar k^2)``
* energy  ``hbar^2 k^2 / m_B``
* momentum ``hbar k = p_k``

Configuration files are INI-style with one section per concern; every key
carrying a physical quantity has its SI unit as a suffix (``mass_kg``,
``time_step_s``...).  See the README for the full key list.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
import hashlib
import math
import operator
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import constants as _sc

from .errors import ConfigError, SequencingError

HBAR = _sc.hbar
SPEED_OF_LIGHT = _sc.c
# CODATA 2018 atomic mass constant, pinned so derived numbers stay reproducible
# across scipy releases (newer scipy ships the 2022 value).
ATOMIC_MASS_UNIT = 1.66053906660e-27

MASS_HE3 = 3.0160293 * ATOMIC_MASS_UNIT
MASS_HE4 = 4.0026032 * ATOMIC_MASS_UNIT
# 2^3S_1 -> 2^3P_2 laser frequencies used for the Bragg lattices.
TRANSITION_FREQ_HE3 = 276.7322e12
TRANSITION_FREQ_HE4 = 276.6986e12

SPECIES_LABELS = ("A", "B")
STATE_PREP_MODES = ("idealized", "physical")
ENVELOPES = ("square", "gaussian")


# ---------------------------------------------------------------------------
# species
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpeciesParams:
    """One atomic species: label A is the fermion (3He*), label B the boson (4He*).

    ``rabi_frequency`` and ``pulse_duration`` describe the default square
    pi-pulse (theta = Omega * t).  ``intensity`` is bookkeeping only.
    """

    label: str
    mass: float
    transition_frequency: float
    rabi_frequency: float
    pulse_duration: float
    intensity: Optional[float] = None  # W/m^2, recorded as metadata

    def __post_init__(self):
        if self.label not in SPECIES_LABELS:
            raise ConfigError(f"species label must be A or B, got {self.label!r}", ["label"])
        bad = [name for name in ("mass", "transition_frequency", "rabi_frequency", "pulse_duration")
               if not (np.isfinite(getattr(self, name)) and getattr(self, name) > 0)]
        if bad:
            raise ConfigError(f"species {self.label}: non-positive or non-finite {', '.join(bad)}", bad)

    @property
    def isotope(self) -> str:
        return "3He*" if self.label == "A" else "4He*"

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.transition_frequency

    def lattice_momentum(self) -> float:
        """Momentum kick 2*hbar*(2*pi/lambda) of counter-propagating beams."""
        return 2.0 * HBAR * 2.0 * math.pi / self.wavelength


def helium3(rabi_frequency: float = math.pi / 50e-6, pulse_duration: float = 50e-6,
            intensity: Optional[float] = 100.0) -> SpeciesParams:
    """Species A defaults: pi pulse of 50 us at ~0.1 mW/mm^2 (= 100 W/m^2)."""
    return SpeciesParams("A", MASS_HE3, TRANSITION_FREQ_HE3, rabi_frequency, pulse_duration, intensity)


def helium4(rabi_frequency: float = math.pi / 66e-6, pulse_duration: float = 66e-6,
            intensity: Optional[float] = 100.0) -> SpeciesParams:
    """Species B defaults: pi pulse of 66 us."""
    return SpeciesParams("B", MASS_HE4, TRANSITION_FREQ_HE4, rabi_frequency, pulse_duration, intensity)


# ---------------------------------------------------------------------------
# grid and units
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid shared by all four coordinates (x3, z3, x4, z4)."""

    points_per_dim: int
    spatial_step: float
    time_step: float

    def __post_init__(self):
        n = self.points_per_dim
        if isinstance(n, bool) or int(n) != n:
            raise ConfigError("points_per_dim must be an integer", ["points_per_dim"])
        object.__setattr__(self, "points_per_dim", int(n))
        if n < 8 or n % 2 == 0:
            raise ConfigError(f"points_per_dim must be odd and >= 8, got {n}", ["points_per_dim"])
        if not (self.spatial_step > 0 and np.isfinite(self.spatial_step)):
            raise ConfigError("spatial_step must be positive", ["spatial_step_m"])
        if not (self.time_step > 0 and np.isfinite(self.time_step)):
            raise ConfigError("time_step must be positive", ["time_step_s"])

    @property
    def momentum_step(self) -> float:
        return 2.0 * math.pi * HBAR / (self.points_per_dim * self.spatial_step)

    @property
    def box_length(self) -> float:
        return self.points_per_dim * self.spatial_step

    @property
    def shape(self):
        return (self.points_per_dim,) * 4

    def positions(self) -> np.ndarray:
        """Centred coordinates; index N//2 is the origin."""
        n = self.points_per_dim
        return (np.arange(n) - n // 2) * self.spatial_step

    def momenta(self) -> np.ndarray:
        """Centred momentum axis matching :meth:`positions`."""
        n = self.points_per_dim
        return (np.arange(n) - n // 2) * self.momentum_step

    def field_bytes(self) -> int:
        """Bytes held by one complex128 field on this grid."""
        return 16 * self.points_per_dim ** 4

    @classmethod
    def commensurate(cls, points_per_dim: int, cells_per_pk: int, p_k: float,
                     time_step: float) -> "GridSpec":
        """Grid whose momentum step divides p_k into ``cells_per_pk`` cells.

        Even ``cells_per_pk`` puts +-p_k/2 on grid points, which the mode
        regions and the Bragg lattice rely on.
        """
        if cells_per_pk <= 0:
            raise ConfigError("pk_cells must be positive", ["pk_cells"])
        dp = p_k / cells_per_pk
        dx = 2.0 * math.pi * HBAR / (points_per_dim * dp)
        return cls(points_per_dim, dx, time_step)


@dataclass(frozen=True)
class Units:
    """Nondimensionalization scales; multiply a dimensionless value by the scale to get SI."""

    mass: float
    wavenumber: float

    @property
    def length(self) -> float:
        return 1.0 / self.wavenumber

    @property
    def momentum(self) -> float:
        return HBAR * self.wavenumber

    @property
    def time(self) -> float:
        return self.mass / (HBAR * self.wavenumber ** 2)

    @property
    def energy(self) -> float:
        return HBAR / self.time

    @classmethod
    def from_momentum(cls, p_k: float, mass: float) -> "Units":
        return cls(mass=mass, wavenumber=p_k / HBAR)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollisionGeometry:
    """Halo circles for a B atom at +p_k (along z) hitting an A atom at rest.

    Centers are z-components; both circles lie in the (p_x, p_z) plane.  The
    mirror-image halos from the -p_k collision are obtained with z -> -z.
    """

    p_k: float
    halo_center_A: float
    halo_center_B: float
    halo_radius: float
    mass_A: float
    mass_B: float

    @property
    def mass_fraction(self) -> float:
        return self.mass_A / (self.mass_A + self.mass_B)

    def mode_points(self) -> dict:
        """The four selected halo points, keyed A_up, A_down, B_up, B_down.

        The points sit at p_z = +-p_k/2 so that both pairs of partner modes are
        degenerate and one resonant lattice couples them.  A modes lie at
        negative p_x, B modes at positive p_x; A_up + B_up = +p_k z-hat.
        """
        alpha = self.mass_fraction
        if alpha <= 0.25:
            raise ConfigError("mass ratio too small: halos do not reach p_z = +-p_k/2")
        px = math.sqrt(alpha - 0.25) * self.p_k
        half = 0.5 * self.p_k
        return {
            "A_up": (-px, half), "A_down": (-px, -half),
            "B_up": (px, half), "B_down": (px, -half),
        }

    def halo_points(self, species: str, angles, sign: int = 1) -> np.ndarray:
        """Points (p_x, p_z) on a halo circle; ``sign=-1`` gives the -p_k halo."""
        angles = np.asarray(angles, dtype=float)
        center = self.halo_center_A if species == "A" else self.halo_center_B
        px = self.halo_radius * np.sin(angles)
        pz = sign * (center + self.halo_radius * np.cos(angles))
        return np.stack([px, pz], axis=-1)


def derive_collision_geometry(species_A: SpeciesParams, species_B: SpeciesParams,
                              p_k: float) -> CollisionGeometry:
    """Elastic-collision halos for (B at p_k) + (A at rest).

    In the centre-of-mass frame both momenta have magnitude mu * v_rel =
    m_A p_k / (m_A + m_B); the A halo is that circle shifted by the A share of
    the total momentum, which equals the radius, so it passes through zero.
    """
    m_a, m_b = species_A.mass, species_B.mass
    if not (m_a > 0 and m_b > 0):
        raise ConfigError("masses must be positive", ["mass_kg"])
    if not (p_k > 0 and np.isfinite(p_k)):
        raise ConfigError("p_k must be positive", ["p_k"])
    # An infinite A mass is allowed as a limiting case (fraction -> 1).
    alpha = 1.0 if math.isinf(m_a) else m_a / (m_a + m_b)
    radius = alpha * p_k
    center_a = alpha * p_k
    center_b = p_k - center_a
    return CollisionGeometry(p_k, center_a, center_b, radius, m_a, m_b)


def detuning_for_transition(species: SpeciesParams, p_initial, p_final,
                            lattice_transfer: Optional[float] = None,
                            momentum_step: Optional[float] = None) -> float:
    """Two-photon resonance detuning delta = (p_f^2 - p_i^2) / (2 m hbar).

    ``p_initial``/``p_final`` may be scalars (z-components) or 2-vectors.  The
    momentum change must match the lattice transfer (default: the species'
    own 2*hbar*k) within one ``momentum_step`` (default: 1e-3 of the transfer).
    """
    pi_ = np.atleast_1d(np.asarray(p_initial, dtype=float))
    pf_ = np.atleast_1d(np.asarray(p_final, dtype=float))
    if pi_.shape != pf_.shape:
        raise SequencingError("initial and final momenta have different dimensions")
    transfer = species.lattice_momentum() if lattice_transfer is None else float(lattice_transfer)
    tol = 1e-3 * transfer if momentum_step is None else float(momentum_step)
    dp = float(np.linalg.norm(pf_ - pi_))
    if abs(dp - transfer) > tol:
        raise SequencingError(
            f"momentum change {dp:.6g} does not match lattice transfer {transfer:.6g} "
            f"(tolerance {tol:.3g})")
    return float((pf_ @ pf_ - pi_ @ pi_) / (2.0 * species.mass * HBAR))


def ground_state_width(mass: float, trap_frequency: float) -> float:
    """Position rms width sqrt(hbar / (2 m omega)) of the oscillator ground state."""
    return math.sqrt(HBAR / (2.0 * mass * trap_frequency))


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything needed to run one sequence.  Times are measured from the split of B.

    ``t1``/``t2`` are the centres of the mirror and mixing pulses.  An
    ``interaction_strength`` of ``None`` requests calibration to
    ``target_scattered_fraction`` before the collision.
    """

    grid: GridSpec
    species_A: SpeciesParams = field(default_factory=helium3)
    species_B: SpeciesParams = field(default_factory=helium4)
    scattering_length_a34: float = 29e-9
    interaction_width: float = 0.0  # 0 -> interaction_width_cells * spatial_step
    interaction_width_cells: float = 0.5
    interaction_strength: Optional[float] = None
    target_scattered_fraction: float = 0.035
    trap_frequencies: tuple = (2 * math.pi * 1400.0, 2 * math.pi * 1400.0)
    collision_duration: float = 30e-6
    t1: float = 34e-6
    t2: float = 68e-6
    total_duration: float = 80e-6
    state_prep_mode: str = "idealized"
    split_rabi_frequency: float = 0.0  # 0 -> species_B.rabi_frequency
    envelope: str = "square"
    gaussian_sigma: tuple = (0.94e-6, 1.17e-6)
    area_calibration: tuple = (1.0, 1.0)
    mirror_theta: float = math.pi
    theta_A: float = 0.0
    theta_B: float = 0.0
    phi_A: float = 0.0
    phi_B: float = 0.0
    region_radius_cells: float = 2.0
    output_dir: str = "runs"
    checkpoint_interval: int = 0
    kinetic_method: str = "auto"
    workers: int = 1
    memory_cap_bytes: float = 8e9

    def __post_init__(self):
        errs = []
        if not self.scattering_length_a34 > 0:
            errs.append("scattering_length_a34_m")
        if not (0 < self.t1 < self.t2 < self.total_duration):
            errs.append("t1_s/t2_s/total_duration_s")
        if not (0 < self.collision_duration < self.t1):
            errs.append("collision_duration_s")
        if len(self.trap_frequencies) != 2 or min(self.trap_frequencies) <= 0:
            errs.append("trap_frequency_rad_s")
        if self.state_prep_mode not in STATE_PREP_MODES:
            errs.append("state_prep_mode")
        if self.envelope not in ENVELOPES:
            errs.append("envelope")
        if self.envelope == "gaussian" and (len(self.gaussian_sigma) != 2 or min(self.gaussian_sigma) <= 0):
            errs.append("gaussian_sigma_s")
        if self.interaction_width < 0 or self.interaction_width_cells <= 0:
            errs.append("interaction_width_m")
        if self.interaction_strength is not None and self.interaction_strength < 0:
            errs.append("interaction_strength_j")
        if not (0 < self.target_scattered_fraction < 1):
            errs.append("target_scattered_fraction")
        if self.checkpoint_interval < 0:
            errs.append("checkpoint_interval_steps")
        if self.region_radius_cells < 2:
            errs.append("region_radius_cells")
        if self.species_A.label != "A" or self.species_B.label != "B":
            errs.append("species labels")
        if self.workers < 1:
            errs.append("workers")
        if errs:
            raise ConfigError("invalid run configuration: " + ", ".join(errs), errs)

    # -- derived ------------------------------------------------------------
    @property
    def species(self):
        return (self.species_A, self.species_B)

    @property
    def masses(self):
        return (self.species_A.mass, self.species_B.mass)

    @property
    def p_k(self) -> float:
        """Common lattice momentum, taken from species B's laser."""
        return self.species_B.lattice_momentum()

    @property
    def units(self) -> Units:
        return Units.from_momentum(self.p_k, self.species_B.mass)

    @property
    def geometry(self) -> CollisionGeometry:
        return derive_collision_geometry(self.species_A, self.species_B, self.p_k)

    @property
    def interaction_sigma(self) -> float:
        if self.interaction_width > 0:
            return self.interaction_width
        return self.interaction_width_cells * self.grid.spatial_step

    @property
    def pulses(self):
        """Mirror and mixing :class:`~dualbell.sequence.PulseSpec` list."""
        from .sequence import build_pulses
        return build_pulses(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def canonical_text(self) -> str:
        """Stable text form of every field, used for the run hash."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name in ("output_dir", "workers"):
                continue  # do not change results
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            lines.append(f"{f.name}={_canon(v)}")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


def _canon(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return "{" + ",".join(f"{k}:{_canon(v[k])}" for k in sorted(v)) + "}"
    if isinstance(v, (list, tuple)):
        return "(" + ",".join(_canon(x) for x in v) + ")"
    return repr(v)


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def parse_number(text: str) -> float:
    """Parse a float or a small arithmetic expression using ``pi`` (e.g. ``pi/2``)."""
    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            return -ev(node.operand) if isinstance(node.op, ast.USub) else ev(node.operand)
        raise ValueError(text)
    try:
        return float(ev(ast.parse(text.strip(), mode="eval")))
    except (SyntaxError, ValueError, ZeroDivisionError, TypeError) as exc:
        raise ValueError(f"not a number: {text!r}") from exc


# section -> {key: kind}; kinds: float, int, str, auto (float or "auto")
CONFIG_KEYS = {
    "grid": {"points_per_dim": "int", "pk_cells": "int", "spatial_step_m": "float",
             "time_step_s": "float"},
    "species.A": {"mass_kg": "float", "transition_frequency_hz": "float",
                  "rabi_frequency_rad_s": "float", "pulse_duration_s": "float",
                  "intensity_w_per_m2": "float", "trap_frequency_rad_s": "float",
                  "gaussian_sigma_s": "float", "area_calibration": "float"},
    "collision": {"scattering_length_a34_m": "float", "interaction_width_m": "float",
                  "interaction_width_cells": "float", "interaction_strength_j": "auto",
                  "target_scattered_fraction": "float", "collision_duration_s": "float"},
    "sequence": {"state_prep_mode": "str", "t1_s": "float", "t2_s": "float",
                 "total_duration_s": "float", "envelope": "str", "split_rabi_frequency_rad_s": "float",
                 "mirror_theta_rad": "float", "theta_a_rad": "float", "theta_b_rad": "float",
                 "phi_a_rad": "float", "phi_b_rad": "float"},
    "analysis": {"region_radius_cells": "float"},
    "output": {"output_dir": "str", "checkpoint_interval_steps": "int"},
    "numerics": {"kinetic_method": "str", "workers": "int", "memory_cap_bytes": "float"},
}
CONFIG_KEYS["species.B"] = CONFIG_KEYS["species.A"]


def _read_section(parser, section, errors):
    out = {}
    if not parser.has_section(section):
        return out
    kinds = CONFIG_KEYS[section]
    for key, raw in parser.items(section):
        if key not in kinds:
            errors.append(f"[{section}] {key}: unknown key")
            continue
        kind = kinds[key]
        try:
            if kind == "str":
                out[key] = raw.strip()
            elif kind == "int":
                val = parse_number(raw)
                if val != int(val):
                    raise ValueError(raw)
                out[key] = int(val)
            elif kind == "auto" and raw.strip().lower() == "auto":
                out[key] = None
            else:
                out[key] = parse_number(raw)
        except ValueError:
            errors.append(f"[{section}] {key}: cannot parse {raw!r}")
    return out


def parse_config_text(text: str, base_dir: str = ".") -> RunConfig:
    """Build a :class:`RunConfig` from INI text; all problems are reported together."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    errors = []
    unknown = [s for s in parser.sections() if s not in CONFIG_KEYS]
    errors.extend(f"[{s}]: unknown section" for s in unknown)
    sec = {s: _read_section(parser, s, errors) for s in CONFIG_KEYS}

    species = {}
    traps, sigmas, calib = [], [], []
    defaults = {"A": helium3(), "B": helium4()}
    for lab in SPECIES_LABELS:
        s = sec[f"species.{lab}"]
        d = defaults[lab]
        try:
            species[lab] = SpeciesParams(
                lab, s.get("mass_kg", d.mass), s.get("transition_frequency_hz", d.transition_frequency),
                s.get("rabi_frequency_rad_s", d.rabi_frequency), s.get("pulse_duration_s", d.pulse_duration),
                s.get("intensity_w_per_m2", d.intensity))
        except ConfigError as exc:
            errors.append(f"[species.{lab}] {exc}")
        traps.append(s.get("trap_frequency_rad_s", RunConfig.trap_frequencies[SPECIES_LABELS.index(lab)]))
        sigmas.append(s.get("gaussian_sigma_s", RunConfig.gaussian_sigma[SPECIES_LABELS.index(lab)]))
        calib.append(s.get("area_calibration", 1.0))

    g = sec["grid"]
    grid = None
    n = g.get("points_per_dim", 49)
    dt = g.get("time_step_s", 1e-7)
    try:
        if "pk_cells" in g and "spatial_step_m" in g:
            errors.append("[grid] give either pk_cells or spatial_step_m, not both")
        elif "spatial_step_m" in g:
            grid = GridSpec(n, g["spatial_step_m"], dt)
        elif "A" in species and "B" in species:
            grid = GridSpec.commensurate(n, g.get("pk_cells", 22), species["B"].lattice_momentum(), dt)
    except ConfigError as exc:
        errors.append(f"[grid] {exc}")
    if errors:
        raise ConfigError("configuration errors:\n  " + "\n  ".join(errors), errors)

    c, q, a, o, nm = sec["collision"], sec["sequence"], sec["analysis"], sec["output"], sec["numerics"]
    kw = dict(grid=grid, species_A=species["A"], species_B=species["B"],
              trap_frequencies=tuple(traps), gaussian_sigma=tuple(sigmas),
              area_calibration=tuple(calib))
    mapping = {
        "scattering_length_a34": c.get("scattering_length_a34_m"),
        "interaction_width": c.get("interaction_width_m"),
        "interaction_width_cells": c.get("interaction_width_cells"),
        "target_scattered_fraction": c.get("target_scattered_fraction"),
        "collision_duration": c.get("collision_duration_s"),
        "t1": q.get("t1_s"), "t2": q.get("t2_s"), "total_duration": q.get("total_duration_s"),
        "state_prep_mode": q.get("state_prep_mode"), "envelope": q.get("envelope"),
        "split_rabi_frequency": q.get("split_rabi_frequency_rad_s"),
        "mirror_theta": q.get("mirror_theta_rad"),
        "theta_A": q.get("theta_a_rad"), "theta_B": q.get("theta_b_rad"),
        "phi_A": q.get("phi_a_rad"), "phi_B": q.get("phi_b_rad"),
        "region_radius_cells": a.get("region_radius_cells"),
        "checkpoint_interval": o.get("checkpoint_interval_steps"),
        "kinetic_method": nm.get("kinetic_method"), "workers": nm.get("workers"),
        "memory_cap_bytes": nm.get("memory_cap_bytes"),
    }
    kw.update({k: v for k, v in mapping.items() if v is not None})
    if "interaction_strength_j" in c:
        kw["interaction_strength"] = c["interaction_strength_j"]
    if "output_dir" in o:
        od = o["output_dir"]
        kw["output_dir"] = od if os.path.isabs(od) else os.path.join(base_dir, od)
    return RunConfig(**kw)


def load_config(path: str) -> RunConfig:
    """Read a config file; relative output paths resolve against the file's folder."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, base_dir=os.path.dirname(os.path.abspath(path)))


def steps_for(duration: float, dt: float) -> int:
    """Number of whole time steps covering ``duration`` (rounded to nearest)."""
    return int(round(duration / dt))


def default_trap_frequency(mass: float, grid: GridSpec, cells: float = 5.0) -> float:
    """Trap frequency giving a ground-state width of ``cells`` grid cells."""
    sigma = cells * grid.spatial_step
    return HBAR / (2.0 * mass * sigma ** 2)


def mode_labels() -> Sequence[str]:
    """Joint basis order used everywhere: (up-up, up-down, down-up, down-down)."""
    return ("uu", "ud", "du", "dd")
