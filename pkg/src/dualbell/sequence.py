"""The time-ordered experiment: prepare, split B, collide, mirror, mix, expand.

Time origin is the end of the B splitting pulse (the start of the collision
window).  In physical state-preparation mode the split pulse occupies the
interval just before t = 0 with the interaction switched off.

After the collision window the two species no longer interact, so the field
evolves as a tensor product of an A-only and a B-only propagation.  Pulse
stages use that: each species is advanced over the stage window on its own
axes (free flight to its pulse, the pulse steps, free flight to the window
end).  The result equals the joint split-step evolution exactly and lets a
parameter scan reuse the A-pulsed field for every B setting.
"""
from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .config import HBAR, RunConfig, detuning_for_transition, steps_for
from .errors import (CalibrationError, DualBellError, SequencingError, StageError)
from .grid.potentials import (BraggPotential, GaussianEnvelope, InteractionPotential,
                              SquareEnvelope)
from .grid.propagator import Propagator
from .grid.snapshot import load_snapshot, save_snapshot
from .grid.wavefunction import (SPECIES_AXES, WaveFunction4D, ground_state, momentum_density,
                                norm)

log = logging.getLogger(__name__)

STAGES = ("prepare", "split_B", "collide", "mirror_A", "mirror_B", "mix_A", "mix_B", "expand")
CALIBRATION_TOLERANCE = 0.02
MAX_REST_POPULATION = 0.05
NONPERTURBATIVE_FRACTION = 0.20
SCATTERED_FRACTION_BAND = (0.02, 0.05)
# starting guess for the interaction calibration, in units of hbar^2 k^2 / m_B
_G_GUESS_ND = 0.3


# ---------------------------------------------------------------------------
# pulses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PulseSpec:
    """One Bragg pulse V(t) cos(k_L z - delta (t - t_ref) - phi) on one species.

    ``rabi_frequency`` is the peak two-photon Rabi frequency actually applied
    (after rounding the duration to whole steps); ``theta`` is its target area.
    Envelope samples are taken at step midpoints from ``start_time``.
    """

    target: str
    theta: float
    phi: float
    envelope: str
    duration: float
    start_time: float
    detuning: float
    lattice_wavevector: float
    rabi_frequency: float
    time_step: float
    sigma: float = 0.0
    calibration: float = 1.0
    label: str = ""

    def __post_init__(self):
        if self.target not in ("A", "B"):
            raise SequencingError(f"pulse target must be A or B, got {self.target!r}")
        if self.envelope not in ("square", "gaussian"):
            raise SequencingError(f"unknown envelope {self.envelope!r}")
        if not self.duration > 0:
            raise SequencingError("pulse duration must be positive")
        if self.envelope == "gaussian" and not self.sigma > 0:
            raise SequencingError("gaussian pulse needs sigma > 0")
        if self.theta > 0:
            area = self.rabi_frequency * self.effective_area()
            if abs(area / self.theta - 1.0) > CALIBRATION_TOLERANCE:
                raise CalibrationError(
                    f"pulse {self.label or self.target}: Omega * envelope area = {area:.4g} "
                    f"differs from theta = {self.theta:.4g} by more than 2%", area)

    @property
    def n_steps(self) -> int:
        return max(1, steps_for(self.duration, self.time_step))

    @property
    def end_time(self) -> float:
        return self.start_time + self.n_steps * self.time_step

    @property
    def center(self) -> float:
        return self.start_time + 0.5 * self.n_steps * self.time_step

    def envelope_samples(self) -> np.ndarray:
        """Relative envelope (peak 1) at each step midpoint."""
        mids = (np.arange(self.n_steps) + 0.5) * self.time_step
        if self.envelope == "square":
            return np.ones(self.n_steps)
        c = 0.5 * self.n_steps * self.time_step
        return np.exp(-((mids - c) ** 2) / (2 * self.sigma ** 2))

    def effective_area(self) -> float:
        """Integral of the relative envelope over the pulse (midpoint rule), seconds."""
        return float(self.envelope_samples().sum() * self.time_step)

    def potential(self, start_time: Optional[float] = None, coupling: str = "banded") -> BraggPotential:
        """The lattice potential, optionally re-timed to begin at ``start_time``."""
        start = self.start_time if start_time is None else start_time
        peak = HBAR * self.rabi_frequency * self.calibration
        if self.envelope == "square":
            env = SquareEnvelope(peak)
        else:
            env = GaussianEnvelope(peak, start + 0.5 * self.n_steps * self.time_step, self.sigma)
        # lattice phase referenced to the pulse start so retiming keeps the phase
        phase = self.phi - self.detuning * start
        return BraggPotential(self.target, env, self.lattice_wavevector, self.detuning, phase,
                              start, self.n_steps * self.time_step, coupling=coupling)

    def as_dict(self) -> dict:
        return asdict(self)


def make_pulse(config: RunConfig, target: str, theta: float, phi: float, center: float,
               label: str = "", p_initial=None, p_final=None) -> PulseSpec:
    """Pulse of area ``theta`` centred at ``center`` with the config's envelope.

    Square pulses use the species' Rabi frequency; the duration theta/Omega is
    rounded to whole time steps and Omega rescaled so the area stays exact.
    Gaussian pulses span +-3 sigma (whole steps) with the peak set from the
    discrete envelope area.  The detuning is the two-photon resonance of the
    transition p_initial -> p_final (default: the halo modes -p_k/2 -> +p_k/2).
    """
    if theta <= 0:
        raise SequencingError("pulse area must be positive (omit the pulse for theta = 0)")
    idx = 0 if target == "A" else 1
    sp = config.species[idx]
    dt = config.grid.time_step
    p_k = config.p_k
    if p_initial is None:
        p_initial, p_final = -0.5 * p_k, 0.5 * p_k
    delta = detuning_for_transition(sp, p_initial, p_final, lattice_transfer=p_k,
                                    momentum_step=config.grid.momentum_step)
    cal = config.area_calibration[idx]
    if config.envelope == "square":
        n = max(1, int(round(theta / (sp.rabi_frequency * dt))))
        rabi = theta / (n * dt)
        sigma = 0.0
    else:
        sigma = config.gaussian_sigma[idx]
        n = max(1, int(math.ceil(6 * sigma / dt)))
        mids = (np.arange(n) + 0.5) * dt
        env = np.exp(-((mids - 0.5 * n * dt) ** 2) / (2 * sigma ** 2))
        rabi = theta / float(env.sum() * dt)
    return PulseSpec(target, theta, phi % (2 * math.pi), config.envelope, n * dt, center - 0.5 * n * dt,
                     delta, p_k / HBAR, rabi, dt, sigma, cal, label or target)


def build_pulses(config: RunConfig) -> List[PulseSpec]:
    """Mirror pulses at t1 and (non-zero-area) mixing pulses at t2."""
    out = [make_pulse(config, "A", config.mirror_theta, 0.0, config.t1, "mirror_A"),
           make_pulse(config, "B", config.mirror_theta, 0.0, config.t1, "mirror_B")]
    for tgt, th, ph in (("A", config.theta_A, config.phi_A), ("B", config.theta_B, config.phi_B)):
        th = th % (2 * math.pi)
        if th > 0:
            out.append(make_pulse(config, tgt, th, ph, config.t2, "mix_" + tgt))
    return out


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    start: float
    duration: float
    params: dict = field(default_factory=dict)
    snapshot: Optional[str] = None


@dataclass
class SequenceSchedule:
    stages: List[StageRecord]
    state_prep_mode: str

    def stage(self, name: str) -> StageRecord:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_text(self) -> str:
        """Structured manifest lines: stage, start_s, duration_s, parameters (JSON)."""
        lines = [f"# state_prep_mode = {self.state_prep_mode}",
                 "# stage\tstart_s\tduration_s\tparameters"]
        for s in self.stages:
            lines.append(f"{s.name}\t{s.start:.9e}\t{s.duration:.9e}\t{json.dumps(s.params, sort_keys=True)}")
        return "\n".join(lines) + "\n"


def split_duration(config: RunConfig) -> float:
    if config.state_prep_mode != "physical":
        return 0.0
    rabi = config.split_rabi_frequency or config.species_B.rabi_frequency
    dt = config.grid.time_step
    return max(1, int(round(math.pi / (math.sqrt(2) * rabi * dt)))) * dt


def build_schedule(config: RunConfig, pulses: Optional[Sequence[PulseSpec]] = None) -> SequenceSchedule:
    """Stage timing; raises :class:`SequencingError` on overlaps or misordering."""
    pulses = list(pulses if pulses is not None else build_pulses(config))
    by = {p.label: p for p in pulses}
    t_split = split_duration(config)
    stages = [StageRecord("prepare", -t_split, 0.0, {"trap_frequencies_rad_s": list(config.trap_frequencies)}),
              StageRecord("split_B", -t_split, t_split, {"mode": config.state_prep_mode}),
              StageRecord("collide", 0.0, config.collision_duration,
                          {"interaction_strength_j": config.interaction_strength,
                           "interaction_sigma_m": config.interaction_sigma})]
    prev_end = config.collision_duration
    for name in ("mirror_A", "mirror_B", "mix_A", "mix_B"):
        p = by.get(name)
        if p is None:
            t = config.t2 if name.startswith("mix") else config.t1
            stages.append(StageRecord(name, t, 0.0, {"theta": 0.0, "phi": 0.0}))
            continue
        stages.append(StageRecord(name, p.start_time, p.end_time - p.start_time,
                                  {"theta": p.theta, "phi": p.phi, "envelope": p.envelope,
                                   "rabi_frequency_rad_s": p.rabi_frequency,
                                   "detuning_rad_s": p.detuning, "steps": p.n_steps}))
    mirror = [s for s in stages if s.name.startswith("mirror") and s.duration > 0]
    mix = [s for s in stages if s.name.startswith("mix") and s.duration > 0]
    m_start = min((s.start for s in mirror), default=config.t1)
    m_end = max((s.start + s.duration for s in mirror), default=config.t1)
    x_start = min((s.start for s in mix), default=config.t2)
    x_end = max((s.start + s.duration for s in mix), default=config.t2)
    eps = 1e-3 * config.grid.time_step
    if m_start < prev_end - eps:
        raise SequencingError("mirror pulses start before the collision window ends")
    if x_start < m_end - eps:
        raise SequencingError("mixing pulses overlap the mirror pulses")
    if x_end > config.total_duration + eps:
        raise SequencingError("mixing pulses end after the total duration")
    stages.append(StageRecord("expand", x_end, config.total_duration - x_end))
    return SequenceSchedule(stages, config.state_prep_mode)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def make_propagator(config: RunConfig) -> Propagator:
    return Propagator(config.grid, config.masses, config.units, method=config.kinetic_method,
                      workers=config.workers)


def prepare_initial_state(config: RunConfig) -> WaveFunction4D:
    """Trap ground state of both species; the trap is off for every later stage."""
    psi = ground_state(config.grid, config.trap_frequencies, config.masses)
    psi.time = -split_duration(config)
    psi.metadata["stage"] = "prepare"
    return psi


def split_B(psi: WaveFunction4D, config: RunConfig, propagator: Optional[Propagator] = None) -> WaveFunction4D:
    """Put B into (|+p_k> + |-p_k>)/sqrt(2) along z, leaving A untouched.

    Idealized mode multiplies by sqrt(2) cos(p_k z4 / hbar).  Physical mode
    drives B with two lattices detuned by +-p_k^2 / (2 m_B hbar), each
    resonant with one of the 0 -> +-p_k transitions, for a full depletion of
    the rest state (bright-state area pi at Rabi frequency sqrt(2) Omega).
    """
    if config.state_prep_mode == "idealized":
        z = config.grid.positions()
        psi.amplitudes *= (math.sqrt(2.0) * np.cos(config.p_k * z / HBAR))[None, None, None, :]
        psi.amplitudes /= math.sqrt(norm(psi))
        psi.metadata["stage"] = "split_B"
        return psi
    prop = propagator or make_propagator(config)
    t_split = split_duration(config)
    sp = config.species_B
    rabi = config.split_rabi_frequency or sp.rabi_frequency
    delta = detuning_for_transition(sp, 0.0, config.p_k, lattice_transfer=config.p_k,
                                    momentum_step=config.grid.momentum_step)
    start = psi.time
    pots = [BraggPotential("B", SquareEnvelope(HBAR * rabi), config.p_k / HBAR, d, 0.0,
                           start, t_split) for d in (delta, -delta)]
    n = steps_for(t_split, config.grid.time_step)
    prop.evolve(psi, pots, n, axes=SPECIES_AXES["B"], advance_time=False)
    prop.free_flight(psi, n * config.grid.time_step, axes=SPECIES_AXES["A"])
    w = split_weights(psi, config)
    psi.metadata.update(stage="split_B", split_weights=w)
    if w["rest"] > MAX_REST_POPULATION:
        raise CalibrationError(f"physical split leaves {w['rest']:.3f} of B at rest (> 5%)", w["rest"])
    return psi


def split_weights(psi: WaveFunction4D, config: RunConfig) -> dict:
    """B momentum weight near -p_k, 0 and +p_k (bands of half-width p_k/2 along p_z)."""
    d = momentum_density(psi, "B")
    pz = config.grid.momenta()
    dp = config.grid.momentum_step
    prof = d.sum(axis=0) * dp * dp  # probability per p_z cell
    half = 0.5 * config.p_k
    return {"minus": float(prof[pz < -half].sum()),
            "rest": float(prof[np.abs(pz) <= half].sum()),
            "plus": float(prof[pz > half].sum())}


def interaction_potential(config: RunConfig, strength: float) -> InteractionPotential:
    return InteractionPotential(strength, config.interaction_sigma, config.grid.box_length,
                                start=0.0, stop=config.collision_duration)


def scattered_fraction(after: WaveFunction4D, before: WaveFunction4D, propagator: Propagator) -> float:
    """1 - |<psi_free|psi>|^2 with psi_free the exact free evolution of ``before``."""
    free = before.copy()
    propagator.free_flight(free, after.time - before.time)
    ov = np.vdot(free.amplitudes, after.amplitudes) * after.cell_volume
    return float(max(0.0, 1.0 - abs(ov) ** 2))


def _collide_steps(psi: WaveFunction4D, config: RunConfig, strength: float, prop: Propagator,
                   start_step: int = 0, callback=None) -> WaveFunction4D:
    n = steps_for(config.collision_duration, config.grid.time_step)
    pot = [interaction_potential(config, strength)]
    prop.evolve(psi, pot, n - start_step, callback=callback)
    return psi


def calibrate_interaction(psi: WaveFunction4D, config: RunConfig, prop: Propagator,
                          max_iter: int = 6):
    """Find g with the scattered fraction inside 2-5%; returns (g, fraction, state).

    In the perturbative regime the fraction grows as g^2, so each iteration
    rescales g by sqrt(target / fraction); a bisection bracket built from the
    evaluated points takes over if that fails to land in the band.
    """
    lo_band, hi_band = SCATTERED_FRACTION_BAND
    target = config.target_scattered_fraction
    g = _G_GUESS_ND * config.units.energy
    lo, hi = None, None
    for it in range(max_iter):
        trial = psi.copy()
        _collide_steps(trial, config, g, prop)
        f = scattered_fraction(trial, psi, prop)
        log.info("interaction calibration: g = %.4e J -> scattered fraction %.4f", g, f)
        if lo_band <= f <= hi_band:
            return g, f, trial
        if f < lo_band:
            lo = g if lo is None or g > lo else lo
        else:
            hi = g if hi is None or g < hi else hi
        if f > 0 and (it < 2 or lo is None or hi is None):
            g_new = g * math.sqrt(target / f)
        else:
            g_new = 0.5 * (lo + hi)
        if lo is not None and hi is not None and not (lo < g_new < hi):
            g_new = 0.5 * (lo + hi)
        g = g_new
    raise CalibrationError(f"interaction calibration did not reach the 2-5% band (last {f:.4f})", f)


def collide(psi: WaveFunction4D, config: RunConfig, duration: Optional[float] = None,
            propagator: Optional[Propagator] = None, strength: Optional[float] = None,
            callback=None, start_step: int = 0, measure_fraction: bool = True) -> WaveFunction4D:
    """Evolve through the collision window with the pair interaction switched on.

    ``strength`` defaults to ``config.interaction_strength``; ``None`` there
    triggers calibration.  The used strength and the scattered fraction are
    stored in ``psi.metadata``.  Measuring the fraction for a fixed strength
    holds two extra fields; ``measure_fraction=False`` skips it (reported NaN).
    """
    if duration is not None and abs(duration - config.collision_duration) > 1e-15:
        config = config.replace(collision_duration=duration)
    prop = propagator or make_propagator(config)
    g = config.interaction_strength if strength is None else strength
    if g is None:
        g, f, out = calibrate_interaction(psi, config, prop)
        psi.amplitudes, psi.time = out.amplitudes, out.time
    else:
        before = psi.copy() if (start_step == 0 and measure_fraction) else None
        _collide_steps(psi, config, g, prop, start_step, callback)
        f = scattered_fraction(psi, before, prop) if before is not None else float("nan")
    if f > NONPERTURBATIVE_FRACTION:
        warnings.warn(f"scattered fraction {f:.3f} exceeds 20%: single-pair approximation violated",
                      RuntimeWarning, stacklevel=2)
    psi.metadata.update(stage="collide", interaction_strength=g, scattered_fraction=f)
    return psi


def apply_bragg(psi: WaveFunction4D, pulse: PulseSpec, propagator: Optional[Propagator] = None,
                config: Optional[RunConfig] = None, local: bool = False,
                coupling: str = "banded") -> WaveFunction4D:
    """Run ``pulse`` starting at ``psi.time`` (all pulse steps).

    With ``local=False`` every coordinate evolves (the other species moves
    freely); with ``local=True`` only the target's axes are advanced and the
    clock is left unchanged, for composition with the other species.
    """
    if propagator is None:
        if config is None:
            raise ValueError("apply_bragg needs a propagator or a config")
        propagator = make_propagator(config)
    pot = pulse.potential(start_time=psi.time, coupling=coupling)
    axes = SPECIES_AXES[pulse.target] if local else (0, 1, 2, 3)
    propagator.evolve(psi, [pot], pulse.n_steps, dt=pulse.time_step, axes=axes, advance_time=not local)
    return psi


def advance_species(psi: WaveFunction4D, species: str, t_from: float, t_to: float,
                    pulse: Optional[PulseSpec], prop: Propagator) -> WaveFunction4D:
    """Evolve one species' coordinates from t_from to t_to, running ``pulse`` if given.

    The clock (``psi.time``) is not changed.
    """
    axes = SPECIES_AXES[species]
    t = t_from
    if pulse is not None:
        if pulse.start_time < t_from - 1e-12 or pulse.end_time > t_to + 1e-12:
            raise SequencingError(f"pulse {pulse.label} outside its stage window")
        prop.free_flight(psi, pulse.start_time - t, axes=axes, advance_time=False)
        saved = psi.time
        psi.time = pulse.start_time
        apply_bragg(psi, pulse, prop, local=True)
        psi.time = saved
        t = pulse.end_time
    prop.free_flight(psi, t_to - t, axes=axes, advance_time=False)
    return psi


def pulse_stage(psi: WaveFunction4D, pulses: Sequence[PulseSpec], prop: Propagator,
                t_end: Optional[float] = None) -> WaveFunction4D:
    """Evolve both species from ``psi.time`` to ``t_end`` with the given concurrent pulses."""
    by = {p.target: p for p in pulses}
    if len(by) != len(pulses):
        raise SequencingError("two overlapping pulses on the same species")
    t0 = psi.time
    t_end = max([p.end_time for p in pulses] + [t0]) if t_end is None else t_end
    for sp in ("A", "B"):
        advance_species(psi, sp, t0, t_end, by.get(sp), prop)
    psi.time = t_end
    return psi


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

@dataclass
class SequenceResult:
    psi: WaveFunction4D
    schedule: SequenceSchedule
    snapshots: List[str]
    interaction_strength: float
    scattered_fraction: float
    premix: Optional[WaveFunction4D] = None


class _Checkpointer:
    """Stage snapshots plus a progress file so an interrupted run can resume."""

    def __init__(self, directory: Optional[str], config: RunConfig, enabled: bool):
        self.dir = directory
        self.enabled = enabled and directory is not None
        self.hash = config.config_hash()
        self.progress = {"config_hash": self.hash, "completed": [], "snapshots": {}}
        if self.enabled:
            os.makedirs(directory, exist_ok=True)
            path = self._progress_path()
            if os.path.exists(path):
                with open(path) as fh:
                    old = json.load(fh)
                if old.get("config_hash") == self.hash:
                    self.progress = old

    def _progress_path(self):
        return os.path.join(self.dir, "progress.json")

    def _write(self):
        tmp = self._progress_path() + ".part"
        with open(tmp, "w") as fh:
            json.dump(self.progress, fh, indent=1, sort_keys=True)
        os.replace(tmp, self._progress_path())

    def done(self, stage: str) -> bool:
        return stage in self.progress["completed"]

    def last(self):
        for stage in reversed(STAGES):
            if stage in self.progress["completed"]:
                return stage, self.progress["snapshots"].get(stage)
        return None, None

    def save(self, stage: str, psi: WaveFunction4D, extra: Optional[dict] = None) -> Optional[str]:
        if not self.enabled:
            return None
        path = os.path.join(self.dir, f"stage_{STAGES.index(stage)}_{stage}.bwf4")
        save_snapshot(psi, path)
        self.progress["completed"].append(stage)
        self.progress["snapshots"][stage] = os.path.basename(path)
        self.progress.pop("partial", None)
        if extra:
            self.progress.update(extra)
        self._write()
        return path

    def save_partial(self, stage: str, step: int, psi: WaveFunction4D):
        if not self.enabled:
            return
        path = os.path.join(self.dir, f"partial_{stage}.bwf4")
        save_snapshot(psi, path)
        self.progress["partial"] = {"stage": stage, "step": step, "file": os.path.basename(path)}
        self._write()

    def load(self, name: str, dt: float) -> WaveFunction4D:
        return load_snapshot(os.path.join(self.dir, name), time_step=dt)


def _with_masses(psi: WaveFunction4D, config: RunConfig) -> WaveFunction4D:
    psi.grid = config.grid
    return psi


def run_to_mixing(config: RunConfig, output_dir: Optional[str] = None, checkpoint: bool = False,
                  propagator: Optional[Propagator] = None, progress: Optional[Callable[[str], None]] = None,
                  mix_start: Optional[float] = None):
    """Run prepare .. mirror and free flight up to the mixing window.

    Returns ``(psi, schedule, snapshots, g, fraction, checkpointer)``; ``psi.time``
    is the start of the mixing window, or ``mix_start`` when that is earlier
    (scans whose mixing pulses are longer than the configured ones).
    """
    prop = propagator or make_propagator(config)
    pulses = build_pulses(config)
    schedule = build_schedule(config, pulses)
    ck = _Checkpointer(output_dir, config, checkpoint)
    dt = config.grid.time_step
    snaps: List[str] = []
    say = progress or (lambda msg: log.info(msg))
    g = ck.progress.get("interaction_strength", config.interaction_strength)
    frac = ck.progress.get("scattered_fraction", float("nan"))
    psi = None
    current = "prepare"

    def resume_from(stage):
        name = ck.progress["snapshots"].get(stage)
        if name is None:
            return None
        return _with_masses(ck.load(name, dt), config)

    try:
        if ck.enabled and ck.done("mirror_B"):
            psi = resume_from("mirror_B")
            say("resumed after mirror stage")
        elif ck.enabled and ck.done("collide"):
            psi = resume_from("collide")
            say("resumed after collision")
        if psi is None:
            start_step = 0
            partial = ck.progress.get("partial") if ck.enabled else None
            if partial and partial.get("stage") == "collide" and g is not None:
                psi = _with_masses(ck.load(partial["file"], dt), config)
                start_step = partial["step"]
                say(f"resumed collision at step {start_step}")
            else:
                current = "prepare"
                psi = prepare_initial_state(config)
                current = "split_B"
                psi = split_B(psi, config, prop)
                snap = ck.save("split_B", psi)
                snaps += [snap] if snap else []
            current = "collide"
            say("collision window")
            cb = None
            if ck.enabled and config.checkpoint_interval > 0 and g is not None:
                k = config.checkpoint_interval

                def cb(s, field_):
                    if (start_step + s + 1) % k == 0:
                        ck.save_partial("collide", start_step + s + 1, field_)
            if g is None:
                psi = collide(psi, config, propagator=prop)
            else:
                light = 4 * config.grid.field_bytes() > config.memory_cap_bytes
                psi = collide(psi, config, propagator=prop, strength=g, callback=cb, start_step=start_step,
                              measure_fraction=not light)
            g = psi.metadata["interaction_strength"]
            if start_step == 0:
                frac = psi.metadata["scattered_fraction"]
            snap = ck.save("collide", psi, {"interaction_strength": g, "scattered_fraction": frac})
            snaps += [snap] if snap else []
        if not (ck.enabled and ck.done("mirror_B")):
            current = "mirror_A"
            mirror = [p for p in pulses if p.label.startswith("mirror")]
            m_start = min(p.start_time for p in mirror)
            prop.free_flight(psi, m_start - psi.time)
            for p in mirror:
                check_pulse_calibration(p, config, prop)
            say("mirror pulses")
            psi = pulse_stage(psi, mirror, prop)
            current = "mirror_B"
            snap = ck.save("mirror_B", psi)
            snaps += [snap] if snap else []
        mix = [p for p in pulses if p.label.startswith("mix")]
        x_start = min([p.start_time for p in mix] + [config.t2] + ([mix_start] if mix_start is not None else []))
        if x_start < psi.time - 1e-12:
            current = "mix_A"
            raise SequencingError("mixing window starts before the mirror pulses end")
        if x_start > psi.time:
            prop.free_flight(psi, x_start - psi.time)
    except DualBellError as exc:
        stage, path = ck.last()
        raise StageError(f"stage {current} failed: {exc}", current,
                         os.path.join(ck.dir, path) if path and ck.dir else None) from exc
    for rec in schedule.stages:
        name = ck.progress["snapshots"].get(rec.name)
        if name:
            rec.snapshot = name
    return psi, schedule, [s for s in snaps if s], g, frac, ck


def run_sequence(config: RunConfig, output_dir: Optional[str] = None, checkpoint: bool = False,
                 propagator: Optional[Propagator] = None, keep_premix: bool = False,
                 progress: Optional[Callable[[str], None]] = None) -> SequenceResult:
    """Execute the whole experiment and return the final field with run records.

    With ``checkpoint=True`` (and an ``output_dir``) every stage writes a BWF4
    snapshot and ``progress.json``; rerunning the same config in the same
    directory resumes after the last completed stage.  Collision steps are
    also checkpointed every ``config.checkpoint_interval`` steps.
    """
    prop = propagator or make_propagator(config)
    psi, schedule, snaps, g, frac, ck = run_to_mixing(config, output_dir, checkpoint, prop, progress)
    premix = psi.copy() if keep_premix else None
    current = "mix_A"
    try:
        mix = [p for p in build_pulses(config) if p.label.startswith("mix")]
        t_mix_end = max([p.end_time for p in mix] + [psi.time])
        if mix:
            psi = pulse_stage(psi, mix, prop, t_mix_end)
        current = "mix_B"
        snap = ck.save("mix_B", psi)
        snaps += [snap] if snap else []
        current = "expand"
        prop.free_flight(psi, config.total_duration - psi.time)
        snap = ck.save("expand", psi)
        snaps += [snap] if snap else []
    except DualBellError as exc:
        stage, path = ck.last()
        raise StageError(f"stage {current} failed: {exc}", current,
                         os.path.join(ck.dir, path) if path and ck.dir else None) from exc
    psi.metadata.update(stage="expand", interaction_strength=g, scattered_fraction=frac)
    for rec in schedule.stages:
        name = ck.progress["snapshots"].get(rec.name)
        if name:
            rec.snapshot = name
    return SequenceResult(psi, schedule, snaps, g, frac, premix)


# ---------------------------------------------------------------------------
# calibration check
# ---------------------------------------------------------------------------

def single_axis_transfer(pulse: PulseSpec, config: RunConfig, prop: Propagator,
                         p_initial: float, p_final: float) -> float:
    """Transfer fraction of ``pulse`` on a plane wave at ``p_initial`` (z only).

    Uses the propagator's own lattice operator and kinetic phases on a single
    axis; the result is the population found at ``p_final``.
    """
    n = config.grid.points_per_dim
    dp = config.grid.momentum_step
    i0 = int(round(p_initial / dp)) + n // 2
    i1 = int(round(p_final / dp)) + n // 2
    m_nd = prop.m_nd[0 if pulse.target == "A" else 1]
    dt_nd = pulse.time_step / prop.units.time
    p = (np.arange(n) - n // 2) * prop.dp_nd
    kin = np.exp(-1j * dt_nd * p ** 2 / (2 * m_nd))
    c = np.zeros(n, dtype=complex)
    c[i0] = 1.0
    pot = pulse.potential(start_time=0.0)
    shift = prop._lattice_shift(pulse.lattice_wavevector)
    e_u = prop.units.energy
    F = prop._fourier
    for s in range(pulse.n_steps):
        t_mid = (s + 0.5) * pulse.time_step
        _, amp, _, psi_ph = pot.lattice_term(t_mid)
        op = prop.lattice_operator([(amp / e_u, shift, psi_ph)], 0.5 * dt_nd)
        half = F @ op @ F.conj().T
        c = half @ (kin * (half @ c))
    return float(abs(c[i1]) ** 2)


def check_pulse_calibration(pulse: PulseSpec, config: RunConfig, prop: Propagator) -> float:
    """Compare the plane-wave transfer of a halo pulse with sin^2(theta/2)."""
    half = 0.5 * config.p_k
    measured = single_axis_transfer(pulse, config, prop, -half, half)
    expected = math.sin(0.5 * pulse.theta) ** 2
    if abs(measured - expected) > CALIBRATION_TOLERANCE:
        raise CalibrationError(
            f"pulse {pulse.label}: plane-wave transfer {measured:.4f}, expected {expected:.4f}", measured)
    return measured
