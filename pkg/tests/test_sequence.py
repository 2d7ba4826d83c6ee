import dataclasses
import json
import math
import os

import numpy as np
import pytest
from scipy.optimize import curve_fit

from dualbell import analysis as A
from dualbell import sequence as S
from dualbell.config import HBAR
from dualbell.errors import CalibrationError, SequencingError, StageError
from dualbell.grid import Propagator, momentum_density, norm, to_momentum_space, to_position_space
from dualbell.oracle import ModeState, bell_sequence, bell_state, correlator

from conftest import FAST_RABI, small_config

# a split Rabi frequency at a depletion optimum of the two-lattice split on
# the 21^4 test grid (found by scanning; the response oscillates with Omega)
SMALL_SPLIT_RABI = 6e5


@pytest.fixture(scope="module")
def small_run():
    return S.run_sequence(small_config(theta_A=math.pi / 2, theta_B=math.pi / 2), keep_premix=True)


def _reduced_density_A(psi):
    n = psi.grid.points_per_dim
    m = psi.amplitudes.reshape(n * n, n * n)
    return m @ m.conj().T * psi.cell_volume


def _lobes(cfg, state: ModeState, width_cells=1.0):
    """Position-space four-lobe field on the mode points, at time 0."""
    phi = A.four_lobe_state(cfg.grid, cfg.geometry, state, width_cells, masses=cfg.masses)
    return to_position_space(phi)


def _region_stats(psi, regions, key):
    """(weight, centroid p_x, centroid p_z) of one species' momentum density in a region."""
    reg = regions[key]
    d = momentum_density(psi, reg.species) * psi.grid.momentum_step ** 2
    m = reg.mask(psi.grid)
    p = psi.grid.momenta()
    px, pz = np.meshgrid(p, p, indexing="ij")
    w = float(d[m].sum())
    return w, float((d * px)[m].sum() / w), float((d * pz)[m].sum() / w)


# -- pulses -------------------------------------------------------------------

def test_square_pulse_area_is_exact(cfg):
    for theta in (math.pi / 2, math.pi, 2.0):
        p = S.make_pulse(cfg, "A", theta, 0.3, 5e-6)
        assert p.rabi_frequency * p.effective_area() == pytest.approx(theta, rel=1e-12)
        assert p.center == pytest.approx(5e-6, abs=0.51 * cfg.grid.time_step)


def test_gaussian_pulse_area_is_exact(cfg):
    c = cfg.replace(envelope="gaussian", gaussian_sigma=(0.3e-6, 0.3e-6))
    p = S.make_pulse(c, "B", math.pi, 0.0, 5e-6)
    assert p.envelope == "gaussian"
    assert p.rabi_frequency * p.effective_area() == pytest.approx(math.pi, rel=1e-12)
    assert p.envelope_samples().max() == pytest.approx(1.0, abs=0.05)


def test_pulse_area_mismatch_is_a_calibration_error(cfg):
    p = S.make_pulse(cfg, "A", math.pi, 0.0, 5e-6)
    with pytest.raises(CalibrationError):
        S.PulseSpec(p.target, p.theta, p.phi, p.envelope, p.duration, p.start_time, p.detuning,
                    p.lattice_wavevector, 1.05 * p.rabi_frequency, p.time_step)


def test_pulse_validation(cfg):
    with pytest.raises(SequencingError):
        S.make_pulse(cfg, "A", 0.0, 0.0, 5e-6)
    p = S.make_pulse(cfg, "A", math.pi, 0.0, 5e-6)
    with pytest.raises(SequencingError):
        S.PulseSpec("C", p.theta, p.phi, p.envelope, p.duration, p.start_time, p.detuning,
                    p.lattice_wavevector, p.rabi_frequency, p.time_step)


def test_halo_pulses_are_resonant(cfg):
    # the halo modes -p_k/2 -> +p_k/2 are degenerate: zero two-photon detuning
    for tgt in "AB":
        assert S.make_pulse(cfg, tgt, math.pi, 0.0, 5e-6).detuning == pytest.approx(0.0, abs=1e-6)


def test_plane_wave_calibration(cfg):
    prop = S.make_propagator(cfg)
    for tgt in "AB":
        mirror = S.make_pulse(cfg, tgt, math.pi, 0.0, 5e-6)
        assert S.check_pulse_calibration(mirror, cfg, prop) >= 0.96
        half = S.make_pulse(cfg, tgt, math.pi / 2, 0.0, 5e-6)
        assert S.single_axis_transfer(half, cfg, prop, -0.5 * cfg.p_k, 0.5 * cfg.p_k) == pytest.approx(0.5, abs=0.02)


def test_rabi_oscillation_fits_sine_squared():
    base = small_config()
    cfg = base.replace(species_A=dataclasses.replace(base.species_A, rabi_frequency=math.pi / 20e-6))
    prop = S.make_propagator(cfg)
    omega = cfg.species_A.rabi_frequency
    dt = cfg.grid.time_step
    steps = np.arange(10, 420, 10)
    frac = []
    for n in steps:
        p = S.make_pulse(cfg, "A", math.pi, 0.0, 0.0)
        p = S.PulseSpec("A", omega * n * dt, 0.0, "square", n * dt, 0.0, p.detuning, p.lattice_wavevector,
                        omega, dt)
        frac.append(S.single_axis_transfer(p, cfg, prop, -0.5 * cfg.p_k, 0.5 * cfg.p_k))
    t = steps * dt
    frac = np.array(frac)
    (w_fit,), _ = curve_fit(lambda tt, w: np.sin(0.5 * w * tt) ** 2, t, frac, p0=[omega])
    resid = frac - np.sin(0.5 * w_fit * t) ** 2
    r2 = 1 - np.sum(resid ** 2) / np.sum((frac - frac.mean()) ** 2)
    assert r2 > 0.999
    assert w_fit == pytest.approx(omega, rel=0.02)


# -- schedule -----------------------------------------------------------------

def test_schedule_order_and_timing(cfg):
    sched = S.build_schedule(cfg)
    assert [s.name for s in sched.stages] == list(S.STAGES)
    starts = [s.start for s in sched.stages]
    assert starts == sorted(starts)
    for name in ("mirror_A", "mirror_B"):
        st = sched.stage(name)
        assert st.start + 0.5 * st.duration == pytest.approx(cfg.t1, abs=0.51 * cfg.grid.time_step)
    for name in ("mix_A", "mix_B"):
        st = sched.stage(name)
        assert st.start + 0.5 * st.duration == pytest.approx(cfg.t2, abs=0.51 * cfg.grid.time_step)
    assert sched.stage("expand").start + sched.stage("expand").duration == pytest.approx(cfg.total_duration)
    assert cfg.t2 == pytest.approx(2 * cfg.t1)


def test_schedule_manifest_text(cfg):
    text = S.build_schedule(cfg).to_text()
    rows = [ln.split("\t") for ln in text.splitlines() if not ln.startswith("#")]
    assert [r[0] for r in rows] == list(S.STAGES)
    for r in rows:
        float(r[1]), float(r[2])
        assert isinstance(json.loads(r[3]), dict)
    assert "state_prep_mode = idealized" in text


def test_schedule_zero_area_mixing_is_recorded_empty(cfg):
    sched = S.build_schedule(cfg.replace(theta_A=0.0, theta_B=0.0))
    assert sched.stage("mix_A").duration == 0.0 and sched.stage("mix_A").params["theta"] == 0.0


def test_schedule_rejects_overlaps(cfg):
    cfg = cfg.replace(theta_A=math.pi / 2, theta_B=math.pi / 2)
    pulses = S.build_pulses(cfg)
    early = [dataclasses.replace(p, start_time=0.5 * cfg.collision_duration) if p.label == "mirror_A" else p
             for p in pulses]
    with pytest.raises(SequencingError, match="collision"):
        S.build_schedule(cfg, early)
    late = [dataclasses.replace(p, start_time=cfg.t1) if p.label == "mirror_B" else p for p in pulses]
    late = [dataclasses.replace(p, start_time=cfg.t1 + 0.1e-6) if p.label == "mix_A" else p for p in late]
    with pytest.raises(SequencingError, match="overlap"):
        S.build_schedule(cfg, late)


def test_physical_schedule_puts_split_before_zero(cfg):
    c = cfg.replace(state_prep_mode="physical", split_rabi_frequency=SMALL_SPLIT_RABI)
    st = S.build_schedule(c).stage("split_B")
    assert st.duration > 0 and st.start + st.duration == pytest.approx(0.0, abs=1e-15)
    assert S.split_duration(c) == pytest.approx(math.pi / (math.sqrt(2) * SMALL_SPLIT_RABI),
                                                abs=cfg.grid.time_step)


# -- preparation and splitting ------------------------------------------------

def test_prepared_state(cfg):
    psi = S.prepare_initial_state(cfg)
    assert norm(psi) == pytest.approx(1.0, abs=1e-12)
    g = cfg.grid
    x = g.positions()
    p = g.momenta()
    for sp, m, w in (("A", cfg.masses[0], cfg.trap_frequencies[0]), ("B", cfg.masses[1], cfg.trap_frequencies[1])):
        from dualbell.grid import position_density
        d = position_density(psi, sp).sum(axis=0) * g.spatial_step
        assert float(np.sum(d * x) * g.spatial_step) == pytest.approx(0.0, abs=1e-12 * g.box_length)
        pd = momentum_density(psi, sp).sum(axis=0) * g.momentum_step
        assert float(np.sum(pd * p) * g.momentum_step) == pytest.approx(0.0, abs=1e-9 * g.momentum_step)
        width = math.sqrt(float(np.sum(pd * p ** 2) * g.momentum_step))
        sigma = math.sqrt(HBAR / (2 * m * w))
        assert width == pytest.approx(HBAR / (2 * sigma), rel=0.05)


def test_idealized_split(cfg):
    psi = S.prepare_initial_state(cfg)
    before = momentum_density(psi, "A")
    psi = S.split_B(psi, cfg)
    w = S.split_weights(psi, cfg)
    # only the Gaussian tails beyond +-p_k/2 of each peak are misbinned
    assert w["minus"] == pytest.approx(0.5, abs=1e-5) and w["plus"] == pytest.approx(0.5, abs=1e-5)
    assert w["rest"] < 1e-5
    d = momentum_density(psi, "B").sum(axis=0)
    p = cfg.grid.momenta()
    peaks = sorted(p[np.argsort(d)[-2:]])
    assert peaks[0] == pytest.approx(-cfg.p_k) and peaks[1] == pytest.approx(cfg.p_k)
    assert np.max(np.abs(momentum_density(psi, "A") - before)) < 1e-12 * before.max()


def test_physical_split(cfg):
    c = cfg.replace(state_prep_mode="physical", split_rabi_frequency=SMALL_SPLIT_RABI)
    psi = S.prepare_initial_state(c)
    before = momentum_density(psi, "A")
    psi = S.split_B(psi, c)
    w = psi.metadata["split_weights"]
    assert w["rest"] < 0.05
    assert w["minus"] == pytest.approx(0.5, abs=0.02) and w["plus"] == pytest.approx(0.5, abs=0.02)
    assert psi.time == pytest.approx(0.0, abs=1e-15)
    assert np.max(np.abs(momentum_density(psi, "A") - before)) < 1e-12 * before.max()


def test_physical_split_failure_is_reported(cfg):
    c = cfg.replace(state_prep_mode="physical", split_rabi_frequency=2.1e5)
    with pytest.raises(CalibrationError) as err:
        S.split_B(S.prepare_initial_state(c), c)
    assert err.value.measured > 0.05


# -- collision ----------------------------------------------------------------

def test_zero_interaction_equals_free_flight(cfg):
    psi = S.split_B(S.prepare_initial_state(cfg), cfg)
    prop = S.make_propagator(cfg)
    free = psi.copy()
    prop.free_flight(free, cfg.collision_duration)
    out = S.collide(psi, cfg, propagator=prop, strength=0.0)
    ov = np.vdot(free.amplitudes, out.amplitudes) * out.cell_volume
    assert abs(1 - abs(ov) ** 2) < 1e-10
    assert out.metadata["scattered_fraction"] < 1e-10


def test_strong_interaction_warns(cfg):
    psi = S.split_B(S.prepare_initial_state(cfg), cfg)
    with pytest.warns(RuntimeWarning, match="single-pair"):
        S.collide(psi, cfg, strength=60 * cfg.units.energy)


def test_calibrated_interaction_in_band(small_run):
    lo, hi = S.SCATTERED_FRACTION_BAND
    assert lo <= small_run.scattered_fraction <= hi
    assert small_run.interaction_strength > 0


def test_unmixed_state_is_correlated(small_run, cfg):
    regions = A.default_mode_regions(cfg.geometry, cfg.grid)
    assert A.joint_weights(small_run.premix, regions).E >= 0.9


def test_mixing_at_zero_phase_anticorrelates(small_run, cfg):
    # pi/2 + pi/2 at phi = 0: normalized weights (0, 0.5, 0.5, 0) up to the premix contrast
    regions = A.default_mode_regions(cfg.geometry, cfg.grid)
    w = A.joint_weights(small_run.psi, regions).normalized
    assert w[1] == pytest.approx(0.5, abs=0.03) and w[2] == pytest.approx(0.5, abs=0.03)
    assert w[0] < 0.03 and w[3] < 0.03


def test_run_preserves_norm(small_run):
    assert norm(small_run.psi) == pytest.approx(1.0, abs=1e-9)
    assert small_run.psi.time == pytest.approx(small_config().total_duration)


# -- pulses on the grid -------------------------------------------------------

def test_mirror_swaps_and_reverses_lobes(cfg):
    state = ModeState(np.array([0.8, 0.0, 0.0, 0.6]))
    psi = _lobes(cfg, state)
    regions = A.default_mode_regions(cfg.geometry, cfg.grid)
    before = {k: _region_stats(psi, regions, k) for k in A.MODE_KEYS}
    mirror = [p for p in S.build_pulses(cfg) if p.label.startswith("mirror")]
    psi.time = min(p.start_time for p in mirror)
    S.pulse_stage(psi, mirror, S.make_propagator(cfg))
    after = {k: _region_stats(psi, regions, k) for k in A.MODE_KEYS}
    dp = cfg.grid.momentum_step
    for up, down in (("A_up", "A_down"), ("B_up", "B_down")):
        assert after[down][0] == pytest.approx(before[up][0], abs=0.02)
        assert after[up][0] == pytest.approx(before[down][0], abs=0.02)
        # lobe momenta reversed along z (p_z -> p_z - p_k and back), p_x kept
        assert abs(after[down][2] - (before[up][2] - cfg.p_k)) < dp
        assert abs(after[up][2] - (before[down][2] + cfg.p_k)) < dp
        assert abs(after[down][1] - before[up][1]) < dp


def test_half_pulse_splits_single_lobe(cfg):
    state = ModeState(np.array([1.0, 0.0, 0.0, 0.0]))
    psi = _lobes(cfg, state)
    regions = A.default_mode_regions(cfg.geometry, cfg.grid)
    pulse = S.make_pulse(cfg, "A", math.pi / 2, 0.0, 1e-6)
    psi.time = pulse.start_time
    S.apply_bragg(psi, pulse, S.make_propagator(cfg))
    w_up = _region_stats(psi, regions, "A_up")[0]
    w_down = _region_stats(psi, regions, "A_down")[0]
    assert w_up / (w_up + w_down) == pytest.approx(0.5, abs=0.02)


def test_pulse_on_B_leaves_A_reduced_state(cfg):
    psi = _lobes(cfg, bell_state())
    prop = S.make_propagator(cfg)
    pulse = S.make_pulse(cfg, "B", math.pi / 2, 0.4, 1e-6)
    psi.time = pulse.start_time
    free = psi.copy()
    prop.free_flight(free, pulse.n_steps * pulse.time_step)
    S.apply_bragg(psi, pulse, prop)
    ra, rf = _reduced_density_A(psi), _reduced_density_A(free)
    assert np.max(np.abs(ra - rf)) < 1e-9 * np.max(np.abs(rf))
    assert np.max(np.abs(momentum_density(psi, "A") - momentum_density(free, "A"))) < 1e-9 * np.max(
        momentum_density(free, "A"))


def _mixed_E(cfg, prop, base, regions, phi_a, phi_b=0.0):
    psi = base.copy()
    pa = S.make_pulse(cfg, "A", math.pi / 2, phi_a, 1e-6)
    pb = S.make_pulse(cfg, "B", math.pi / 2, phi_b, 1e-6)
    psi.time = pa.start_time
    S.pulse_stage(psi, [pa, pb], prop)
    return A.joint_weights(psi, regions).E


def test_phase_pushforward_shifts_fringe(cfg):
    base = _lobes(cfg, bell_state())
    prop = S.make_propagator(cfg)
    regions = A.default_mode_regions(cfg.geometry, cfg.grid)
    phis = np.linspace(0, 2 * math.pi, 9, endpoint=False)

    def fringe_phase(offset):
        e = np.array([_mixed_E(cfg, prop, base, regions, ph + offset) for ph in phis])
        c, s = np.cos(phis), np.sin(phis)
        a, b = np.linalg.lstsq(np.stack([c, s], axis=1), e, rcond=None)[0]
        return math.atan2(-b, a), e

    delta = 0.7
    ph0, e0 = fringe_phase(0.0)
    ph1, _ = fringe_phase(delta)
    shift = (ph1 - ph0 + math.pi) % (2 * math.pi) - math.pi
    assert shift == pytest.approx(delta, rel=0.01)
    # and the fringe itself follows the four-mode model
    oracle = np.array([correlator(bell_sequence(math.pi / 2, math.pi / 2, ph, 0.0, mirror=False))
                       for ph in phis])
    assert np.max(np.abs(e0 - oracle)) < 0.05


def test_lobes_overlap_at_mixing_time(small_run, cfg):
    regions = A.default_mode_regions(cfg.geometry, cfg.grid)
    c = A.lobe_centroids(small_run.premix, regions)
    for up, down in (("A_up", "A_down"), ("B_up", "B_down")):
        sep = math.hypot(c[up][0] - c[down][0], c[up][1] - c[down][1])
        assert sep < min(c[up][2], c[down][2])


# -- checkpoints, resume, errors -----------------------------------------------

class _Kill(Exception):
    pass


def test_checkpoint_files_and_manifest(tmp_path, cfg):
    res = S.run_sequence(cfg, str(tmp_path), checkpoint=True)
    names = sorted(os.listdir(tmp_path))
    assert "progress.json" in names
    for stage in ("split_B", "collide", "mirror_B", "mix_B", "expand"):
        assert f"stage_{S.STAGES.index(stage)}_{stage}.bwf4" in names
    assert all(os.path.exists(p) for p in res.snapshots)
    assert res.schedule.stage("collide").snapshot == "stage_2_collide.bwf4"


def test_resume_after_stage_kill(tmp_path, cfg):
    ref = S.run_sequence(cfg)

    def killer(msg):
        if msg == "mirror pulses":
            raise _Kill()

    with pytest.raises(_Kill):
        S.run_sequence(cfg, str(tmp_path), checkpoint=True, progress=killer)
    messages = []
    res = S.run_sequence(cfg, str(tmp_path), checkpoint=True, progress=messages.append)
    assert "resumed after collision" in messages
    assert np.max(np.abs(res.psi.amplitudes - ref.psi.amplitudes)) <= 1e-12 * np.max(np.abs(ref.psi.amplitudes))
    assert res.interaction_strength == ref.interaction_strength


def test_resume_mid_collision(tmp_path, cfg, monkeypatch):
    c = cfg.replace(interaction_strength=0.45 * cfg.units.energy, checkpoint_interval=10)
    ref = S.run_sequence(c)
    orig = S._Checkpointer.save_partial

    def save_then_kill(self, stage, step, psi):
        orig(self, stage, step, psi)
        if step == 20:
            raise _Kill()

    monkeypatch.setattr(S._Checkpointer, "save_partial", save_then_kill)
    with pytest.raises(_Kill):
        S.run_sequence(c, str(tmp_path), checkpoint=True)
    monkeypatch.setattr(S._Checkpointer, "save_partial", orig)
    messages = []
    res = S.run_sequence(c, str(tmp_path), checkpoint=True, progress=messages.append)
    assert "resumed collision at step 20" in messages
    assert np.max(np.abs(res.psi.amplitudes - ref.psi.amplitudes)) <= 1e-12 * np.max(np.abs(ref.psi.amplitudes))


def test_checkpoint_of_other_config_is_ignored(tmp_path, cfg):
    def killer(msg):
        if msg == "mirror pulses":
            raise _Kill()

    with pytest.raises(_Kill):
        S.run_sequence(cfg, str(tmp_path), checkpoint=True, progress=killer)
    messages = []
    S.run_sequence(cfg.replace(theta_A=1.0), str(tmp_path), checkpoint=True, progress=messages.append)
    assert not any(m.startswith("resumed") for m in messages)


def test_run_is_deterministic(cfg):
    a = S.run_sequence(cfg).psi.amplitudes
    b = S.run_sequence(cfg).psi.amplitudes
    assert np.array_equal(a, b)


def test_stage_error_names_stage_and_snapshot(tmp_path, cfg):
    bad = cfg.replace(area_calibration=(1.12, 1.0))
    with pytest.raises(StageError) as err:
        S.run_sequence(bad, str(tmp_path), checkpoint=True)
    assert err.value.stage == "mirror_A"
    assert err.value.last_snapshot.endswith("stage_2_collide.bwf4")
    assert os.path.exists(err.value.last_snapshot)
