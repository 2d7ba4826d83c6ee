"""Acceptance suite: one PASS/FAIL line per criterion (shown in the pytest summary).

Criteria 7-9 share one desk-scale run (configs/desk.cfg); the collision with
interaction calibration dominates the runtime (a few minutes on one core).
"""
import math
import os
import time

import numpy as np
import pytest
from scipy.optimize import curve_fit

from dualbell import analysis as A
from dualbell import oracle
from dualbell import sequence as S
from dualbell.cli import memory_estimate, available_memory
from dualbell.config import HBAR, GridSpec, load_config
from dualbell.grid import (BraggPotential, InteractionPotential, Propagator, SquareEnvelope, TrapPotential,
                           WaveFunction4D, load_snapshot, momentum_density, norm, position_density,
                           product_state, save_snapshot)
from dualbell.grid.wavefunction import gaussian_1d

from conftest import ACCEPTANCE_LINES, small_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DESK = os.path.join(ROOT, "configs", "desk.cfg")
FULL = os.path.join(ROOT, "configs", "full_scale.cfg")


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1, 2: four-mode model ------------------------------------------------------------

def test_criterion_01_oracle_chsh():
    t0 = time.perf_counter()
    S_opt = oracle.chsh(*oracle.optimal_phase_settings(math.pi / 2))
    rng = np.random.default_rng(2024)
    s = oracle.random_settings(rng, 100_000)
    S_rand = oracle.chsh_batch(s[:, 0], s[:, 1], s[:, 2], s[:, 3])
    dt = time.perf_counter() - t0
    ok = abs(abs(S_opt) - 2 * math.sqrt(2)) <= 1e-10 and np.max(np.abs(S_rand)) <= 2 * math.sqrt(2) + 1e-12 \
        and dt < 1.0
    report(1, ok, f"|S| = {abs(S_opt):.12f} at the optimal phases; max |S| over 1e5 random settings = "
                  f"{np.max(np.abs(S_rand)):.12f}; {dt:.2f} s")


def test_criterion_02_oracle_surface():
    t0 = time.perf_counter()
    v = np.linspace(0, 2 * math.pi, 10, endpoint=False) + 0.1
    tA, tB, pA, pB = np.meshgrid(v, v, v, v, indexing="ij")
    e_pipe = oracle.correlator_batch(tA, tB, pA, pB)
    e_closed = oracle.correlator_closed_form(tA, tB, pA, pB)
    err = float(np.max(np.abs(e_pipe - e_closed)))
    # the scalar pipeline on a subset (independent of the batched matrices)
    idx = np.random.default_rng(1).integers(0, 10, size=(50, 4))
    err_scalar = max(abs(oracle.correlator(oracle.bell_sequence(v[a], v[b], v[c], v[d]))
                         - e_closed[a, b, c, d]) for a, b, c, d in idx)
    e0 = oracle.correlator_batch(tA[..., 0, 0], tB[..., 0, 0], 0.0, 0.0)
    err0 = float(np.max(np.abs(e0 - np.cos(tA[..., 0, 0] + tB[..., 0, 0]))))
    dt = time.perf_counter() - t0
    ok = err <= 1e-12 and err_scalar <= 1e-12 and err0 <= 1e-14 and dt < 1.0
    report(2, ok, f"max |E_pipeline - E_closed| = {max(err, err_scalar):.2e} on 1e4 settings; "
                  f"phi = 0 deviation from cos(theta_A+theta_B) = {err0:.1e}; {dt:.2f} s")


# -- 3-5: propagator ------------------------------------------------------------------

def test_criterion_03_unitarity():
    t0 = time.perf_counter()
    desk = load_config(DESK)
    grid = GridSpec.commensurate(41, 22, desk.p_k, 1e-7)
    cfg = desk.replace(grid=grid)
    psi = S.split_B(S.prepare_initial_state(cfg), cfg)
    k = cfg.p_k / HBAR
    pots = [TrapPotential(cfg.trap_frequencies, cfg.masses),
            InteractionPotential(0.45 * cfg.units.energy, cfg.interaction_sigma, grid.box_length),
            BraggPotential("A", SquareEnvelope(HBAR * cfg.species_A.rabi_frequency), k, 2e5, 0.3),
            BraggPotential("B", SquareEnvelope(HBAR * cfg.species_B.rabi_frequency), k, -2e5, 1.1)]
    Propagator(grid, cfg.masses, cfg.units).evolve(psi, pots, 1000)
    dev = abs(norm(psi) - 1)
    dt = time.perf_counter() - t0
    report(3, dev < 1e-9 and dt < 300, f"|norm - 1| = {dev:.2e} after 1000 steps on 41^4 with trap, "
                                        f"interaction and both lattices; {dt:.0f} s")


def test_criterion_04_free_dispersion():
    t0 = time.perf_counter()
    cfg = small_config()
    n, dx = 65, 0.87e-6
    grid = GridSpec(n, dx, 1e-5)
    x = grid.positions()
    sigma0 = 2.2e-6
    masses = cfg.masses
    psi = product_state(grid, [gaussian_1d(x, sigma0)] * 4, masses=masses)
    prop = Propagator(grid, masses, cfg.units)
    worst = 0.0
    for i in range(1, 11):
        prop.free_flight(psi, 1e-4)
        t = i * 1e-4
        for sp, m in (("A", masses[0]), ("B", masses[1])):
            d = position_density(psi, sp)
            var_x = float(np.sum(d.sum(axis=1) * x ** 2) / np.sum(d))
            var_z = float(np.sum(d.sum(axis=0) * x ** 2) / np.sum(d))
            expect = sigma0 * math.sqrt(1 + (HBAR * t / (2 * m * sigma0 ** 2)) ** 2)
            for var in (var_x, var_z):
                worst = max(worst, abs(math.sqrt(var) / expect - 1))
    dt = time.perf_counter() - t0
    report(4, worst < 1e-6 and dt < 60, f"max relative width error {worst:.1e} over 1 ms "
                                         f"(10 checkpoints, both species); {dt:.0f} s")


def test_criterion_05_convergence_order():
    t0 = time.perf_counter()
    cfg = small_config()
    psi0 = S.split_B(S.prepare_initial_state(cfg), cfg)
    prop = Propagator(cfg.grid, cfg.masses, cfg.units)
    k = cfg.p_k / HBAR
    e = cfg.units.energy
    pots = [TrapPotential((3e5, 3e5), cfg.masses),
            InteractionPotential(0.5 * e, cfg.interaction_sigma, cfg.grid.box_length),
            BraggPotential("A", SquareEnvelope(HBAR * 2e6), k, 3e5, 0.3),
            BraggPotential("B", SquareEnvelope(HBAR * 2e6), k, -3e5, 0.1)]
    T, dt0 = 1.6e-6, 2e-7

    def run(dt):
        p = psi0.copy()
        prop.evolve(p, pots, int(round(T / dt)), dt=dt)
        return p.amplitudes

    ref = run(dt0 / 8)
    e1 = np.linalg.norm(run(dt0) - ref)
    e2 = np.linalg.norm(run(dt0 / 2) - ref)
    ratio = e1 / e2
    dt = time.perf_counter() - t0
    report(5, 3.5 <= ratio <= 4.5 and dt < 600,
           f"error ratio {ratio:.3f} for dt = 0.2 -> 0.1 us against a dt/8 reference; {dt:.0f} s")


# -- 6: Bragg pulses ------------------------------------------------------------------

def _rabi_fit(cfg, target):
    prop = S.make_propagator(cfg)
    sp = cfg.species_A if target == "A" else cfg.species_B
    omega, dt = sp.rabi_frequency, cfg.grid.time_step
    n_pi = int(round(math.pi / (omega * dt)))
    steps = np.unique(np.linspace(1, 3 * n_pi, 40).astype(int))
    ref = S.make_pulse(cfg, target, math.pi, 0.0, 0.0)
    frac = []
    for n in steps:
        p = S.PulseSpec(target, omega * n * dt, 0.0, "square", n * dt, 0.0, ref.detuning,
                        ref.lattice_wavevector, omega, dt)
        frac.append(S.single_axis_transfer(p, cfg, prop, -0.5 * cfg.p_k, 0.5 * cfg.p_k))
    t, frac = steps * dt, np.array(frac)
    (w,), _ = curve_fit(lambda tt, w: np.sin(0.5 * w * tt) ** 2, t, frac, p0=[omega])
    resid = frac - np.sin(0.5 * w * t) ** 2
    return 1 - np.sum(resid ** 2) / np.sum((frac - frac.mean()) ** 2)


def test_criterion_06_bragg_calibration():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, path in (("desk", DESK), ("full-scale", FULL)):
        cfg = load_config(path)
        prop = S.make_propagator(cfg)
        for tgt in "AB":
            r2 = _rabi_fit(cfg, tgt)
            half = S.single_axis_transfer(S.make_pulse(cfg, tgt, math.pi / 2, 0.0, 0.0), cfg, prop,
                                          -0.5 * cfg.p_k, 0.5 * cfg.p_k)
            full = S.single_axis_transfer(S.make_pulse(cfg, tgt, math.pi, 0.0, 0.0), cfg, prop,
                                          -0.5 * cfg.p_k, 0.5 * cfg.p_k)
            ok &= r2 > 0.999 and abs(half - 0.5) <= 0.02 and full >= 0.96
            parts.append(f"{name} {tgt}: R2 {r2:.5f}, pi/2 {half:.4f}, pi {full:.4f}")
    dt = time.perf_counter() - t0
    report(6, ok and dt < 600, "; ".join(parts) + f"; {dt:.0f} s")


# -- 7-9: desk-scale sequence ---------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    cfg = load_config(DESK)
    out = str(tmp_path_factory.mktemp("desk"))
    t0 = time.perf_counter()
    psi, schedule, snaps, g, frac, ck = S.run_to_mixing(cfg, out, checkpoint=True)
    return {"cfg": cfg, "dir": out, "premix": psi, "g": g, "fraction": frac,
            "runtime": time.perf_counter() - t0}


def test_criterion_07_halo_geometry(desk_run):
    t0 = time.perf_counter()
    cfg, out = desk_run["cfg"], desk_run["dir"]
    dt = cfg.grid.time_step
    before = load_snapshot(os.path.join(out, "stage_1_split_B.bwf4"), dt)
    after = load_snapshot(os.path.join(out, "stage_2_collide.bwf4"), dt)
    prop = S.make_propagator(cfg)
    prop.free_flight(before, after.time - before.time)
    # scattered wave: the collided field minus the interaction-free evolution
    scat = WaveFunction4D(after.amplitudes - before.amplitudes, cfg.grid, after.time, cfg.masses)
    geo = cfg.geometry
    cx, cz, r = A.ring_fit(momentum_density(scat, "A"), cfg.grid, sign=1)
    err_c = abs(cz / geo.halo_center_A - 1)
    err_r = abs(r / geo.halo_radius - 1)
    px = geo.mode_points()["B_up"][0]
    ridges = A.ridge_positions(A.slice_joint_density(scat, -px, px), cfg.grid, cfg.p_k)
    dp = cfg.grid.momentum_step
    ok_ridge = abs(ridges["plus"] - cfg.p_k) <= dp and abs(ridges["minus"] + cfg.p_k) <= dp
    ok = err_c <= 0.05 and err_r <= 0.05 and ok_ridge
    elapsed = desk_run["runtime"] + time.perf_counter() - t0
    report(7, ok and elapsed < 1800,
           f"A ring centre {cz / cfg.p_k:.4f} p_k (expected {geo.halo_center_A / cfg.p_k:.4f}), radius "
           f"{r / cfg.p_k:.4f} p_k (expected {geo.halo_radius / cfg.p_k:.4f}); ridges at "
           f"{ridges['plus'] / cfg.p_k:+.4f}, {ridges['minus'] / cfg.p_k:+.4f} p_k "
           f"(tolerance {dp / cfg.p_k:.4f}); desk run {elapsed:.0f} s")


def test_criterion_08_initial_correlation(desk_run):
    cfg, psi = desk_run["cfg"], desk_run["premix"]
    r = cfg.region_radius_cells * cfg.grid.momentum_step
    (_, e_half), (_, e_full) = A.radius_convergence(psi, cfg.geometry, [0.5 * r, r])
    ok = e_full >= 0.90 and abs(e_full - e_half) < 0.02
    report(8, ok, f"unmixed E = {e_full:.4f} at {cfg.region_radius_cells:g} momentum steps, "
                  f"{e_half:.4f} at half the radius (change {abs(e_full - e_half):.4f}); "
                  f"scattered fraction {desk_run['fraction']:.4f}")


def test_criterion_09_bell_violation(desk_run):
    t0 = time.perf_counter()
    cfg = desk_run["cfg"]
    th = np.linspace(0, math.pi, 5)
    res = A.scan_correlator(cfg, th, th, include_chsh=True, output_dir=desk_run["dir"], checkpoint=True)
    failed = sum(r.status != "ok" for r in res.rows)
    ok = failed == 0 and res.visibility >= 0.85 and res.rms_residual < 0.1 and res.chsh is not None \
        and abs(res.chsh) > 2
    elapsed = desk_run["runtime"] + time.perf_counter() - t0
    s_txt = f"{res.chsh:+.4f}" if res.chsh is not None else "n/a"
    report(9, ok and elapsed < 4 * 3600,
           f"V = {res.visibility:.4f}, RMS residual = {res.rms_residual:.4f} over 5x5 settings, "
           f"S = {s_txt}; {elapsed:.0f} s")


# -- 10, 11 -------------------------------------------------------------------------

def test_criterion_10_full_scale_feasibility():
    cfg = load_config(FULL)
    est = memory_estimate(cfg)
    gb = est["field_bytes"] / 1e9
    avail = available_memory() or 0
    estimate_ok = est["points_per_dim"] == 121 and 3.3 < gb < 3.5
    if not estimate_ok:
        report(10, False, f"memory estimate {gb:.2f} GB per field")
    if avail < est["working_bytes"]:
        line = (f"criterion 10: FAIL  estimate {gb:.2f} GB per field at 121 points/dim (expected ~3.4); "
                f"the run needs {est['working_bytes'] / 1e9:.1f} GB ({est['working_fields']} fields) and "
                f"{avail / 1e9:.1f} GB is available, so the completion part was not attempted")
        ACCEPTANCE_LINES.append(line)
        print(line)
        pytest.xfail("full-scale run does not fit in this machine's memory")
    res = S.run_sequence(cfg)
    report(10, norm(res.psi) == pytest.approx(1.0, abs=1e-6),
           f"estimate {gb:.2f} GB per field; full-scale run completed")


def test_criterion_11_snapshot_roundtrip(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    same = 0
    for i in range(10):
        n = int(rng.choice([9, 11, 13, 15, 17, 19, 21, 23]))
        grid = GridSpec(n, float(rng.uniform(1e-8, 1e-6)), 1e-7)
        amp = rng.standard_normal((n,) * 4) + 1j * rng.standard_normal((n,) * 4)
        rep = "momentum" if i % 2 else "position"
        psi = WaveFunction4D(amp, grid, float(rng.uniform(0, 1e-3)), (float(rng.uniform(1e-27, 1e-26)),) * 2,
                             representation=rep)
        path = save_snapshot(psi, tmp_path / f"f{i}.bwf4")
        back = load_snapshot(path)
        same += (back.amplitudes.tobytes() == psi.amplitudes.tobytes() and back.time == psi.time
                 and back.masses == psi.masses and back.representation == rep
                 and back.grid.spatial_step == grid.spatial_step)
    dt = time.perf_counter() - t0
    report(11, same == 10 and dt < 60, f"{same}/10 random fields bit-identical after save/load; {dt:.1f} s")
