"""Compare the compiled kernels with the numpy fallback.

Times each kernel on a random N^4 field for both backends, checks that the
results agree, and times one full split-step with each backend plugged in.

    python benchmarks/bench_kernels.py --points 41 --repeats 5
"""
import argparse
import time

import numpy as np

from dualbell.grid import _fallback, kernels


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(compiled, n, repeats, seed=0):
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((n,) * 4) + 1j * rng.standard_normal((n,) * 4)
    facs = [np.exp(1j * rng.standard_normal(n)) for _ in range(4)]
    band = 2 * n
    off_k = rng.integers(-3, 4, band).astype(np.int_)
    off_l = rng.integers(-3, 4, band).astype(np.int_)
    phases = np.exp(1j * rng.standard_normal(band))

    cases = {
        "axis_phase_mul": lambda mod, a: mod.axis_phase_mul(a, *facs),
        "banded_pair_phase": lambda mod, a: mod.banded_pair_phase(a, off_k, off_l, phases),
        "norm_sq": lambda mod, a: mod.norm_sq(a),
    }
    rows = []
    for name, call in cases.items():
        a_py, a_cy = psi.copy(), psi.copy()
        r_py = call(_fallback, a_py)
        r_cy = call(compiled, a_cy)
        if r_py is None:
            err = float(np.max(np.abs(a_py - a_cy)))
        else:
            err = abs(r_py - r_cy) / abs(r_py)
        work = psi.copy()
        t_py = _best(lambda: call(_fallback, work), repeats)
        t_cy = _best(lambda: call(compiled, work), repeats)
        rows.append((name, t_py, t_cy, err))
    return rows


def bench_step(compiled, n, repeats):
    """One full Strang step with all potential kinds, per backend."""
    from dualbell.config import HBAR, GridSpec, RunConfig, helium4
    from dualbell.grid import BraggPotential, SquareEnvelope, TrapPotential
    from dualbell.sequence import interaction_potential, make_propagator, prepare_initial_state

    p_k = helium4().lattice_momentum()
    grid = GridSpec.commensurate(n, max(4, n * 22 // 49), p_k, 1e-7)
    cfg = RunConfig(grid=grid, trap_frequencies=(3e4, 3e4))
    psi = prepare_initial_state(cfg)
    prop = make_propagator(cfg)
    pots = [TrapPotential(cfg.trap_frequencies, cfg.masses),
            interaction_potential(cfg, 0.3 * prop.units.energy),
            BraggPotential("A", SquareEnvelope(HBAR * 1e6), cfg.p_k / HBAR),
            BraggPotential("B", SquareEnvelope(HBAR * 1e6), cfg.p_k / HBAR)]
    out = {}
    for label, impl in (("python", _fallback), ("cython", compiled)):
        saved = kernels._impl
        kernels._impl = impl
        try:
            out[label] = _best(lambda: prop.evolve(psi, pots, 1, advance_time=False), repeats)
        finally:
            kernels._impl = saved
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=41)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the full-step timing")
    args = ap.parse_args(argv)
    try:
        from dualbell.grid import _kernels as compiled
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1

    n = args.points
    print(f"N = {n}  ({n ** 4 * 16 / 1e6:.1f} MB per field), best of {args.repeats}")
    print(f"{'kernel':<20}{'python [s]':>12}{'cython [s]':>12}{'speedup':>10}{'max diff':>12}")
    for name, t_py, t_cy, err in bench_kernels(compiled, n, args.repeats):
        print(f"{name:<20}{t_py:12.4f}{t_cy:12.4f}{t_py / t_cy:10.2f}{err:12.2e}")
    if not args.no_step:
        s = bench_step(compiled, n, args.repeats)
        print(f"{'full step':<20}{s['python']:12.4f}{s['cython']:12.4f}{s['python'] / s['cython']:10.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
