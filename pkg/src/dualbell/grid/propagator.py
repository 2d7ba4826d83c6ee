"""Second-order (Strang) split-step propagation of the two-particle field.

One step of length dt applies

    exp(-i V(t + dt/2) dt / 2hbar) exp(-i T dt / hbar) exp(-i V(t + dt/2) dt / 2hbar)

with T = p3^2 / 2m_A + p4^2 / 2m_B.  The kinetic factor is diagonal in
momentum space and separable over the four axes, so it is applied either with
FFTs or, for grid sizes whose FFT is slow (large prime factors), as four dense
N x N matrices along the axes.  All arithmetic runs in the nondimensional
units of :class:`~dualbell.config.Units`.

Bragg lattices in ``banded`` coupling are exponentiated exactly in the
plane-wave basis of their axis (a Hermitian matrix with entries only at
momentum offsets +-hbar k) and applied as a dense N x N operator along that
axis.

Since species A and B do not interact outside the collision window, a step can
be restricted to one species' axes (``axes=(0, 1)`` or ``(2, 3)``); applying
the A-restricted and B-restricted steps in turn equals the joint step exactly.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.fft as sfft

from ..config import GridSpec, Units, helium4
from ..errors import NumericalBlowupError, SequencingError
from . import kernels
from .potentials import PotentialField
from .wavefunction import WaveFunction4D

# Product-kernel phases smaller than this are skipped (they equal 1 to rounding).
PAIR_PHASE_CUTOFF = 1e-17


def largest_prime_factor(n: int) -> int:
    f, best = 2, 1
    while f * f <= n:
        while n % f == 0:
            best, n = f, n // f
        f += 1
    return max(best, n) if n > 1 else best


def choose_kinetic_method(n: int) -> str:
    """FFT unless the size has a large prime factor, where dense matrices are faster."""
    return "matrix" if largest_prime_factor(n) >= 13 else "fft"


class Propagator:
    """Split-step integrator bound to a grid and a pair of masses."""

    def __init__(self, grid: GridSpec, masses: Sequence[float], units: Optional[Units] = None,
                 method: str = "auto", workers: int = 1, check_finite: bool = True):
        self.grid = grid
        self.masses = tuple(masses)
        self.units = units or Units.from_momentum(helium4().lattice_momentum(), self.masses[1])
        if method == "auto":
            method = choose_kinetic_method(grid.points_per_dim)
        if method not in ("fft", "matrix"):
            raise ValueError(f"unknown kinetic method {method!r}")
        self.method = method
        self.workers = workers
        self.check_finite = check_finite
        u = self.units
        n = grid.points_per_dim
        self.x = grid.positions()  # SI, centred
        self.x_nd = self.x / u.length
        dx_nd = grid.spatial_step / u.length
        self.p_nd = 2 * math.pi * sfft.fftfreq(n, d=dx_nd)  # FFT order
        self.m_nd = tuple(m / u.mass for m in self.masses)
        self._kin_cache = {}
        self._pair_cache = {}
        self._lat_cache = {}
        # centred plane-wave transform: row i = momentum p_i, column j = position x_j
        xc = (np.arange(n) - n // 2) * dx_nd
        pc = (np.arange(n) - n // 2) * (2 * math.pi / (n * dx_nd))
        self._fourier = np.exp(-1j * np.outer(pc, xc)) / math.sqrt(n)
        self.dp_nd = 2 * math.pi / (n * dx_nd)

    # -- kinetic -------------------------------------------------------------
    def _kinetic_factors(self, dt_nd: float):
        key = (self.method, dt_nd)
        if key not in self._kin_cache:
            p2 = self.p_nd ** 2
            fa = np.exp(-1j * dt_nd * p2 / (2 * self.m_nd[0]))
            fb = np.exp(-1j * dt_nd * p2 / (2 * self.m_nd[1]))
            if self.method == "fft":
                val = (fa, fa, fb, fb)
            else:
                n = self.grid.points_per_dim
                eye = np.eye(n)
                F = sfft.fft(eye, axis=0)
                Finv = sfft.ifft(eye, axis=0)
                ka = np.ascontiguousarray(Finv @ (fa[:, None] * F))
                kb = np.ascontiguousarray(Finv @ (fb[:, None] * F))
                val = (ka, kb)
            if len(self._kin_cache) > 8:
                self._kin_cache.clear()
            self._kin_cache[key] = val
        return self._kin_cache[key]

    def kinetic(self, a: np.ndarray, dt_nd: float, axes=(0, 1, 2, 3)) -> np.ndarray:
        """exp(-i T dt) applied to a position-space array; may return a new array.

        ``axes`` restricts the kinetic energy to a subset of coordinates.
        """
        axes = tuple(sorted(axes))
        f = self._kinetic_factors(dt_nd)
        if self.method == "fft":
            full = axes == (0, 1, 2, 3)
            a = sfft.fftn(a, axes=None if full else axes, overwrite_x=True, workers=self.workers)
            ones = None if full else np.ones(self.grid.points_per_dim, dtype=complex)
            kernels.axis_phase_mul(a, *(f[i] if i in axes else ones for i in range(4)))
            return sfft.ifftn(a, axes=None if full else axes, overwrite_x=True, workers=self.workers)
        ka, kb = f
        for ax in axes:
            a = apply_axis_operator(a, ka if ax < 2 else kb, ax)
        return a

    # -- lattices --------------------------------------------------------------
    def _lattice_shift(self, wavevector_si: float) -> int:
        cells = wavevector_si * self.units.length / self.dp_nd
        shift = int(round(cells))
        if shift <= 0 or abs(cells - shift) > 1e-6 * max(1.0, cells):
            raise SequencingError(
                f"lattice momentum is {cells:.6f} momentum steps; banded coupling needs an "
                "integer (choose a commensurate grid or coupling='pointwise')")
        return shift

    def lattice_operator(self, terms, half_dt_nd: float) -> np.ndarray:
        """Position-basis N x N operator exp(-i dt/2 sum_j a_j cos(k_j z - psi_j)).

        ``terms`` is a sequence of (amplitude_nd, shift_cells, psi).
        """
        key = (tuple((round(a, 15), s, round(ph, 15)) for a, s, ph in terms), half_dt_nd)
        op = self._lat_cache.get(key)
        if op is not None:
            return op
        n = self.grid.points_per_dim
        h = np.zeros((n, n), dtype=complex)
        for amp, shift, psi in terms:
            idx = np.arange(n - shift)
            h[idx + shift, idx] += 0.5 * amp * np.exp(-1j * psi)
            h[idx, idx + shift] += 0.5 * amp * np.exp(1j * psi)
        lam, q = np.linalg.eigh(h)
        g = self._fourier.conj().T @ q
        op = np.ascontiguousarray((g * np.exp(-1j * half_dt_nd * lam)) @ g.conj().T)
        if len(self._lat_cache) > 64:
            self._lat_cache.clear()
        self._lat_cache[key] = op
        return op

    # -- potentials ------------------------------------------------------------
    def _pair_band(self, strength_nd: float, sx_nd: float, sz_nd: float, half_dt_nd: float):
        key = (strength_nd, sx_nd, sz_nd, half_dt_nd)
        if key not in self._pair_cache:
            n = self.grid.points_per_dim
            dx_nd = self.grid.spatial_step / self.units.length
            offs = np.arange(n)
            d = (offs + n // 2) % n - n // 2  # minimum-image offsets
            gx = np.exp(-(d * dx_nd) ** 2 / (2 * sx_nd ** 2))
            gz = np.exp(-(d * dx_nd) ** 2 / (2 * sz_nd ** 2))
            ang = half_dt_nd * strength_nd * np.multiply.outer(gx, gz)
            kk, ll = np.nonzero(np.abs(ang) > PAIR_PHASE_CUTOFF)
            phases = np.exp(-1j * ang[kk, ll])
            if len(self._pair_cache) > 8:
                self._pair_cache.clear()
            self._pair_cache[key] = (d[kk].astype(np.int_), d[ll].astype(np.int_),
                                     np.ascontiguousarray(phases))
        return self._pair_cache[key]

    def _sort_potentials(self, potentials: Iterable[PotentialField], t_mid: float):
        """Split active potentials into banded lattices {axis: terms} and diagonal terms."""
        e_u = self.units.energy
        lattices, diagonal = {}, []
        for pot in potentials:
            if not pot.is_active(t_mid):
                continue
            lat = pot.lattice_term(t_mid)
            if lat is not None:
                ax, amp, k, psi = lat
                if amp != 0.0:
                    lattices.setdefault(ax, []).append((amp / e_u, self._lattice_shift(k), psi))
            else:
                diagonal.append(pot)
        return lattices, diagonal

    def potential_half_step(self, a: np.ndarray, potentials: Iterable[PotentialField],
                            t_mid: float, half_dt_nd: float, lattice_first: bool = False,
                            apply_lattices: bool = True) -> float:
        """Apply exp(-i V(t_mid) dt/2) in place; returns max |V| dt/2 (phase) for diagnostics.

        Position-diagonal terms (trap, interaction, pointwise lattices) commute
        with each other but not with banded lattices, so the factor order
        matters: the first half step applies diagonal terms then lattices and
        the second (``lattice_first=True``) the reverse, keeping the step
        symmetric and second order.  ``apply_lattices=False`` leaves the
        lattice factors to the caller (fused into the kinetic matrices).
        """
        e_u = self.units.energy
        n = self.grid.points_per_dim
        axis = [None, None, None, None]
        lattices, diagonal = self._sort_potentials(potentials, t_mid)
        max_phase = sum(abs(amp) * half_dt_nd for terms in lattices.values() for amp, _, _ in terms)
        if not apply_lattices:
            lattices = {}
        if lattice_first:
            self._apply_lattices(a, lattices, half_dt_nd)
        for pot in diagonal:
            terms = pot.axis_terms(self.x, t_mid)
            if terms is not None:
                for i, v in enumerate(terms):
                    if v is not None:
                        axis[i] = v / e_u if axis[i] is None else axis[i] + v / e_u
                continue
            pair = pot.pair_term()
            if pair is not None:
                g, sx, sz = pair
                g_nd = g / e_u
                L = self.units.length
                kk, ll, ph = self._pair_band(g_nd, sx / L, sz / L, half_dt_nd)
                kernels.banded_pair_phase(a, kk, ll, ph)
                max_phase += abs(g_nd) * half_dt_nd
                continue
            # unstructured: evaluate slab by slab to bound memory
            xs = self.x
            for i in range(n):
                v = pot.evaluate(xs[i], xs[:, None, None], xs[None, :, None], xs[None, None, :], t_mid)
                v = np.broadcast_to(np.asarray(v, dtype=float), (n, n, n)) / e_u
                max_phase = max(max_phase, float(np.max(np.abs(v))) * half_dt_nd)
                a[i] *= np.exp(-1j * half_dt_nd * v)
        if any(v is not None for v in axis):
            factors = []
            for v in axis:
                if v is None:
                    factors.append(np.ones(n, dtype=complex))
                else:
                    factors.append(np.exp(-1j * half_dt_nd * v))
                    max_phase += float(np.max(np.abs(v))) * half_dt_nd
            kernels.axis_phase_mul(a, *factors)
        if not lattice_first:
            self._apply_lattices(a, lattices, half_dt_nd)
        return max_phase

    def _apply_lattices(self, a: np.ndarray, lattices: dict, half_dt_nd: float):
        for ax, terms in lattices.items():
            a[...] = apply_axis_operator(a, self.lattice_operator(terms, half_dt_nd), ax)

    # -- stepping --------------------------------------------------------------
    def step_array(self, a: np.ndarray, potentials: Sequence[PotentialField], t: float, dt: float,
                   axes=(0, 1, 2, 3)) -> np.ndarray:
        """One Strang step on a raw position-space array (SI time arguments).

        With ``axes`` set, only those coordinates' kinetic energy is applied;
        the potentials must then act on those coordinates only.
        """
        dt_nd = dt / self.units.time
        t_mid = t + 0.5 * dt
        active = [p for p in potentials if p.is_active(t_mid)]
        phase = 0.0
        lattices = self._sort_potentials(active, t_mid)[0] if self.method == "matrix" else {}
        if lattices:
            # lattice, kinetic and lattice factors act on the same axis and
            # are adjacent in the symmetric product: fuse them per axis
            phase = self.potential_half_step(a, active, t_mid, 0.5 * dt_nd, apply_lattices=False)
            ka, kb = self._kinetic_factors(dt_nd)
            for ax in sorted(set(axes) | set(lattices)):
                op = (ka if ax < 2 else kb) if ax in axes else None
                if ax in lattices:
                    lat = self.lattice_operator(lattices[ax], 0.5 * dt_nd)
                    op = lat @ lat if op is None else lat @ op @ lat
                a = apply_axis_operator(a, op, ax)
            self.potential_half_step(a, active, t_mid, 0.5 * dt_nd, lattice_first=True, apply_lattices=False)
        else:
            if active:
                phase = self.potential_half_step(a, active, t_mid, 0.5 * dt_nd)
            a = self.kinetic(a, dt_nd, axes)
            if active:
                self.potential_half_step(a, active, t_mid, 0.5 * dt_nd, lattice_first=True)
        if self.check_finite and not np.isfinite(a[self.grid.points_per_dim // 2]).all():
            if not np.isfinite(a).all():
                raise NumericalBlowupError(
                    f"non-finite field at t={t:.6g}s; max |V| dt / hbar = {2 * phase:.3g}", 2 * phase)
        return a

    def evolve(self, psi: WaveFunction4D, potentials: Sequence[PotentialField], n_steps: int,
               dt: Optional[float] = None, callback=None, axes=(0, 1, 2, 3),
               advance_time: bool = True) -> WaveFunction4D:
        """Advance ``n_steps`` steps.  The input's amplitude array is consumed.

        ``callback(step_index, psi)`` runs after each step (used for checkpoints).
        ``axes`` restricts the kinetic step (see :meth:`step_array`); with
        ``advance_time=False`` the clock is restored afterwards, which is how
        a species-local pulse is composed with the other species' evolution
        over the same window.
        """
        if psi.representation != "position":
            raise ValueError("propagation needs a position-space field")
        dt = self.grid.time_step if dt is None else dt
        a = psi.amplitudes
        t = psi.time
        t0 = psi.time
        for s in range(n_steps):
            a = self.step_array(a, potentials, t, dt, axes)
            t = t0 + (s + 1) * dt
            if callback is not None:
                psi.amplitudes, psi.time = a, t
                callback(s, psi)
        psi.amplitudes = a
        psi.time = t if advance_time else t0
        if self.check_finite and not np.isfinite(a).all():
            raise NumericalBlowupError(f"non-finite field at t={t:.6g}s")
        return psi

    def free_flight(self, psi: WaveFunction4D, duration: float, axes=(0, 1, 2, 3),
                    advance_time: bool = True) -> WaveFunction4D:
        """Exact potential-free evolution over ``duration`` (a single kinetic factor)."""
        if psi.representation != "position":
            raise ValueError("free_flight needs a position-space field")
        if duration == 0:
            return psi
        dt_nd = duration / self.units.time
        psi.amplitudes = self.kinetic(psi.amplitudes, dt_nd, axes)
        if advance_time:
            psi.time += duration
        return psi


def apply_axis_operator(a: np.ndarray, op: np.ndarray, axis: int) -> np.ndarray:
    """Contract an N x N matrix with one axis of a 4D array (new array returned)."""
    n = a.shape[0]
    if axis == 0:
        return np.matmul(op, a.reshape(n, n ** 3)).reshape(a.shape)
    if axis == 1:
        return np.matmul(op, a.reshape(n, n, n * n)).reshape(a.shape)
    if axis == 2:
        return np.matmul(op, a.reshape(n * n, n, n)).reshape(a.shape)
    if axis == 3:
        return np.matmul(a.reshape(n ** 3, n), op.T).reshape(a.shape)
    raise ValueError(f"axis must be 0..3, got {axis}")


@lru_cache(maxsize=4)
def _cached_propagator(grid: GridSpec, masses: tuple, method: str) -> Propagator:
    return Propagator(grid, masses, method=method)


def step(psi: WaveFunction4D, potentials: Sequence[PotentialField], dt: float,
         method: str = "auto") -> WaveFunction4D:
    """Return psi advanced by one split-step of length dt (input left untouched).

    A negative dt runs the step backwards (used for time-reversal checks).
    """
    if dt == 0:
        raise ValueError("dt must be non-zero")
    prop = _cached_propagator(psi.grid, tuple(psi.masses), method)
    out = psi.copy()
    out.amplitudes = prop.step_array(out.amplitudes, potentials, psi.time, dt)
    out.time = psi.time + dt
    return out
