"""Potential energy terms acting on the two-particle grid.

Every potential can be evaluated pointwise (``evaluate``, SI joules).  The
propagator additionally exploits structure when a potential exposes it:

* ``axis_terms(x, t)``  additive 1D profiles per coordinate (trap, Bragg lattice)
* ``pair_term()``       a product kernel g * Gx(x3 - x4) * Gz(z3 - z4) (interaction)
* ``lattice_term(t)``   a travelling lattice A cos(k z - psi) applied as a banded
                        momentum-space coupling (Bragg pulses, see below)

Potentials without structure are evaluated on the full mesh.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..config import HBAR

KINDS = ("trap", "bragg_A", "bragg_B", "interaction", "custom")


class PotentialField:
    """Generic potential defined by an evaluator (x3, z3, x4, z4, t) -> J."""

    def __init__(self, kind: str, evaluator: Optional[Callable] = None):
        if kind not in KINDS:
            raise ValueError(f"unknown potential kind {kind!r}")
        self.kind = kind
        self._evaluator = evaluator

    def evaluate(self, x3, z3, x4, z4, t):
        return self._evaluator(x3, z3, x4, z4, t)

    def axis_terms(self, x, t):
        """Per-axis additive profiles [V0(x3), V1(z3), V2(x4), V3(z4)] or None."""
        return None

    def pair_term(self):
        """(strength, sigma_x, sigma_z) for a Gaussian product kernel, or None."""
        return None

    def lattice_term(self, t):
        """(axis, amplitude, wavevector, phase) for a banded lattice coupling, or None."""
        return None

    def is_active(self, t) -> bool:
        return True

    def max_abs(self, x, t) -> float:
        """Bound on |V| over the grid at time t (used in blow-up diagnostics)."""
        lat = self.lattice_term(t)
        if lat is not None:
            return abs(lat[1])
        terms = self.axis_terms(x, t)
        if terms is not None:
            return float(sum(np.max(np.abs(v)) for v in terms if v is not None))
        pair = self.pair_term()
        if pair is not None:
            return abs(pair[0])
        X = np.meshgrid(x, x, x, x, indexing="ij", sparse=True)
        return float(np.max(np.abs(self.evaluate(*X, t))))


class TrapPotential(PotentialField):
    """Isotropic harmonic trap per species: sum of 1/2 m w^2 (x^2 + z^2)."""

    def __init__(self, trap_frequencies, masses):
        super().__init__("trap")
        self.trap_frequencies = tuple(trap_frequencies)
        self.masses = tuple(masses)

    def _k(self, s):
        return 0.5 * self.masses[s] * self.trap_frequencies[s] ** 2

    def evaluate(self, x3, z3, x4, z4, t):
        return self._k(0) * (x3 ** 2 + z3 ** 2) + self._k(1) * (x4 ** 2 + z4 ** 2)

    def axis_terms(self, x, t):
        va, vb = self._k(0) * x ** 2, self._k(1) * x ** 2
        return [va, va, vb, vb]


class BraggPotential(PotentialField):
    """Moving standing wave E(t) cos(k_L z - delta t - phi) on one species' z.

    ``envelope(t)`` returns the amplitude in joules (hbar * Omega(t)); it is
    zero outside [start, start + duration).

    ``coupling`` selects how the lattice enters the split-step:

    * ``"banded"`` (default): cos(k z - psi) = (e^{i(kz-psi)} + e^{-i(kz-psi)})/2
      is applied as its exact action on plane waves, shifting momentum by
      +-hbar k with no wrap-around.  Requires hbar k to be a whole number of
      momentum steps.
    * ``"pointwise"``: the profile is multiplied on the periodic position grid.
      On a finite grid e^{ikz} then also links p to p + hbar k - N dp
      (momentum aliasing), which can create spurious near-resonant couplings.
    """

    def __init__(self, target: str, envelope: Callable[[float], float], wavevector: float,
                 detuning: float = 0.0, phase: float = 0.0, start: float = -math.inf,
                 duration: float = math.inf, coupling: str = "banded"):
        if target not in ("A", "B"):
            raise ValueError("target must be 'A' or 'B'")
        if coupling not in ("banded", "pointwise"):
            raise ValueError("coupling must be 'banded' or 'pointwise'")
        super().__init__("bragg_A" if target == "A" else "bragg_B")
        self.coupling = coupling
        self.target = target
        self.envelope = envelope
        self.wavevector = wavevector
        self.detuning = detuning
        self.phase = phase
        self.start = start
        self.duration = duration

    def is_active(self, t) -> bool:
        # start=-inf with duration=inf (always on) would give -inf + inf = nan
        end = math.inf if math.isinf(self.duration) else self.start + self.duration
        return self.start <= t < end

    def amplitude(self, t) -> float:
        return self.envelope(t) if self.is_active(t) else 0.0

    def profile(self, z, t):
        return self.amplitude(t) * np.cos(self.wavevector * z - self.detuning * t - self.phase)

    def evaluate(self, x3, z3, x4, z4, t):
        z = z3 if self.target == "A" else z4
        return self.profile(z, t) + 0.0 * (x3 + z3 + x4 + z4)

    @property
    def axis(self) -> int:
        return 1 if self.target == "A" else 3

    def lattice_term(self, t):
        """(axis, amplitude J, wavevector, phase psi) with V = amp cos(k z - psi), or None."""
        if self.coupling != "banded":
            return None
        return (self.axis, self.amplitude(t), self.wavevector, self.detuning * t + self.phase)

    def axis_terms(self, x, t):
        if self.coupling == "banded":
            return None
        terms = [None, None, None, None]
        terms[self.axis] = self.profile(x, t)
        return terms


class InteractionPotential(PotentialField):
    """Gaussian pseudopotential g exp(-|r3 - r4|^2 / (2 sigma^2)) with periodic minimum image."""

    def __init__(self, strength: float, sigma: float, box_length: Optional[float] = None,
                 start: float = -math.inf, stop: float = math.inf):
        super().__init__("interaction")
        self.strength = strength
        self.sigma = sigma
        self.box_length = box_length
        self.start = start
        self.stop = stop

    def is_active(self, t) -> bool:
        return self.start <= t < self.stop and self.strength != 0.0

    def _wrap(self, d):
        if self.box_length is None:
            return d
        L = self.box_length
        return (d + 0.5 * L) % L - 0.5 * L

    def evaluate(self, x3, z3, x4, z4, t):
        if not self.is_active(t):
            return 0.0 * (x3 + z3 + x4 + z4)
        dx, dz = self._wrap(x3 - x4), self._wrap(z3 - z4)
        return self.strength * np.exp(-(dx ** 2 + dz ** 2) / (2 * self.sigma ** 2))

    def pair_term(self):
        return (self.strength, self.sigma, self.sigma)


def rabi_to_amplitude(rabi_frequency: float) -> float:
    """Lattice depth (J) giving a two-photon Rabi frequency Omega between adjacent orders."""
    return HBAR * rabi_frequency


@dataclass(frozen=True)
class SquareEnvelope:
    amplitude: float

    def __call__(self, t):
        return self.amplitude


@dataclass(frozen=True)
class GaussianEnvelope:
    """Peak * exp(-(t - center)^2 / (2 sigma^2)); truncation is set by the pulse window."""

    peak: float
    center: float
    sigma: float

    def __call__(self, t):
        return self.peak * math.exp(-((t - self.center) ** 2) / (2 * self.sigma ** 2))
