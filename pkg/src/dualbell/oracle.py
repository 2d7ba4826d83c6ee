"""Analytic four-mode model of the post-selected single-pair sector.

Joint basis order, used by every module in the package::

    0: (A up, B up)   1: (A up, B down)   2: (A down, B up)   3: (A down, B down)

"up" is the upper halo mode of each species (A at +p_k/2 on the upper-left,
B at +p_k/2 on the upper-right).  A Bragg pulse of area theta and phase phi
acts on one species as

    |up>   -> cos(theta/2)|up>   - i e^{+i phi} sin(theta/2)|down>
    |down> -> cos(theta/2)|down> - i e^{-i phi} sin(theta/2)|up>
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Tuple

import numpy as np

BASIS = ("uu", "ud", "du", "dd")
_PARITY = np.array([1.0, -1.0, -1.0, 1.0])
TSIRELSON = 2.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class PulseSetting:
    theta: float
    phi: float = 0.0
    target: str = "A"

    def __post_init__(self):
        if self.target not in ("A", "B"):
            raise ValueError(f"target must be A or B, got {self.target!r}")
        if not (0.0 <= self.theta < 2 * math.pi and 0.0 <= self.phi < 2 * math.pi):
            raise ValueError("theta and phi must lie in [0, 2*pi)")

    @classmethod
    def wrapped(cls, theta: float, phi: float = 0.0, target: str = "A") -> "PulseSetting":
        """Build a setting after reducing both angles modulo 2*pi."""
        return cls(math.fmod(theta, 2 * math.pi) % (2 * math.pi),
                   math.fmod(phi, 2 * math.pi) % (2 * math.pi), target)


@dataclass(frozen=True)
class ModeState:
    """Four complex amplitudes over the joint basis (see module docstring)."""

    amplitudes: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex).reshape(4)
        object.__setattr__(self, "amplitudes", a)

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def normalized(self) -> "ModeState":
        return ModeState(self.amplitudes / math.sqrt(self.norm))

    def as_matrix(self) -> np.ndarray:
        """Amplitudes as a 2x2 array indexed [A direction, B direction]."""
        return self.amplitudes.reshape(2, 2)

    def overlap(self, other: "ModeState") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))


@dataclass
class BellResult:
    joint_probabilities: np.ndarray
    g2: np.ndarray
    correlator_E: float
    settings: Tuple[float, float, float, float]  # (theta_A, theta_B, phi_A, phi_B)
    metadata: dict = field(default_factory=dict)


def bell_state() -> ModeState:
    """(|A up>|B up> + |A down>|B down>) / sqrt(2)."""
    s = 1.0 / math.sqrt(2.0)
    return ModeState(np.array([s, 0.0, 0.0, s], dtype=complex))


def pulse_matrix(theta: float, phi: float) -> np.ndarray:
    """2x2 single-species pulse unitary; columns are the images of (up, down)."""
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[c, -1j * np.exp(-1j * phi) * s],
                     [-1j * np.exp(1j * phi) * s, c]], dtype=complex)


def apply_pulse(state: ModeState, setting: PulseSetting) -> ModeState:
    """Apply one pulse to the target species, identity on the other."""
    u = pulse_matrix(setting.theta, setting.phi)
    m = state.as_matrix()
    out = u @ m if setting.target == "A" else m @ u.T
    return ModeState(out.reshape(4))


def joint_probabilities(state: ModeState) -> np.ndarray:
    return np.abs(state.amplitudes) ** 2


def correlator(state: ModeState) -> float:
    """E = P(uu) + P(dd) - P(ud) - P(du) using normalized probabilities."""
    p = joint_probabilities(state)
    return float(_PARITY @ p / p.sum())


def g2_values(probabilities: np.ndarray) -> np.ndarray:
    """Normalized joint rates P(ab) / (P(a) P(b)); zero where a marginal vanishes."""
    p = np.asarray(probabilities, dtype=float).reshape(2, 2)
    pa, pb = p.sum(axis=1), p.sum(axis=0)
    denom = np.outer(pa, pb)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(denom > 0, p / np.where(denom > 0, denom, 1.0), 0.0)
    return g.reshape(4)


def bell_sequence(theta_A: float, theta_B: float, phi_A: float = 0.0, phi_B: float = 0.0,
                  mirror: bool = True) -> ModeState:
    """Bell state -> mirror (pi, 0) on both species -> mixing pulses."""
    st = bell_state()
    if mirror:
        st = apply_pulse(st, PulseSetting(math.pi, 0.0, "A"))
        st = apply_pulse(st, PulseSetting(math.pi, 0.0, "B"))
    st = apply_pulse(st, PulseSetting.wrapped(theta_A, phi_A, "A"))
    st = apply_pulse(st, PulseSetting.wrapped(theta_B, phi_B, "B"))
    return st


def bell_result(theta_A: float, theta_B: float, phi_A: float = 0.0, phi_B: float = 0.0) -> BellResult:
    st = bell_sequence(theta_A, theta_B, phi_A, phi_B)
    p = joint_probabilities(st)
    return BellResult(p, g2_values(p), correlator(st), (theta_A, theta_B, phi_A, phi_B))


def correlator_batch(theta_A, theta_B, phi_A, phi_B) -> np.ndarray:
    """Vectorized :func:`bell_sequence` + :func:`correlator` over broadcast arrays."""
    tA, tB, pA, pB = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in
                                           (theta_A, theta_B, phi_A, phi_B)))

    def mats(t, p):
        c, s = np.cos(t / 2), np.sin(t / 2)
        m = np.empty(t.shape + (2, 2), dtype=complex)
        m[..., 0, 0] = c
        m[..., 1, 1] = c
        m[..., 0, 1] = -1j * np.exp(-1j * p) * s
        m[..., 1, 0] = -1j * np.exp(1j * p) * s
        return m

    mirror = pulse_matrix(math.pi, 0.0)
    psi = bell_state().as_matrix()
    psi = mirror @ psi @ mirror.T
    ua, ub = mats(tA, pA), mats(tB, pB)
    out = ua @ psi @ np.swapaxes(ub, -1, -2)
    prob = np.abs(out.reshape(out.shape[:-2] + (4,))) ** 2
    return prob @ _PARITY / prob.sum(axis=-1)


def correlator_closed_form(theta_A, theta_B, phi_A, phi_B):
    """E = (1 - cos(phi_A+phi_B))/2 cos(theta_A-theta_B) + (1 + cos(phi_A+phi_B))/2 cos(theta_A+theta_B)."""
    c = np.cos(np.asarray(phi_A) + np.asarray(phi_B))
    return (1 - c) / 2 * np.cos(np.asarray(theta_A) - theta_B) + (1 + c) / 2 * np.cos(np.asarray(theta_A) + theta_B)


def chsh(a: Sequence[float], a_prime: Sequence[float], b: Sequence[float],
         b_prime: Sequence[float]) -> float:
    """S = E(a,b) - E(a,b') + E(a',b) + E(a',b') with settings given as (theta, phi).

    Each correlator runs the full oracle pipeline (mirror, then mixing).
    """
    def e(x, y):
        return correlator(bell_sequence(x[0], y[0], x[1], y[1]))
    return e(a, b) - e(a, b_prime) + e(a_prime, b) + e(a_prime, b_prime)


def chsh_batch(a, a_prime, b, b_prime) -> np.ndarray:
    """Vectorized :func:`chsh`; each argument is an array (..., 2) of (theta, phi)."""
    a, ap, b, bp = (np.asarray(v, dtype=float) for v in (a, a_prime, b, b_prime))

    def e(x, y):
        return correlator_batch(x[..., 0], y[..., 0], x[..., 1], y[..., 1])
    return e(a, b) - e(a, bp) + e(ap, b) + e(ap, bp)


def optimal_phase_settings(theta: float = math.pi / 2):
    """Phase settings whose sums are (pi/4, 3pi/4, 7pi/4, 9pi/4) at fixed mixing area."""
    phi_a, phi_ap = 0.0, 1.5 * math.pi
    phi_b, phi_bp = 0.25 * math.pi, 0.75 * math.pi
    return (theta, phi_a), (theta, phi_ap), (theta, phi_b), (theta, phi_bp)


def theta_sum_settings():
    """Area settings at phi = 0 with theta sums (3pi/4, pi/4, 5pi/4, 3pi/4), all in [0, pi].

    Since E = cos(theta_A + theta_B) at zero phase this yields S = -2 sqrt(2).
    Returned as (theta_A, theta_A', theta_B, theta_B').
    """
    return 0.25 * math.pi, 0.75 * math.pi, 0.5 * math.pi, 0.0


def chsh_from_correlators(e_ab: float, e_abp: float, e_apb: float, e_apbp: float) -> float:
    return e_ab - e_abp + e_apb + e_apbp


def random_settings(rng: np.random.Generator, n: int) -> np.ndarray:
    """n draws of four (theta, phi) settings, uniform on [0, 2pi)^2; shape (n, 4, 2)."""
    return rng.uniform(0.0, 2 * math.pi, size=(n, 4, 2))


def state_from_iterable(values: Iterable[complex]) -> ModeState:
    return ModeState(np.fromiter(values, dtype=complex, count=4))
