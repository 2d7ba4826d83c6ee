"""The two-particle field psi(x3, z3, x4, z4) and its momentum-space views."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from ..config import GridSpec, MASS_HE3, MASS_HE4, ground_state_width
from ..errors import ResolutionError
from . import kernels

AXES = ("x3", "z3", "x4", "z4")
SPECIES_AXES = {"A": (0, 1), "B": (2, 3)}


@dataclass
class WaveFunction4D:
    """Complex field on the (x3, z3, x4, z4) grid; species A is (x3, z3).

    In the position representation sum |psi|^2 dx^4 = 1; in the momentum
    representation (centred axes, index N//2 is zero momentum) sum |psi|^2 dp^4 = 1.
    """

    amplitudes: np.ndarray
    grid: GridSpec
    time: float = 0.0
    masses: tuple = (MASS_HE3, MASS_HE4)
    representation: str = "position"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        a = self.amplitudes
        if a.shape != self.grid.shape:
            raise ValueError(f"field shape {a.shape} does not match grid {self.grid.shape}")
        if a.dtype != np.complex128:
            self.amplitudes = np.ascontiguousarray(a, dtype=np.complex128)
        if self.representation not in ("position", "momentum"):
            raise ValueError("representation must be 'position' or 'momentum'")

    @property
    def cell_volume(self) -> float:
        step = self.grid.spatial_step if self.representation == "position" else self.grid.momentum_step
        return step ** 4

    def copy(self) -> "WaveFunction4D":
        return replace(self, amplitudes=self.amplitudes.copy(), metadata=dict(self.metadata))


def norm(psi: WaveFunction4D) -> float:
    """Discrete L2 norm squared, sum |psi|^2 times the cell volume."""
    return kernels.norm_sq(psi.amplitudes) * psi.cell_volume


def to_momentum_space(psi: WaveFunction4D, workers: int = 1) -> WaveFunction4D:
    """Unitary 4D transform onto the centred momentum grid."""
    if psi.representation == "momentum":
        return psi.copy()
    g = psi.grid
    scale = (g.spatial_step / g.momentum_step) ** 2
    a = sfft.fftshift(sfft.fftn(sfft.ifftshift(psi.amplitudes), norm="ortho", workers=workers))
    a *= scale
    return replace(psi, amplitudes=a, representation="momentum", metadata=dict(psi.metadata))


def to_position_space(psi: WaveFunction4D, workers: int = 1) -> WaveFunction4D:
    if psi.representation == "position":
        return psi.copy()
    g = psi.grid
    scale = (g.momentum_step / g.spatial_step) ** 2
    a = sfft.fftshift(sfft.ifftn(sfft.ifftshift(psi.amplitudes), norm="ortho", workers=workers))
    a *= scale
    return replace(psi, amplitudes=a, representation="position", metadata=dict(psi.metadata))


def momentum_density(psi: WaveFunction4D, species: str) -> np.ndarray:
    """Marginal |psi(p)|^2 of one species on the centred (p_x, p_z) grid; sums to 1 with dp^2."""
    phi = psi if psi.representation == "momentum" else to_momentum_space(psi)
    dens = np.abs(phi.amplitudes) ** 2
    dp2 = phi.grid.momentum_step ** 2
    if species == "A":
        return dens.sum(axis=(2, 3)) * dp2
    if species == "B":
        return dens.sum(axis=(0, 1)) * dp2
    raise ValueError("species must be 'A' or 'B'")


def position_density(psi: WaveFunction4D, species: str) -> np.ndarray:
    pos = psi if psi.representation == "position" else to_position_space(psi)
    dens = np.abs(pos.amplitudes) ** 2
    dx2 = pos.grid.spatial_step ** 2
    return dens.sum(axis=(2, 3) if species == "A" else (0, 1)) * dx2


def gaussian_1d(x: np.ndarray, sigma: float, center: float = 0.0, momentum: float = 0.0,
                hbar: float = 1.0) -> np.ndarray:
    """Normalized Gaussian amplitude with position rms ``sigma`` (not yet grid-normalized)."""
    amp = np.exp(-((x - center) ** 2) / (4.0 * sigma ** 2)) / (2 * math.pi * sigma ** 2) ** 0.25
    if momentum:
        amp = amp * np.exp(1j * momentum * x / hbar)
    return amp


def product_state(grid: GridSpec, factors, masses=(MASS_HE3, MASS_HE4), time: float = 0.0) -> WaveFunction4D:
    """Outer product of four 1D amplitude arrays, normalized on the grid."""
    f = [np.asarray(v, dtype=complex) for v in factors]
    a = np.einsum("i,j,k,l->ijkl", *f)
    psi = WaveFunction4D(a, grid, time, tuple(masses))
    psi.amplitudes /= math.sqrt(norm(psi))
    return psi


def ground_state(grid: GridSpec, trap_frequencies, masses=(MASS_HE3, MASS_HE4)) -> WaveFunction4D:
    """Product of isotropic harmonic-oscillator ground states, one per species."""
    if min(trap_frequencies) <= 0:
        raise ValueError("trap frequencies must be positive")
    x = grid.positions()
    factors = []
    for m, w in zip(masses, trap_frequencies):
        sigma = ground_state_width(m, w)
        cells = sigma / grid.spatial_step
        if cells < 2 or cells > grid.points_per_dim / 4:
            raise ResolutionError(
                f"ground-state width {cells:.2f} cells outside [2, {grid.points_per_dim / 4:.1f}]")
        g = gaussian_1d(x, sigma)
        factors += [g, g]
    return product_state(grid, factors, masses)
