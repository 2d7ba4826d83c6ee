import math

import numpy as np
import pytest

from dualbell.config import HBAR, GridSpec, RunConfig, helium3, helium4
from dualbell.grid import WaveFunction4D

# Short square pulses (pi in 8 steps) so the whole sequence fits in ~15 us.
FAST_RABI = math.pi / 0.8e-6


def small_config(points=21, pk_cells=8, **changes) -> RunConfig:
    """A 21^4 grid configuration whose full sequence runs in about a second."""
    sa = helium3(FAST_RABI, 0.8e-6)
    sb = helium4(FAST_RABI, 0.8e-6)
    grid = GridSpec.commensurate(points, pk_cells, sb.lattice_momentum(), 1e-7)
    kw = dict(grid=grid, species_A=sa, species_B=sb, trap_frequencies=(3e4, 3e4),
              collision_duration=4e-6, t1=6e-6, t2=12e-6, total_duration=14e-6)
    kw.update(changes)
    return RunConfig(**kw)


def plane_wave_state(config: RunConfig, cells) -> WaveFunction4D:
    """Product of plane waves at integer momentum offsets ``cells`` (one per axis)."""
    g = config.grid
    x = g.positions()
    f = [np.exp(1j * c * g.momentum_step * x / HBAR) for c in cells]
    a = np.einsum("i,j,k,l->ijkl", *f)
    psi = WaveFunction4D(a, g, masses=config.masses)
    psi.amplitudes /= math.sqrt(float(np.sum(np.abs(a) ** 2)) * g.spatial_step ** 4)
    return psi


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
