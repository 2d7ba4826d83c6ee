"""Grid engine: two-particle field, potentials, split-step propagator, snapshots."""
from .kernels import BACKEND
from .potentials import (BraggPotential, GaussianEnvelope, InteractionPotential, PotentialField,
                         SquareEnvelope, TrapPotential)
from .propagator import Propagator, choose_kinetic_method, step
from .snapshot import load_snapshot, save_snapshot
from .wavefunction import (WaveFunction4D, ground_state, momentum_density, norm, position_density,
                           product_state, to_momentum_space, to_position_space)

__all__ = [
    "BACKEND", "BraggPotential", "GaussianEnvelope", "InteractionPotential", "PotentialField",
    "SquareEnvelope", "TrapPotential", "Propagator", "choose_kinetic_method", "step",
    "load_snapshot", "save_snapshot", "WaveFunction4D", "ground_state", "momentum_density", "norm",
    "position_density", "product_state", "to_momentum_space", "to_position_space",
]
