"""dualbell: split-step simulation of a dual-species atomic Bell test.

Modules
-------
config    physical constants, species/grid/run configuration, collision kinematics
oracle    analytic four-mode model (pulse unitaries, correlator, CHSH)
grid      two-particle field, potentials, split-step propagator, snapshots
sequence  experiment schedule: preparation, split, collision, mirror, mixing
analysis  mode regions, joint weights, correlator, E-surface scans, halo fits
cli       command-line front end (``dualbell run|scan|oracle|analyze``)
"""
__version__ = "0.1.0"
