"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``DUALBELL_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _fallback

BACKEND = "python"
if not os.environ.get("DUALBELL_PURE_PYTHON"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback


def axis_phase_mul(psi, a0, a1, a2, a3):
    _impl.axis_phase_mul(psi, a0, a1, a2, a3)


def banded_pair_phase(psi, off_k, off_l, phases):
    if len(phases):
        _impl.banded_pair_phase(psi, off_k, off_l, phases)


def norm_sq(psi):
    return _impl.norm_sq(psi)
