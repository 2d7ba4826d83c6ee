"""Pure-numpy versions of the compiled kernels (used when the extension is absent)."""
import numpy as np


def axis_phase_mul(psi, a0, a1, a2, a3):
    """psi[i,j,k,l] *= a0[i] a1[j] a2[k] a3[l], in place."""
    psi *= np.multiply.outer(a0, a1)[:, :, None, None]
    psi *= np.multiply.outer(a2, a3)[None, None, :, :]


def banded_pair_phase(psi, off_k, off_l, phases):
    """psi[i,j,(i+dk)%N,(j+dl)%N] *= phase for each band entry."""
    n = psi.shape[0]
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    for dk, dl, ph in zip(off_k, off_l, phases):
        k = (i + dk) % n
        l = (j + dl) % n
        psi[i, j, k, l] *= ph


def norm_sq(psi):
    """Sum of |psi|^2, accumulated slab by slab in fixed order."""
    total = 0.0
    for slab in psi:
        total += float(np.sum(slab.real ** 2 + slab.imag ** 2))
    return total
