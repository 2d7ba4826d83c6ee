# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the split-step propagator.

Each routine mirrors a function in ``_fallback.py``; results agree to rounding.
"""

import numpy as np

ctypedef double complex cplx


def axis_phase_mul(cplx[:, :, :, ::1] psi, const cplx[::1] a0, const cplx[::1] a1,
                   const cplx[::1] a2, const cplx[::1] a3):
    """psi[i,j,k,l] *= a0[i] a1[j] a2[k] a3[l], in place, one pass."""
    cdef Py_ssize_t n0 = psi.shape[0], n1 = psi.shape[1], n2 = psi.shape[2], n3 = psi.shape[3]
    cdef Py_ssize_t i, j, k, l
    cdef cplx f01
    cdef cplx[:, ::1] plane = np.empty((n2, n3), dtype=np.complex128)
    cdef cplx *row
    cdef cplx *prow
    for k in range(n2):
        for l in range(n3):
            plane[k, l] = a2[k] * a3[l]
    with nogil:
        for i in range(n0):
            for j in range(n1):
                f01 = a0[i] * a1[j]
                for k in range(n2):
                    row = &psi[i, j, k, 0]
                    prow = &plane[k, 0]
                    for l in range(n3):
                        row[l] = row[l] * (f01 * prow[l])


def banded_pair_phase(cplx[:, :, :, ::1] psi, const long[::1] off_k, const long[::1] off_l,
                      const cplx[::1] phases):
    """psi[i,j,(i+dk)%N,(j+dl)%N] *= phase for each band entry (dk, dl, phase)."""
    cdef Py_ssize_t n = psi.shape[0], m = phases.shape[0]
    cdef Py_ssize_t b, i, j, k, l
    cdef cplx ph
    with nogil:
        for b in range(m):
            ph = phases[b]
            for i in range(n):
                k = (i + off_k[b]) % n
                if k < 0:
                    k = k + n
                for j in range(n):
                    l = (j + off_l[b]) % n
                    if l < 0:
                        l = l + n
                    psi[i, j, k, l] = psi[i, j, k, l] * ph


def norm_sq(const cplx[:, :, :, ::1] psi):
    """Sum of |psi|^2 with per-slab partial sums in fixed order."""
    cdef Py_ssize_t n0 = psi.shape[0], n1 = psi.shape[1], n2 = psi.shape[2], n3 = psi.shape[3]
    cdef Py_ssize_t i, j, k, l
    cdef double total = 0.0, slab, re, im
    with nogil:
        for i in range(n0):
            slab = 0.0
            for j in range(n1):
                for k in range(n2):
                    for l in range(n3):
                        re = psi[i, j, k, l].real
                        im = psi[i, j, k, l].imag
                        slab = slab + re * re + im * im
            total = total + slab
    return total
