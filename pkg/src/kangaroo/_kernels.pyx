# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled modular arithmetic kernels.

All arrays are C-contiguous uint64. Row r of a 2-D array is reduced
modulo ``moduli[r]``; every modulus must be below 2**62.
"""
from libc.stdint cimport uint64_t

cdef extern from *:
    """
    #include <stdint.h>
    static inline uint64_t k_mulhi(uint64_t a, uint64_t b) {
        return (uint64_t)(((unsigned __int128)a * b) >> 64);
    }
    static inline uint64_t k_mulmod(uint64_t a, uint64_t b, uint64_t q) {
        return (uint64_t)(((unsigned __int128)a * b) % q);
    }
    """
    uint64_t k_mulhi(uint64_t a, uint64_t b) nogil
    uint64_t k_mulmod(uint64_t a, uint64_t b, uint64_t q) nogil


cdef inline uint64_t mul_shoup(uint64_t x, uint64_t w, uint64_t ws, uint64_t q) noexcept nogil:
    cdef uint64_t r = x * w - k_mulhi(x, ws) * q
    if r >= q:
        r -= q
    return r


def ntt_forward(uint64_t[:, ::1] a, const uint64_t[::1] moduli,
                const uint64_t[:, ::1] psi, const uint64_t[:, ::1] psi_shoup):
    """In-place negacyclic NTT, natural order in, bit-reversed order out."""
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t r, t, m, i, j, j1
    cdef uint64_t q, w, ws, u, v, x
    with nogil:
        for r in range(rows):
            q = moduli[r]
            t = n
            m = 1
            while m < n:
                t >>= 1
                for i in range(m):
                    j1 = 2 * i * t
                    w = psi[r, m + i]
                    ws = psi_shoup[r, m + i]
                    for j in range(j1, j1 + t):
                        u = a[r, j]
                        v = mul_shoup(a[r, j + t], w, ws, q)
                        x = u + v
                        if x >= q:
                            x -= q
                        a[r, j] = x
                        if u >= v:
                            a[r, j + t] = u - v
                        else:
                            a[r, j + t] = u + q - v
                m <<= 1


def ntt_inverse(uint64_t[:, ::1] a, const uint64_t[::1] moduli,
                const uint64_t[:, ::1] ipsi, const uint64_t[:, ::1] ipsi_shoup,
                const uint64_t[::1] n_inv, const uint64_t[::1] n_inv_shoup):
    """In-place inverse of :func:`ntt_forward`, including the 1/n scaling."""
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t r, t, m, h, i, j, j1
    cdef uint64_t q, w, ws, u, v, x, y
    with nogil:
        for r in range(rows):
            q = moduli[r]
            t = 1
            m = n
            while m > 1:
                j1 = 0
                h = m >> 1
                for i in range(h):
                    w = ipsi[r, h + i]
                    ws = ipsi_shoup[r, h + i]
                    for j in range(j1, j1 + t):
                        u = a[r, j]
                        v = a[r, j + t]
                        x = u + v
                        if x >= q:
                            x -= q
                        a[r, j] = x
                        if u >= v:
                            y = u - v
                        else:
                            y = u + q - v
                        a[r, j + t] = mul_shoup(y, w, ws, q)
                    j1 += 2 * t
                t <<= 1
                m = h
            for j in range(n):
                a[r, j] = mul_shoup(a[r, j], n_inv[r], n_inv_shoup[r], q)


def mulmod_rows(const uint64_t[:, ::1] a, const uint64_t[:, ::1] b,
                const uint64_t[::1] moduli, uint64_t[:, ::1] out):
    """out[r, j] = a[r, j] * b[r, j] mod moduli[r]."""
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t r, j
    cdef uint64_t q
    with nogil:
        for r in range(rows):
            q = moduli[r]
            for j in range(n):
                out[r, j] = k_mulmod(a[r, j], b[r, j], q)
