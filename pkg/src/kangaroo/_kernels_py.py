"""Pure numpy implementation of the kernels in ``_kernels.pyx``.

Same signatures and in-place semantics. Moduli must be below 2**52 here:
products of wider residues are reduced with a float64 quotient estimate.
"""
import numpy as np

_SMALL = np.uint64(1 << 32)


def _mulmod(a, b, q):
    """Elementwise a*b mod q for residues already reduced mod q (broadcasting)."""
    if np.all(q < _SMALL):
        return (a * b) % q
    est = np.floor(a.astype(np.float64) * b.astype(np.float64) / q.astype(np.float64))
    # the wrapped uint64 difference is the true remainder up to a few multiples of q
    r = (a * b - est.astype(np.uint64) * q).view(np.int64)
    qi = np.broadcast_to(q, r.shape).view(np.int64)
    for _ in range(2):
        r = np.where(r < 0, r + qi, r)
        r = np.where(r >= qi, r - qi, r)
    return r.view(np.uint64)


def _addmod(a, b, q):
    s = a + b
    return np.where(s >= q, s - q, s)


def _submod(a, b, q):
    return np.where(a >= b, a - b, a + q - b)


def ntt_forward(a, moduli, psi, psi_shoup):
    rows, n = a.shape
    q = moduli.reshape(rows, 1, 1)
    t, m = n, 1
    while m < n:
        t //= 2
        blk = a.reshape(rows, m, 2, t)
        w = psi[:, m:2 * m].reshape(rows, m, 1)
        u = blk[:, :, 0, :].copy()
        v = _mulmod(blk[:, :, 1, :], w, q)
        blk[:, :, 0, :] = _addmod(u, v, q)
        blk[:, :, 1, :] = _submod(u, v, q)
        m *= 2


def ntt_inverse(a, moduli, ipsi, ipsi_shoup, n_inv, n_inv_shoup):
    rows, n = a.shape
    q = moduli.reshape(rows, 1, 1)
    t, m = 1, n
    while m > 1:
        h = m // 2
        blk = a.reshape(rows, h, 2, t)
        w = ipsi[:, h:2 * h].reshape(rows, h, 1)
        u = blk[:, :, 0, :].copy()
        v = blk[:, :, 1, :].copy()
        blk[:, :, 0, :] = _addmod(u, v, q)
        blk[:, :, 1, :] = _mulmod(_submod(u, v, q), w, q)
        t *= 2
        m = h
    a[...] = _mulmod(a, n_inv.reshape(rows, 1), moduli.reshape(rows, 1))


def mulmod_rows(a, b, moduli, out):
    out[...] = _mulmod(a, b, moduli.reshape(-1, 1))
