"""Kernel dispatch: compiled Cython core if importable, numpy fallback otherwise.

Set ``KANGAROO_PURE_PYTHON=1`` to force the fallback. ``IMPLEMENTATION``
names the active choice.
"""
import importlib
import os

import numpy as np

MAX_FALLBACK_MODULUS = 1 << 52


def load(name):
    """Return the kernel module called ``name`` ("compiled" or "numpy")."""
    if name == "compiled":
        return importlib.import_module("kangaroo._kernels")
    if name == "numpy":
        return importlib.import_module("kangaroo._kernels_py")
    raise ValueError(f"unknown kernel implementation {name!r}")


def _select():
    if os.environ.get("KANGAROO_PURE_PYTHON") == "1":
        return "numpy", load("numpy")
    try:
        return "compiled", load("compiled")
    except ImportError:
        return "numpy", load("numpy")


IMPLEMENTATION, _impl = _select()


def _rows(a):
    return np.ascontiguousarray(a, dtype=np.uint64)


def ntt_forward(a, moduli, psi, psi_shoup, impl=None):
    """Forward negacyclic NTT of every row of ``a`` (modified in place)."""
    (impl or _impl).ntt_forward(a, moduli, psi, psi_shoup)
    return a


def ntt_inverse(a, moduli, ipsi, ipsi_shoup, n_inv, n_inv_shoup, impl=None):
    (impl or _impl).ntt_inverse(a, moduli, ipsi, ipsi_shoup, n_inv, n_inv_shoup)
    return a


def mulmod(a, b, q, impl=None):
    """Elementwise ``a * b mod q`` for reduced residues; ``q`` is a scalar or per-row vector."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    shape = np.broadcast_shapes(a.shape, b.shape)
    q = np.asarray(q, dtype=np.uint64)
    if q.ndim == 0 and int(q) < (1 << 32):
        return (a * b) % q
    if len(shape) <= 1:
        a2 = _rows(np.broadcast_to(a, shape)).reshape(1, -1)
        b2 = _rows(np.broadcast_to(b, shape)).reshape(1, -1)
        mods = np.full(1, q, dtype=np.uint64)
    else:
        a2 = _rows(np.broadcast_to(a, shape)).reshape(shape[0], -1)
        b2 = _rows(np.broadcast_to(b, shape)).reshape(shape[0], -1)
        mods = _rows(np.broadcast_to(q.reshape(-1), (shape[0],)))
    out = np.empty_like(a2)
    (impl or _impl).mulmod_rows(a2, b2, mods, out)
    return out.reshape(shape)
