import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kangaroo import kernels
from kangaroo.bfv import RingPoly, negacyclic_schoolbook, ntt_context
from kangaroo.ntheory import bit_reverse, is_prime, ntt_primes, primitive_root_of_unity

IMPLS = ["numpy"] + (["compiled"] if kernels.IMPLEMENTATION == "compiled" else [])
MODS = tuple(ntt_primes(30, 2 * 64, 2))


def test_implementation_reported():
    assert kernels.IMPLEMENTATION in ("compiled", "numpy")


def test_unknown_impl():
    with pytest.raises(ValueError):
        kernels.load("fortran")


def test_primes():
    assert is_prime(2) and is_prime(1125899906826241) and not is_prime(1)
    assert not is_prime(3215031751)  # strong pseudoprime to bases 2, 3, 5, 7
    for p in ntt_primes(27, 8192, 4):
        assert p % 8192 == 1 and p.bit_length() == 27 and is_prime(p)


def test_root_of_unity():
    q = MODS[0]
    w = primitive_root_of_unity(128, q)
    assert pow(w, 128, q) == 1 and pow(w, 64, q) == q - 1


def test_bit_reverse():
    assert [bit_reverse(i, 3) for i in range(8)] == [0, 4, 2, 6, 1, 5, 3, 7]


@pytest.mark.parametrize("impl", IMPLS)
def test_ntt_roundtrip(impl):
    ctx = ntt_context(64, MODS)
    rng = np.random.default_rng(0)
    a = np.stack([rng.integers(0, q, 64, dtype=np.uint64) for q in MODS])
    mod = kernels.load(impl)
    assert np.array_equal(ctx.inverse(ctx.forward(a, mod), mod), a)


def test_compiled_matches_numpy():
    if "compiled" not in IMPLS:
        pytest.skip("compiled kernels unavailable")
    mods = tuple(ntt_primes(31, 512, 3))
    ctx = ntt_context(256, mods)
    rng = np.random.default_rng(1)
    a = np.stack([rng.integers(0, q, 256, dtype=np.uint64) for q in mods])
    f1 = ctx.forward(a, kernels.load("compiled"))
    f2 = ctx.forward(a, kernels.load("numpy"))
    assert np.array_equal(f1, f2)
    b = rng.integers(0, 1 << 50, (2, 256), dtype=np.uint64)
    c = rng.integers(0, 1 << 50, (2, 256), dtype=np.uint64)
    q = np.array([(1 << 50) + 55, (1 << 49) + 21], dtype=np.uint64)
    b %= q[:, None]
    c %= q[:, None]
    m1 = kernels.mulmod(b, c, q, kernels.load("compiled"))
    m2 = kernels.mulmod(b, c, q, kernels.load("numpy"))
    assert np.array_equal(m1, m2)
    assert int(m1[0, 0]) == int(b[0, 0]) * int(c[0, 0]) % int(q[0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=16, max_size=16),
       st.lists(st.integers(-50, 50), min_size=16, max_size=16))
def test_ntt_product_is_negacyclic(a, b):
    mods = tuple(ntt_primes(30, 32, 2))
    got = (RingPoly.from_ints(a, mods) * RingPoly.from_ints(b, mods)).to_coeff().coeffs
    for r, q in enumerate(mods):
        assert got[r].tolist() == negacyclic_schoolbook(a, b, q)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, (1 << 51) - 1), st.integers(0, (1 << 51) - 1))
def test_mulmod_wide(x, y):
    q = (1 << 51) - 129  # any modulus below 2^52
    x, y = x % q, y % q
    assert int(kernels.mulmod(np.array([x], dtype=np.uint64), np.array([y], dtype=np.uint64), q)[0]) == x * y % q
