"""Lattice backend internals: encoder, noise tracking, parameter checks."""
import numpy as np
import pytest

from kangaroo.bfv import BatchEncoder, LatticeBackend
from kangaroo.errors import DecryptionIntegrityError, ParameterError, SerializationError
from kangaroo.phe import PheParams, make_backend, preset


def test_encoder_roundtrip_and_slot_product():
    enc = BatchEncoder(64, 257)
    rng = np.random.default_rng(0)
    a = rng.integers(0, 257, 32, dtype=np.uint64)
    b = rng.integers(0, 257, 32, dtype=np.uint64)
    pa, pb = enc.encode(a), enc.encode(b)
    assert np.array_equal(enc.decode(pa), a)
    # slotwise product corresponds to negacyclic polynomial product
    from kangaroo.bfv import negacyclic_schoolbook

    prod = negacyclic_schoolbook([int(x) for x in pa], [int(x) for x in pb], 257)
    assert np.array_equal(enc.decode(np.array(prod, dtype=np.uint64)), a * b % 257)


def test_fresh_budget_positive_and_estimate_conservative(toy):
    be, keys = toy
    ct = be.encrypt(keys.public_key, np.arange(128, dtype=np.uint64))
    measured = be.noise_budget(keys.secret_key, ct)
    assert measured > 0
    assert be.estimated_budget(ct) <= measured
    ct2 = be.rotate(be.mul_plain(ct, np.full(128, 3, dtype=np.uint64)), 1, keys.rotation_keys)
    assert be.estimated_budget(ct2) <= be.noise_budget(keys.secret_key, ct2)


def test_budget_exhaustion_raises(toy):
    be, keys = toy
    rng = np.random.default_rng(1)
    ct = be.encrypt(keys.public_key, rng.integers(0, 65537, 128, dtype=np.uint64))
    with pytest.raises(DecryptionIntegrityError):
        for _ in range(20):
            ct = be.mul_plain(ct, rng.integers(0, 65537, 128, dtype=np.uint64))


def test_capacity_ordering():
    p, d = make_backend(preset("paper-default")), make_backend(preset("desk-small"))
    assert 2 < p.plain_mul_capacity() < d.plain_mul_capacity() < 4


def test_security_check():
    p = PheParams.lattice(256, 65537, 30, 3, decomp_bits=14, security_level=128)
    with pytest.raises(ParameterError):
        make_backend(p).keygen()


def test_moduli_below_2_32():
    p = PheParams.lattice(64, 65537, 40, 1, security_level=0)
    with pytest.raises(ParameterError):
        LatticeBackend(p)


def test_ciphertext_size(desk):
    be, keys = desk
    assert be.ciphertext_size() == len(be.ciphertext_bytes(be.encrypt(keys.public_key, np.zeros(2048, np.uint64))))
    assert make_backend(preset("paper-default")).ciphertext_size() == 14 + 8 + 2 * 7 * 8192 * 4


def test_rotation_key_tamper(toy):
    be, keys = toy
    rk = bytearray(be.rotation_keys_bytes(keys))
    rk[14 + 4 + 8] ^= 1  # first key's Galois element
    with pytest.raises(SerializationError):
        be.load_keys(be.public_key_bytes(keys), bytes(rk))


def test_seeded_keygen_reproducible(toy_params):
    a = make_backend(toy_params).keygen({1}, seed=7)
    b = make_backend(toy_params).keygen({1}, seed=7)
    be = make_backend(toy_params)
    assert be.public_key_bytes(a) == be.public_key_bytes(b)
    assert be.rotation_keys_bytes(a) == be.rotation_keys_bytes(b)
