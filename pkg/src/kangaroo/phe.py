"""Packed homomorphic encryption contract and the transparent reference backend.

A backend encrypts vectors of ``S`` residues mod a prime ``q`` (slots) and
supports slotwise addition, plaintext multiplication and cyclic rotation.
Rotation by ``r > 0`` moves slot ``i`` to slot ``i + r``, so output slot ``i``
holds input slot ``(i - r) mod S``.

The transparent backend keeps slot vectors in the clear. It is exact, fast,
and insecure; it exists as the correctness oracle and for the outsourced
variant, which needs ciphertext products.
"""
from __future__ import annotations

import math
import secrets
import struct
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import (
    BackendMismatch,
    DecryptionIntegrityError,
    MissingRotationKey,
    ParameterError,
    SerializationError,
    UnsupportedOperation,
)
from .ntheory import is_prime, ntt_primes
from .rand import make_rng

TRANSPARENT = "transparent"
LATTICE = "lattice"
BACKEND_CODES = {TRANSPARENT: 0, LATTICE: 1}
BACKEND_NAMES = {v: k for k, v in BACKEND_CODES.items()}

CONTAINER_VERSION = 1
MAGIC_CIPHERTEXT = b"KGRCTXT\x00"
MAGIC_PUBLIC_KEY = b"KGRPKEY\x00"
MAGIC_SECRET_KEY = b"KGRSKEY\x00"
MAGIC_ROTATION_KEYS = b"KGRGKEY\x00"
_HEADER = struct.Struct("<8sBBI")

# log2(Q) upper bounds for 128-bit classical security, ternary secret
SECURITY_TABLE_128 = {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438, 32768: 881}


@dataclass(frozen=True)
class PheParams:
    """Shared encryption parameters.

    ``ring_degree``, ``coeff_moduli`` and ``decomp_bits`` only matter for the
    lattice backend. ``security_level`` of 0 marks toy parameters that skip the
    security-table check.
    """

    slot_count: int
    plain_modulus: int
    backend_id: str = TRANSPARENT
    ring_degree: int | None = None
    coeff_moduli: tuple[int, ...] = ()
    decomp_bits: int | None = None
    security_level: int = 128
    error_std: float = 3.2
    name: str = "custom"

    def __post_init__(self):
        q = self.plain_modulus
        if self.backend_id not in BACKEND_CODES:
            raise ParameterError(f"unknown backend {self.backend_id!r}")
        if self.backend_id == LATTICE:
            n = self.ring_degree
            if not n or n < 4 or n & (n - 1):
                raise ParameterError("ring degree must be a power of two >= 4")
            if q % (2 * n) != 1:
                raise ParameterError(f"plaintext modulus {q} is not 1 mod 2N = {2 * n} (batching)")
            if self.slot_count != n // 2:
                raise ParameterError("lattice backend uses S = N/2 slots")
            if not self.coeff_moduli:
                raise ParameterError("lattice backend needs coefficient moduli")
            for p in self.coeff_moduli:
                if p % (2 * n) != 1 or not is_prime(p) or p >= kernels.MAX_FALLBACK_MODULUS:
                    raise ParameterError(f"coefficient modulus {p} is not an NTT prime below 2^52")
            if len(set(self.coeff_moduli)) != len(self.coeff_moduli):
                raise ParameterError("coefficient moduli must be distinct")
        if self.slot_count < 2:
            raise ParameterError("slot count must be at least 2")
        if not is_prime(q):
            raise ParameterError(f"plaintext modulus {q} is not prime")
        if q >= kernels.MAX_FALLBACK_MODULUS:
            raise ParameterError("plaintext modulus must be below 2^52")
        z = self.zeta
        if z < 2 or z * z + z >= q / 2:
            raise ParameterError(f"precision zeta={z} violates zeta^2 + zeta < q/2")

    @property
    def zeta(self) -> int:
        return 1 << (int(self.plain_modulus).bit_length() - 1) // 2 - 1

    @property
    def log_q_total(self) -> float:
        return sum(math.log2(p) for p in self.coeff_moduli)

    def with_backend(self, backend_id: str) -> "PheParams":
        """Same slot count and plaintext modulus on another backend."""
        if backend_id == self.backend_id:
            return self
        if backend_id == TRANSPARENT:
            return PheParams(self.slot_count, self.plain_modulus, TRANSPARENT, name=self.name)
        preset = _lattice_twin(self)
        if preset is None:
            raise ParameterError(f"no lattice parameters with S={self.slot_count}, q={self.plain_modulus}")
        return preset

    def describe(self) -> dict:
        d = {
            "name": self.name,
            "backend": self.backend_id,
            "slot_count": self.slot_count,
            "plain_modulus": self.plain_modulus,
            "zeta": self.zeta,
        }
        if self.backend_id == LATTICE:
            d.update(
                ring_degree=self.ring_degree,
                coeff_moduli=list(self.coeff_moduli),
                log2_Q=round(self.log_q_total, 2),
                decomp_bits=self.decomp_bits,
                security_level=self.security_level,
            )
        return d

    @classmethod
    def lattice(cls, ring_degree, plain_modulus, modulus_bits, modulus_count,
                decomp_bits=None, security_level=128, name="custom") -> "PheParams":
        """Lattice parameters with ``modulus_count`` NTT primes of ``modulus_bits`` bits."""
        if ring_degree < 4 or ring_degree & (ring_degree - 1):
            raise ParameterError("ring degree must be a power of two >= 4")
        moduli = tuple(ntt_primes(modulus_bits, 2 * ring_degree, modulus_count))
        return cls(ring_degree // 2, plain_modulus, LATTICE, ring_degree, moduli,
                   decomp_bits, security_level, name=name)


@lru_cache(maxsize=None)
def _largest_ntt_prime(bits, modulus):
    return ntt_primes(bits, modulus, 1)[0]


def _preset_paper_default():
    n = 8192
    t = _largest_ntt_prime(50, 2 * n)
    return PheParams.lattice(n, t, 31, 7, decomp_bits=None, name="paper-default")


def _preset_desk_small():
    n = 4096
    t = _largest_ntt_prime(20, 2 * n)
    return PheParams.lattice(n, t, 27, 4, decomp_bits=14, name="desk-small")


_PRESETS = {"paper-default": _preset_paper_default, "desk-small": _preset_desk_small}
PRESET_NAMES = tuple(_PRESETS)


@lru_cache(maxsize=None)
def _lattice_preset(name):
    return _PRESETS[name]()


def preset(name: str, backend: str | None = None) -> PheParams:
    """Named parameter set; ``backend="transparent"`` gives its transparent twin."""
    if name not in _PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    p = _lattice_preset(name)
    return p.with_backend(backend) if backend else p


def _lattice_twin(params):
    for name in PRESET_NAMES:
        p = _lattice_preset(name)
        if p.slot_count == params.slot_count and p.plain_modulus == params.plain_modulus:
            return p
    return None


# plaintext vectors -----------------------------------------------------------

def plain_vec(values, params: PheParams) -> np.ndarray:
    """Validate and convert to a length-S uint64 residue vector."""
    v = np.asarray(values)
    if v.shape != (params.slot_count,):
        raise ParameterError(f"plain vector must have {params.slot_count} slots, got shape {v.shape}")
    if v.dtype == object or v.dtype.kind in "iu":
        if v.dtype.kind == "i" or v.dtype == object:
            if (v < 0).any() or (v >= params.plain_modulus).any():
                raise ParameterError("plain vector entries must lie in [0, q)")
        elif (v >= np.uint64(params.plain_modulus)).any():
            raise ParameterError("plain vector entries must lie in [0, q)")
        return v.astype(np.uint64)
    raise ParameterError(f"plain vector must be integral, got {v.dtype}")


def reduce_signed(values, q: int) -> np.ndarray:
    """Map signed integers to residues in [0, q)."""
    v = np.asarray(values, dtype=object) if not isinstance(values, np.ndarray) else values
    if v.dtype == object:
        return np.array([int(x) % q for x in v.ravel()], dtype=np.uint64).reshape(v.shape)
    v = v.astype(np.int64)
    return np.where(v < 0, v % q, v).astype(np.uint64)


def centered(x: int, q: int) -> int:
    """Signed representative: x if x <= (q-1)/2, else x - q."""
    x = int(x)
    if not 0 <= x < q:
        raise ValueError(f"{x} is not a residue mod {q}")
    return x if x <= (q - 1) // 2 else x - q


def centered_array(v: np.ndarray, q: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.uint64)
    half = np.uint64((q - 1) // 2)
    return np.where(v <= half, v.astype(np.int64), v.astype(np.int64) - np.int64(q))


def plain_rotate(v, r: int) -> np.ndarray:
    """Cyclic right shift by r: output slot i holds input slot (i - r) mod S."""
    return np.roll(np.asarray(v), int(r))


def add_mod(a, b, q):
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    s = a + b
    return np.where(s >= np.uint64(q), s - np.uint64(q), s)


def sub_mod(a, b, q):
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    return np.where(a >= b, a - b, a + np.uint64(q) - b)


def neg_mod(a, q):
    a = np.asarray(a, dtype=np.uint64)
    return np.where(a == 0, a, np.uint64(q) - a)


def mul_mod(a, b, q):
    return kernels.mulmod(a, b, q)


# containers ------------------------------------------------------------------

def pack_container(magic: bytes, backend_id: str, payload: bytes) -> bytes:
    if len(payload) >= 1 << 32:
        raise SerializationError("payload too large for container")
    return _HEADER.pack(magic, CONTAINER_VERSION, BACKEND_CODES[backend_id], len(payload)) + payload


def unpack_container(data: bytes, magic: bytes | None = None) -> tuple[bytes, str, bytes]:
    """Returns (magic, backend_id, payload) after validating the header."""
    if len(data) < _HEADER.size:
        raise SerializationError("container shorter than its header")
    got, version, code, length = _HEADER.unpack_from(data)
    if magic is not None and got != magic:
        raise SerializationError(f"bad magic {got!r}, expected {magic!r}")
    if version != CONTAINER_VERSION:
        raise SerializationError(f"unsupported container version {version}")
    if code not in BACKEND_NAMES:
        raise SerializationError(f"unknown backend code {code}")
    if len(data) != _HEADER.size + length:
        raise SerializationError("container length field does not match data")
    return got, BACKEND_NAMES[code], bytes(data[_HEADER.size:])


# keys and ciphertexts --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Ciphertext:
    """Opaque encrypted slot vector.

    ``noise_bits`` is the lattice backend's conservative noise estimate
    (log2 of the error's standard deviation); ``ops`` counts homomorphic
    operations on the transparent backend.
    """

    backend_id: str
    payload: object
    noise_bits: float | None = None
    ops: int = 0
    key_id: bytes | None = None


@dataclass(frozen=True, eq=False)
class RotationKeys:
    shifts: frozenset
    keys: dict = field(default_factory=dict)
    key_id: bytes | None = None


@dataclass(frozen=True, eq=False)
class KeyMaterial:
    params: PheParams
    public_key: object
    rotation_keys: RotationKeys
    secret_key: object = None
    key_id: bytes | None = None

    def public(self) -> "KeyMaterial":
        return replace(self, secret_key=None)


def rotation_steps(r: int, shifts, slot_count: int) -> list[int]:
    """Shortest sequence of declared shifts whose sum is r mod S.

    Raises MissingRotationKey when r is unreachable.
    """
    r %= slot_count
    if r == 0:
        return []
    return list(_rotation_steps(r, frozenset(int(s) for s in shifts), slot_count))


@lru_cache(maxsize=4096)
def _rotation_steps(r, shifts, S):
    steps = sorted({s % S for s in shifts} - {0})
    if not steps:
        raise MissingRotationKey(f"no rotation keys declared, cannot rotate by {r}")
    back = {0: None}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        if u == r:
            break
        for s in steps:
            v = (u + s) % S
            if v not in back:
                back[v] = (u, s)
                queue.append(v)
    if r not in back:
        raise MissingRotationKey(f"shift {r} is not reachable from declared shifts {sorted(shifts)}")
    out = []
    u = r
    while back[u] is not None:
        u, s = back[u]
        out.append(_signed_shift(s, shifts, S))
    return tuple(reversed(out))


def _signed_shift(s, shifts, S):
    for d in shifts:
        if d % S == s:
            return d
    return s


def power_of_two_shifts(limit: int, signs=(1, -1)) -> set[int]:
    """{sign * 2^i : 2^i <= limit}."""
    out, k = set(), 1
    while k <= limit:
        for sg in signs:
            out.add(sg * k)
        k *= 2
    return out


class Backend:
    """Common plumbing; concrete backends implement the underscore hooks."""

    id = ""
    supports_ct_mul = False

    def __init__(self, params: PheParams, seed=None):
        if params.backend_id != self.id:
            raise BackendMismatch(f"{type(self).__name__} cannot use {params.backend_id} parameters")
        self.params = params
        self.S = params.slot_count
        self.q = params.plain_modulus
        self._rng = make_rng(seed)
        self._rng_lock = threading.Lock()

    # randomness used by encryption/keygen; never shared with protocol streams
    def _draw(self, fn):
        with self._rng_lock:
            return fn(self._rng)

    def _check(self, *cts):
        for c in cts:
            if not isinstance(c, Ciphertext) or c.backend_id != self.id:
                raise BackendMismatch("ciphertext does not belong to this backend")

    def _plain(self, p) -> np.ndarray:
        return plain_vec(p, self.params)

    def rotate(self, ct: Ciphertext, r: int, rotation_keys: RotationKeys) -> Ciphertext:
        self._check(ct)
        for step in rotation_steps(r, rotation_keys.shifts, self.S):
            ct = self._rotate_once(ct, step, rotation_keys)
        return ct

    def sum_ciphertexts(self, cts) -> Ciphertext:
        cts = list(cts)
        out = cts[0]
        for c in cts[1:]:
            out = self.add(out, c)
        return out

    def mul_ct(self, a, b):
        raise UnsupportedOperation(f"{self.id} backend has no ciphertext-ciphertext multiplication")

    def ciphertext_bytes(self, ct: Ciphertext) -> bytes:
        return pack_container(MAGIC_CIPHERTEXT, self.id, self._ct_payload(ct))

    def ciphertext_from_bytes(self, data: bytes) -> Ciphertext:
        _, bid, payload = unpack_container(data, MAGIC_CIPHERTEXT)
        if bid != self.id:
            raise BackendMismatch(f"ciphertext from {bid} backend")
        return self._ct_from_payload(payload)

    def public_key_bytes(self, keys: KeyMaterial) -> bytes:
        return pack_container(MAGIC_PUBLIC_KEY, self.id, self._pk_payload(keys))

    def rotation_keys_bytes(self, keys: KeyMaterial) -> bytes:
        return pack_container(MAGIC_ROTATION_KEYS, self.id, self._rk_payload(keys.rotation_keys))

    def secret_key_bytes(self, keys: KeyMaterial) -> bytes:
        if keys.secret_key is None:
            raise ParameterError("key material has no secret part")
        return pack_container(MAGIC_SECRET_KEY, self.id, self._sk_payload(keys))

    def load_keys(self, public_key: bytes, rotation_keys: bytes, secret_key: bytes | None = None) -> KeyMaterial:
        """Rebuild key material from its serialized parts."""
        parts = {}
        for name, data, magic in (("pk", public_key, MAGIC_PUBLIC_KEY),
                                  ("rk", rotation_keys, MAGIC_ROTATION_KEYS),
                                  ("sk", secret_key, MAGIC_SECRET_KEY)):
            if data is None:
                continue
            _, bid, payload = unpack_container(data, magic)
            if bid != self.id:
                raise BackendMismatch(f"{name} from {bid} backend")
            parts[name] = payload
        return self._load_keys(parts)

    def decrypt_signed(self, sk, ct) -> np.ndarray:
        return centered_array(self.decrypt(sk, ct), self.q)

    def estimated_budget(self, ct: Ciphertext) -> float:
        return math.inf


class TransparentBackend(Backend):
    """Exact slot arithmetic in the clear. Insecure by construction."""

    id = TRANSPARENT
    supports_ct_mul = True

    def keygen(self, shifts=(), seed=None) -> KeyMaterial:
        rng = make_rng(seed) if seed is not None else None
        key_id = bytes(rng.integers(0, 256, 16, dtype=np.uint8)) if rng else secrets.token_bytes(16)
        rk = RotationKeys(frozenset(int(s) for s in shifts), {}, key_id)
        return KeyMaterial(self.params, key_id, rk, secret_key=key_id, key_id=key_id)

    def encrypt(self, pk, v, rng=None) -> Ciphertext:
        return Ciphertext(self.id, self._plain(v).copy(), ops=0, key_id=pk)

    def encrypt_zero(self, pk) -> Ciphertext:
        return Ciphertext(self.id, np.zeros(self.S, dtype=np.uint64), key_id=pk)

    def decrypt(self, sk, ct) -> np.ndarray:
        self._check(ct)
        if ct.key_id is not None and sk is not None and ct.key_id != sk:
            raise DecryptionIntegrityError("ciphertext was encrypted under a different key")
        return ct.payload.copy()

    def _new(self, payload, *srcs):
        kid = next((c.key_id for c in srcs if c.key_id is not None), None)
        return Ciphertext(self.id, payload, ops=max(c.ops for c in srcs) + 1, key_id=kid)

    def add(self, a, b):
        self._check(a, b)
        return self._new(add_mod(a.payload, b.payload, self.q), a, b)

    def sub(self, a, b):
        self._check(a, b)
        return self._new(sub_mod(a.payload, b.payload, self.q), a, b)

    def neg(self, a):
        self._check(a)
        return self._new(neg_mod(a.payload, self.q), a)

    def add_plain(self, a, p):
        self._check(a)
        return self._new(add_mod(a.payload, self._plain(p), self.q), a)

    def sub_plain(self, a, p):
        self._check(a)
        return self._new(sub_mod(a.payload, self._plain(p), self.q), a)

    def mul_plain(self, a, p):
        self._check(a)
        return self._new(mul_mod(a.payload, self._plain(p), self.q), a)

    def mul_ct(self, a, b):
        self._check(a, b)
        return self._new(mul_mod(a.payload, b.payload, self.q), a, b)

    def _rotate_once(self, ct, step, rotation_keys):
        return self._new(np.roll(ct.payload, step), ct)

    def _ct_payload(self, ct):
        self._check(ct)
        return ct.payload.astype("<u8").tobytes()

    def _ct_from_payload(self, payload):
        if len(payload) != 8 * self.S:
            raise SerializationError(f"expected {8 * self.S} payload bytes, got {len(payload)}")
        v = np.frombuffer(payload, dtype="<u8").astype(np.uint64)
        if (v >= np.uint64(self.q)).any():
            raise SerializationError("slot value out of range")
        return Ciphertext(self.id, v)

    def _pk_payload(self, keys):
        return bytes(keys.public_key)

    def _rk_payload(self, rk):
        shifts = sorted(rk.shifts)
        return struct.pack(f"<I{len(shifts)}q", len(shifts), *shifts)

    def _sk_payload(self, keys):
        return bytes(keys.secret_key)

    def _load_keys(self, parts):
        pk = parts["pk"]
        (count,) = struct.unpack_from("<I", parts["rk"])
        shifts = struct.unpack_from(f"<{count}q", parts["rk"], 4)
        sk = parts.get("sk")
        if sk is not None and sk != pk:
            raise SerializationError("secret and public key do not match")
        return KeyMaterial(self.params, pk, RotationKeys(frozenset(shifts), {}, pk), secret_key=sk, key_id=pk)

    def ciphertext_size(self) -> int:
        return _HEADER.size + 8 * self.S


def make_backend(params: PheParams, seed=None) -> Backend:
    """Backend instance for ``params``; ``seed`` fixes its encryption randomness."""
    if params.backend_id == TRANSPARENT:
        return TransparentBackend(params, seed)
    from .bfv import LatticeBackend

    return LatticeBackend(params, seed)


def keygen(params: PheParams, shifts=(), seed=None) -> KeyMaterial:
    return make_backend(params, seed).keygen(shifts, seed=seed)
