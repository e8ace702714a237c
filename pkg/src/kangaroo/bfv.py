"""RNS BFV over Z[x]/(x^N + 1): the lattice backend.

Ciphertexts are kept in NTT form over an RNS basis of NTT-friendly primes
below 2^32. Only the first batching row is used, so ``S = N/2`` slots with
single-cycle rotation; the second row is always zero.

Encryption scales by the exact rational Q/t (rounded), which keeps plaintext
multiplication noise at ``|v| * |p|`` without the ``Q mod t`` term.
Rotations are Galois automorphisms followed by key switching with a digit
decomposition of each RNS residue (base ``2^decomp_bits``).
"""
from __future__ import annotations

import hashlib
import math
import secrets
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import (
    BackendMismatch,
    DecryptionIntegrityError,
    MissingRotationKey,
    ParameterError,
    SerializationError,
)
from .ntheory import bit_reverse, primitive_root_of_unity
from .phe import (
    LATTICE,
    SECURITY_TABLE_128,
    Backend,
    Ciphertext,
    KeyMaterial,
    PheParams,
    RotationKeys,
    _HEADER,
    plain_vec,
    rotation_steps,
)
from .rand import make_rng

NOISE_TAIL = 7.0  # decryption bound in standard deviations


# number-theoretic transform --------------------------------------------------

class NttContext:
    """Twiddle tables for a batch of moduli at ring degree n."""

    def __init__(self, n: int, moduli):
        self.n = n
        self.moduli = np.array(moduli, dtype=np.uint64)
        self.logn = n.bit_length() - 1
        rows = len(moduli)
        psi = np.empty((rows, n), dtype=np.uint64)
        psi_s = np.empty_like(psi)
        ipsi = np.empty_like(psi)
        ipsi_s = np.empty_like(psi)
        n_inv = np.empty(rows, dtype=np.uint64)
        n_inv_s = np.empty(rows, dtype=np.uint64)
        rev = [bit_reverse(k, self.logn) for k in range(n)]
        self.roots = []
        for r, q in enumerate(moduli):
            q = int(q)
            w = primitive_root_of_unity(2 * n, q)
            self.roots.append(w)
            wi = pow(w, -1, q)
            pw, pwi = [1] * n, [1] * n
            for k in range(1, n):
                pw[k] = pw[k - 1] * w % q
                pwi[k] = pwi[k - 1] * wi % q
            row = [pw[rev[k]] for k in range(n)]
            irow = [pwi[rev[k]] for k in range(n)]
            psi[r] = row
            ipsi[r] = irow
            psi_s[r] = [(x << 64) // q for x in row]
            ipsi_s[r] = [(x << 64) // q for x in irow]
            ni = pow(n, -1, q)
            n_inv[r] = ni
            n_inv_s[r] = (ni << 64) // q
        self.tables = (psi, psi_s)
        self.itables = (ipsi, ipsi_s, n_inv, n_inv_s)
        # output index k of the forward transform is the evaluation at w^(2*rev(k)+1)
        self.exponents = np.array([2 * rev[k] + 1 for k in range(n)], dtype=np.int64)
        self._index_of_exponent = np.empty(2 * n, dtype=np.int64)
        self._index_of_exponent[self.exponents] = np.arange(n)

    def forward(self, a: np.ndarray, impl=None) -> np.ndarray:
        """NTT of each row (row r mod moduli[r]); returns a new array."""
        out = np.array(a, dtype=np.uint64, order="C", copy=True)
        return kernels.ntt_forward(out, self.moduli, *self.tables, impl=impl)

    def inverse(self, a: np.ndarray, impl=None) -> np.ndarray:
        out = np.array(a, dtype=np.uint64, order="C", copy=True)
        return kernels.ntt_inverse(out, self.moduli, *self.itables, impl=impl)

    def tiled(self, times: int) -> "NttContext":
        """Context whose rows repeat this one's moduli ``times`` times."""
        return _tiled_context(self, times)

    def automorphism_permutation(self, g: int) -> np.ndarray:
        """perm such that NTT(sigma_g(a)) = NTT(a)[perm]."""
        return self._index_of_exponent[(self.exponents * g) % (2 * self.n)]


@lru_cache(maxsize=32)
def ntt_context(n: int, moduli: tuple) -> NttContext:
    return NttContext(n, moduli)


@lru_cache(maxsize=32)
def _tiled_context(ctx, times):
    t = object.__new__(NttContext)
    t.__dict__.update(ctx.__dict__)
    t.moduli = np.tile(ctx.moduli, times)
    t.tables = tuple(np.ascontiguousarray(np.tile(x, (times, 1))) for x in ctx.tables)
    ipsi, ipsi_s, n_inv, n_inv_s = ctx.itables
    t.itables = (np.ascontiguousarray(np.tile(ipsi, (times, 1))), np.ascontiguousarray(np.tile(ipsi_s, (times, 1))),
                 np.tile(n_inv, times), np.tile(n_inv_s, times))
    return t


@dataclass
class RingPoly:
    """Element of Z_Q[x]/(x^N+1) in RNS form; ``ntt`` says which domain the rows are in."""

    coeffs: np.ndarray
    moduli: tuple
    ntt: bool = False

    @property
    def n(self) -> int:
        return self.coeffs.shape[-1]

    @property
    def context(self) -> NttContext:
        return ntt_context(self.n, self.moduli)

    @classmethod
    def from_ints(cls, values, moduli) -> "RingPoly":
        rows = [[int(v) % int(q) for v in values] for q in moduli]
        return cls(np.array(rows, dtype=np.uint64), tuple(int(q) for q in moduli))

    def to_ntt(self) -> "RingPoly":
        return self if self.ntt else RingPoly(self.context.forward(self.coeffs), self.moduli, True)

    def to_coeff(self) -> "RingPoly":
        return RingPoly(self.context.inverse(self.coeffs), self.moduli, False) if self.ntt else self

    def _q(self):
        return np.array(self.moduli, dtype=np.uint64).reshape(-1, 1)

    def __add__(self, other: "RingPoly") -> "RingPoly":
        a, b = self._align(other)
        s = a.coeffs + b.coeffs
        q = self._q()
        return RingPoly(np.where(s >= q, s - q, s), self.moduli, a.ntt)

    def __mul__(self, other: "RingPoly") -> "RingPoly":
        a, b = self.to_ntt(), other.to_ntt()
        return RingPoly(kernels.mulmod(a.coeffs, b.coeffs, self._q()), self.moduli, True)

    def _align(self, other):
        if other.moduli != self.moduli:
            raise BackendMismatch("ring elements over different moduli")
        if self.ntt == other.ntt:
            return self, other
        return self.to_ntt(), other.to_ntt()


def negacyclic_schoolbook(a, b, q: int) -> list[int]:
    """Reference product in Z_q[x]/(x^n+1), O(n^2)."""
    n = len(a)
    out = [0] * n
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            k = i + j
            if k < n:
                out[k] += x * y
            else:
                out[k - n] -= x * y
    return [v % q for v in out]


# batching --------------------------------------------------------------------

class BatchEncoder:
    """Maps S = N/2 slots mod t to plaintext polynomials mod t.

    Slot j is the evaluation at w^(3^j); rotating right by r is the
    automorphism x -> x^(3^-r). The conjugate row (w^(-3^j)) stays zero.
    """

    def __init__(self, n: int, t: int):
        if t % (2 * n) != 1:
            raise ParameterError(f"plaintext modulus {t} is not 1 mod {2 * n}")
        self.n = n
        self.t = t
        self.slots = n // 2
        self.ctx = ntt_context(n, (t,))
        exps = np.array([pow(3, j, 2 * n) for j in range(self.slots)], dtype=np.int64)
        self.slot_index = self.ctx._index_of_exponent[exps]

    def encode(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.uint64)
        ev = np.zeros((1, self.n), dtype=np.uint64)
        ev[0, self.slot_index] = v
        return self.ctx.inverse(ev)[0]

    def decode(self, poly) -> np.ndarray:
        ev = self.ctx.forward(np.asarray(poly, dtype=np.uint64).reshape(1, -1))[0]
        return ev[self.slot_index]

    def galois_element(self, r: int) -> int:
        """Automorphism exponent that rotates slots right by r."""
        return pow(3, (-r) % self.slots, 2 * self.n)


# keys and encoded plaintexts -------------------------------------------------

def _expand_uniform(seed: bytes, tag: bytes, moduli, n: int) -> np.ndarray:
    """Deterministic uniform polynomial (NTT domain) from a public seed."""
    raw = hashlib.shake_256(seed + tag).digest(8 * n * len(moduli))
    words = np.frombuffer(raw, dtype="<u8").astype(np.uint64).reshape(len(moduli), n)
    return words % np.array(moduli, dtype=np.uint64).reshape(-1, 1)


@dataclass(frozen=True, eq=False)
class SwitchKey:
    galois: int
    seed: bytes
    b: np.ndarray  # (digits, L, N), NTT form
    a: np.ndarray  # expanded from seed


@dataclass(frozen=True, eq=False)
class PublicKey:
    seed: bytes
    b: np.ndarray
    a: np.ndarray


@dataclass(frozen=True, eq=False)
class SecretKey:
    s: np.ndarray  # ternary coefficients, int8
    s_ntt: np.ndarray


@dataclass(frozen=True, eq=False)
class EncodedPlain:
    """Plaintext vector pre-transformed for the lattice backend.

    ``mul`` is the centered lift in NTT form, ``add`` the scaled message in NTT
    form, ``rms`` the root-mean-square coefficient size used for noise tracking.
    """

    slots: np.ndarray
    mul: np.ndarray
    add: np.ndarray
    rms: float


class LatticeBackend(Backend):
    id = LATTICE

    def __init__(self, params: PheParams, seed=None):
        super().__init__(params, seed)
        if max(params.coeff_moduli) >= 1 << 32:
            raise ParameterError("lattice coefficient moduli must be below 2^32")
        self.n = params.ring_degree
        self.t = params.plain_modulus
        self.moduli = tuple(int(p) for p in params.coeff_moduli)
        self.L = len(self.moduli)
        self.qcol = np.array(self.moduli, dtype=np.uint64).reshape(-1, 1)
        self.ctx = ntt_context(self.n, self.moduli)
        self.encoder = BatchEncoder(self.n, self.t)
        self.Q = math.prod(self.moduli)
        self._crt = [(self.Q // p) * pow(self.Q // p, -1, p) % self.Q for p in self.moduli]
        self.log_delta_half = math.log2(self.Q / (2 * self.t))
        # digit layout: (prime index, shift) per digit
        w = params.decomp_bits
        self.digits = []
        for i, p in enumerate(self.moduli):
            if w is None or w >= p.bit_length():
                self.digits.append((i, 0, p.bit_length()))
            else:
                for k in range(0, p.bit_length(), w):
                    self.digits.append((i, k, w))
        self.dctx = self.ctx.tiled(len(self.digits))
        e = params.error_std
        self.fresh_noise = math.sqrt(e * e + 2 * self.n * (2 / 3) * e * e) + 0.5
        var_digit = max((1 << bits) ** 2 / 3.0 for _, _, bits in self.digits)
        self.switch_noise = math.sqrt(len(self.digits) * self.n * var_digit) * e

    # sampling
    def _ternary(self, rng):
        return rng.integers(-1, 2, size=self.n).astype(np.int64)

    def _gauss(self, rng, rows=1):
        e = self.params.error_std
        return np.clip(np.rint(rng.normal(0.0, e, size=(rows, self.n))), -6 * e, 6 * e).astype(np.int64)

    def _lift(self, small: np.ndarray) -> np.ndarray:
        """Signed integer coefficients -> RNS rows (coefficient domain)."""
        small = np.asarray(small, dtype=np.int64).reshape(1, self.n)
        return (small % self.qcol.astype(np.int64)).astype(np.uint64)

    def _to_ntt(self, rows):
        return self.ctx.forward(rows)

    def _mul(self, a, b):
        return (a * b) % self.qcol

    def _add(self, a, b):
        s = a + b
        return np.where(s >= self.qcol, s - self.qcol, s)

    def _sub(self, a, b):
        return np.where(a >= b, a - b, a + self.qcol - b)

    # keys
    def check_security(self):
        if self.params.security_level >= 128:
            bound = SECURITY_TABLE_128.get(self.n)
            if bound is None or self.params.log_q_total > bound:
                raise ParameterError(
                    f"log2 Q = {self.params.log_q_total:.1f} exceeds the 128-bit bound {bound} for N = {self.n}")

    def keygen(self, shifts=(), seed=None) -> KeyMaterial:
        self.check_security()
        rng = make_rng(seed) if seed is not None else None

        def draw(fn):
            return fn(rng) if rng is not None else self._draw(fn)

        s = draw(self._ternary)
        s_ntt = self._to_ntt(self._lift(s))
        sk = SecretKey(s.astype(np.int8), s_ntt)
        pk_seed = draw(lambda g: bytes(g.integers(0, 256, 32, dtype=np.uint8))) if rng else secrets.token_bytes(32)
        a = _expand_uniform(pk_seed, b"pk", self.moduli, self.n)
        e = self._to_ntt(self._lift(draw(self._gauss)[0]))
        b = self._sub(np.zeros_like(a), self._add(self._mul(a, s_ntt), e))
        pk = PublicKey(pk_seed, b, a)
        keys = {}
        for r in sorted({int(x) for x in shifts}):
            if r % self.S == 0:
                continue
            g = self.encoder.galois_element(r)
            ks_seed = draw(lambda gen: bytes(gen.integers(0, 256, 32, dtype=np.uint8))) if rng else secrets.token_bytes(32)
            keys[r] = self._switch_key(sk, g, ks_seed, draw)
        kid = hashlib.sha256(pk_seed + b.tobytes()[:64]).digest()[:16]
        return KeyMaterial(self.params, pk, RotationKeys(frozenset(keys), keys, kid), secret_key=sk, key_id=kid)

    def _switch_key(self, sk, g, seed, draw) -> SwitchKey:
        perm = self.ctx.automorphism_permutation(g)
        s_g = sk.s_ntt[:, perm]
        nd = len(self.digits)
        a = _expand_uniform(seed, b"ks", self.moduli * nd, self.n).reshape(nd, self.L, self.n)
        errs = draw(lambda gen: self._gauss(gen, nd))
        b = np.empty_like(a)
        for d, (i, shift, _) in enumerate(self.digits):
            e = self._to_ntt(self._lift(errs[d]))
            bd = self._sub(e, self._mul(a[d], sk.s_ntt))
            gadget = pow(2, shift, self.moduli[i])
            row = (s_g[i] * np.uint64(gadget)) % np.uint64(self.moduli[i])
            bd[i] = (bd[i] + row) % np.uint64(self.moduli[i])
            b[d] = bd
        return SwitchKey(g, seed, b, a)

    # encoding of plaintext operands
    def encode_plain(self, v) -> EncodedPlain:
        if isinstance(v, EncodedPlain):
            return v
        v = plain_vec(v, self.params)
        poly = self.encoder.encode(v)
        t = self.t
        signed = np.where(poly > np.uint64(t // 2), poly.astype(np.int64) - np.int64(t), poly.astype(np.int64))
        mul = self._to_ntt(self._lift(signed))
        add = self._to_ntt(self._scale(poly))
        rms = float(np.sqrt(np.mean(signed.astype(np.float64) ** 2)))
        return EncodedPlain(v, mul, add, rms)

    def _scale(self, poly) -> np.ndarray:
        """round(Q * m / t) per coefficient, as RNS rows."""
        Q, t = self.Q, self.t
        scaled = (poly.astype(object) * Q + t // 2) // t
        return np.array([(scaled % p).astype(np.uint64) for p in self.moduli], dtype=np.uint64)

    # encryption
    def encrypt(self, pk: PublicKey, v, rng=None) -> Ciphertext:
        return self.add_plain(self.encrypt_zero(pk, rng), v)

    def encrypt_zero(self, pk: PublicKey, rng=None) -> Ciphertext:
        """Fresh encryption of zero; adding a plaintext later gives a fresh encryption of it."""
        def sample(g):
            return self._ternary(g), self._gauss(g, 2)

        u, e = sample(rng) if rng is not None else self._draw(sample)
        u = self._to_ntt(self._lift(u))
        e0 = self._to_ntt(self._lift(e[0]))
        e1 = self._to_ntt(self._lift(e[1]))
        c0 = self._add(self._mul(pk.b, u), e0)
        c1 = self._add(self._mul(pk.a, u), e1)
        return Ciphertext(self.id, np.stack([c0, c1]), noise_bits=self.fresh_noise)

    def _raw_decrypt(self, sk: SecretKey, ct: Ciphertext) -> np.ndarray:
        c0, c1 = ct.payload
        x = self.ctx.inverse(self._add(c0, self._mul(c1, sk.s_ntt)))
        acc = np.zeros(self.n, dtype=object)
        for i in range(self.L):
            acc = acc + x[i].astype(object) * self._crt[i]
        return acc % self.Q

    def decrypt(self, sk: SecretKey, ct: Ciphertext) -> np.ndarray:
        self._check(ct)
        self._check_budget(ct)
        x = self._raw_decrypt(sk, ct)
        m = ((x * self.t + self.Q // 2) // self.Q) % self.t
        return self.encoder.decode(m.astype(np.uint64))

    def noise_budget(self, sk: SecretKey, ct: Ciphertext) -> float:
        """Measured bits of headroom: log2(Q/2t) - log2(max |noise|)."""
        x = self._raw_decrypt(sk, ct)
        m = (x * self.t + self.Q // 2) // self.Q
        err = max(abs(int(v)) for v in (x * self.t - m * self.Q)) / self.t
        return self.log_delta_half - math.log2(max(err, 1.0))

    def estimated_budget(self, ct: Ciphertext) -> float:
        return self.log_delta_half - math.log2(NOISE_TAIL * ct.noise_bits)

    def _check_budget(self, ct):
        if self.estimated_budget(ct) <= 0:
            raise DecryptionIntegrityError(
                f"noise budget exhausted (estimated {self.estimated_budget(ct):.1f} bits)")

    def _new(self, payload, noise):
        ct = Ciphertext(self.id, payload, noise_bits=noise)
        self._check_budget(ct)
        return ct

    # homomorphic operations
    def add(self, a, b):
        self._check(a, b)
        return self._new(np.stack([self._add(a.payload[0], b.payload[0]), self._add(a.payload[1], b.payload[1])]),
                         a.noise_bits + b.noise_bits)

    def sub(self, a, b):
        self._check(a, b)
        return self._new(np.stack([self._sub(a.payload[0], b.payload[0]), self._sub(a.payload[1], b.payload[1])]),
                         a.noise_bits + b.noise_bits)

    def neg(self, a):
        self._check(a)
        z = np.zeros_like(a.payload[0])
        return Ciphertext(self.id, np.stack([self._sub(z, a.payload[0]), self._sub(z, a.payload[1])]),
                          noise_bits=a.noise_bits)

    def add_plain(self, a, p):
        self._check(a)
        p = self.encode_plain(p)
        return self._new(np.stack([self._add(a.payload[0], p.add), a.payload[1]]), a.noise_bits + 0.5)

    def sub_plain(self, a, p):
        self._check(a)
        p = self.encode_plain(p)
        return self._new(np.stack([self._sub(a.payload[0], p.add), a.payload[1]]), a.noise_bits + 0.5)

    def mul_plain(self, a, p):
        self._check(a)
        p = self.encode_plain(p)
        noise = (a.noise_bits + 0.5) * math.sqrt(self.n) * max(p.rms, 1e-9)
        return self._new(np.stack([self._mul(a.payload[0], p.mul), self._mul(a.payload[1], p.mul)]),
                         max(noise, 0.5))

    def _rotate_once(self, ct, step, rotation_keys):
        key = rotation_keys.keys.get(step)
        if key is None:
            raise MissingRotationKey(f"no key material for shift {step}")
        perm = self.ctx.automorphism_permutation(key.galois)
        c0 = ct.payload[0][:, perm]
        c1 = ct.payload[1][:, perm]
        coeff = self.ctx.inverse(c1)
        nd = len(self.digits)
        digits = np.empty((nd, self.L, self.n), dtype=np.uint64)
        for d, (i, shift, bits) in enumerate(self.digits):
            dig = coeff[i] >> np.uint64(shift)
            if bits < 64:
                dig &= np.uint64((1 << bits) - 1)
            digits[d] = dig[None, :] % self.qcol
        dn = self.dctx.forward(digits.reshape(nd * self.L, self.n)).reshape(nd, self.L, self.n)
        acc0 = ((dn * key.b) % self.qcol).sum(axis=0) % self.qcol
        acc1 = ((dn * key.a) % self.qcol).sum(axis=0) % self.qcol
        return self._new(np.stack([self._add(c0, acc0), acc1]), ct.noise_bits + self.switch_noise)

    def rotate(self, ct, r, rotation_keys):
        if rotation_keys.keys == {} and rotation_keys.shifts:
            raise BackendMismatch("rotation keys carry no lattice key material")
        return super().rotate(ct, r, rotation_keys)

    # serialization
    def _rows_bytes(self, arr) -> bytes:
        return np.ascontiguousarray(arr, dtype="<u4").tobytes()

    def _rows_from(self, buf, offset, count):
        size = count * self.L * self.n * 4
        if len(buf) < offset + size:
            raise SerializationError("truncated lattice payload")
        arr = np.frombuffer(buf, dtype="<u4", count=count * self.L * self.n, offset=offset)
        arr = arr.astype(np.uint64).reshape(count, self.L, self.n)
        if (arr >= self.qcol[None]).any():
            raise SerializationError("residue out of range")
        return arr, offset + size

    def _ct_payload(self, ct):
        self._check(ct)
        return struct.pack("<d", ct.noise_bits) + self._rows_bytes(ct.payload)

    def _ct_from_payload(self, payload):
        if len(payload) != 8 + 2 * self.L * self.n * 4:
            raise SerializationError("lattice ciphertext has the wrong size")
        (noise,) = struct.unpack_from("<d", payload)
        arr, _ = self._rows_from(payload, 8, 2)
        return Ciphertext(self.id, arr, noise_bits=noise)

    def _pk_payload(self, keys):
        pk = keys.public_key
        return pk.seed + self._rows_bytes(pk.b)

    def _rk_payload(self, rk):
        out = [struct.pack("<I", len(rk.keys))]
        for r in sorted(rk.keys):
            k = rk.keys[r]
            out.append(struct.pack("<qI", r, k.galois) + k.seed + self._rows_bytes(k.b))
        return b"".join(out)

    def _sk_payload(self, keys):
        return keys.secret_key.s.astype(np.int8).tobytes()

    def _load_keys(self, parts):
        pkp = parts["pk"]
        seed = pkp[:32]
        b, _ = self._rows_from(pkp, 32, 1)
        pk = PublicKey(seed, b[0], _expand_uniform(seed, b"pk", self.moduli, self.n))
        rkp = parts["rk"]
        (count,) = struct.unpack_from("<I", rkp)
        off = 4
        nd = len(self.digits)
        keys = {}
        for _ in range(count):
            r, g = struct.unpack_from("<qI", rkp, off)
            off += 12
            kseed = rkp[off:off + 32]
            off += 32
            kb, off = self._rows_from(rkp, off, nd)
            a = _expand_uniform(kseed, b"ks", self.moduli * nd, self.n).reshape(nd, self.L, self.n)
            if g != self.encoder.galois_element(r):
                raise SerializationError(f"rotation key for shift {r} has wrong Galois element")
            keys[r] = SwitchKey(g, kseed, kb, a)
        if off != len(rkp):
            raise SerializationError("trailing bytes after rotation keys")
        sk = None
        if "sk" in parts:
            s = np.frombuffer(parts["sk"], dtype=np.int8).astype(np.int64)
            if s.shape != (self.n,) or np.abs(s).max(initial=0) > 1:
                raise SerializationError("malformed secret key")
            sk = SecretKey(s.astype(np.int8), self._to_ntt(self._lift(s)))
        kid = hashlib.sha256(seed + b[0].tobytes()[:64]).digest()[:16]
        return KeyMaterial(self.params, pk, RotationKeys(frozenset(keys), keys, kid), secret_key=sk, key_id=kid)

    def ciphertext_size(self) -> int:
        return _HEADER.size + 8 + 2 * self.L * self.n * 4

    def plain_mul_capacity(self) -> float:
        """Rough count of uniform plaintext multiplications a fresh ciphertext survives."""
        per_mul = math.log2(math.sqrt(self.n) * self.t / math.sqrt(12))
        return (self.log_delta_half - math.log2(NOISE_TAIL * self.fresh_noise)) / per_mul


__all__ = ["BatchEncoder", "LatticeBackend", "NttContext", "RingPoly", "negacyclic_schoolbook",
           "ntt_context", "rotation_steps"]
