"""Oblivious packed comparison.

The server blinds the difference ``d = X' - Y`` slotwise as
``V = A*R*d + B*R`` with ``zeta > A > B > 0`` and a random sign ``R``; the key
holder only learns the sign of ``V`` and returns the bit ``V' = [V >= 0]``.
The server removes the sign mask with ``C = C' + R*V'`` (``C' = [R = -1]``),
which leaves ``C = [d >= 0]`` encrypted.

The enhanced variant maps operands to ``2X'`` and ``2Y - 1`` so the blinded
difference ``2d + 1`` is odd and never zero, and adds a second sign ``R2``;
recovery uses the combined sign ``R*R2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BlindingReuseError, ParameterError
from ..phe import add_mod, centered_array, mul_mod, neg_mod, sub_mod

B_MIN = 1
VARIANTS = ("base", "plus")


def _signs(rng, size, q):
    return np.where(rng.integers(0, 2, size=size) == 1, np.uint64(1), np.uint64(q - 1)).astype(np.uint64)


@dataclass(eq=False)
class ComparisonBlinding:
    """Single-use blinding for one comparison over one ciphertext.

    ``R`` and ``R2`` hold 1 or q-1 at active slots and 0 elsewhere; ``R2`` is all
    ones (at active slots) for the base variant. ``F`` is filler for inactive slots.
    """

    q: int
    variant: str
    active: np.ndarray
    A: np.ndarray
    B: np.ndarray
    R: np.ndarray
    R2: np.ndarray
    F: np.ndarray
    adjusted: np.ndarray | None = None  # recovery sign after forest adjustment
    c_prime: np.ndarray | None = None
    _used: set = field(default_factory=set)

    def sign_mask(self) -> np.ndarray:
        """Effective recovery sign before forest adjustment (R for base, R*R2 for plus)."""
        return mul_mod(self.R, self.R2, self.q)

    def recovery(self):
        """(sign mask, C') used by the server to strip the sign."""
        if self.adjusted is not None:
            return self.adjusted, self.c_prime
        s = self.sign_mask()
        return s, (s == np.uint64(self.q - 1)).astype(np.uint64)

    def use(self, stage: str):
        if stage in self._used:
            raise BlindingReuseError(f"comparison blinding already used for {stage}")
        self._used.add(stage)


def sample_blinding(rng, q: int, zeta: int, active, variant: str = "base") -> ComparisonBlinding:
    """A uniform in [B_MIN+1, zeta-1], B uniform in [B_MIN, A-1], signs uniform."""
    if variant not in VARIANTS:
        raise ParameterError(f"unknown comparison variant {variant!r}")
    if zeta <= B_MIN + 1:
        raise ParameterError("precision too small for blinding")
    active = np.asarray(active).astype(bool)
    S = active.shape[0]
    A = rng.integers(B_MIN + 1, zeta, size=S, dtype=np.uint64)
    B = (rng.integers(0, 1 << 62, size=S, dtype=np.uint64) % (A - np.uint64(B_MIN))) + np.uint64(B_MIN)
    R = _signs(rng, S, q)
    R2 = _signs(rng, S, q) if variant == "plus" else np.ones(S, dtype=np.uint64)
    F = rng.integers(0, q, size=S, dtype=np.uint64)
    zero = np.uint64(0)
    A, B, R, R2 = (np.where(active, v, zero) for v in (A, B, R, R2))
    F = np.where(active, zero, F)
    return ComparisonBlinding(q, variant, active, A, B, R, R2, F)


def forest_compare_adjust(blinding: ComparisonBlinding, U, P):
    """Fold flips and dummies into the recovery sign.

    sign <- sign * U, zeroed where P = 0; C' = 1 iff sign = -1 or (U = -1 and P = 0).
    Real unswapped slots give the comparison, real swapped its negation, dummy
    unswapped 0 and dummy swapped 1.
    """
    q = blinding.q
    U = np.asarray(U, dtype=np.uint64)
    P = np.asarray(P, dtype=np.uint64)
    s = mul_mod(blinding.sign_mask(), U, q)
    s = np.where(P == 1, s, np.uint64(0))
    minus = np.uint64(q - 1)
    cp = ((s == minus) | ((U == minus) & (P == 0))).astype(np.uint64)
    blinding.adjusted, blinding.c_prime = s, cp
    return s, cp


def blind_plain_operand(blinding: ComparisonBlinding, Y):
    """(multiplier for X', plaintext addend) such that V = X' * mult + addend."""
    q = blinding.q
    ar = mul_mod(blinding.A, blinding.sign_mask(), q)
    br = mul_mod(blinding.B, blinding.R, q)
    Y = np.asarray(Y, dtype=np.uint64)
    if blinding.variant == "base":
        mult = ar
        addend = sub_mod(br, mul_mod(ar, Y, q), q)
    else:
        mult = add_mod(ar, ar, q)
        one_minus_2y = sub_mod(np.ones_like(Y), add_mod(Y, Y, q), q)
        addend = add_mod(mul_mod(ar, one_minus_2y, q), br, q)
    return mult, add_mod(addend, blinding.F, q)


def compare_blind(backend, ct_x, Y, blinding: ComparisonBlinding, stage: str = "compare", negate: bool = False):
    """Server: blinded value V for operands X' (ciphertext) and Y (plain vector or ciphertext).

    With ``negate`` the first operand is -X'; the sign is folded into the
    plaintext multiplier so no ciphertext negation is spent.
    """
    blinding.use(stage)
    if not isinstance(Y, np.ndarray):
        ct_x = backend.sub(ct_x, Y) if not negate else backend.add(ct_x, Y)
        Y = np.zeros(backend.S, dtype=np.uint64)
    mult, addend = blind_plain_operand(blinding, Y)
    if negate:
        mult = neg_mod(mult, blinding.q)
    return backend.add_plain(backend.mul_plain(ct_x, mult), addend)


def sign_bits(v: np.ndarray, q: int) -> np.ndarray:
    """Key holder's rule: 0 if centered(v) < 0, else 1."""
    return (centered_array(v, q) >= 0).astype(np.uint64)


def compare_respond(backend, keys, ct_v):
    """Key holder: decrypt V and return Enc(V'). Also returns the decrypted view."""
    v = backend.decrypt(keys.secret_key, ct_v)
    return backend.encrypt(keys.public_key, sign_bits(v, backend.q)), v


def compare_recover(backend, ct_vbits, blinding: ComparisonBlinding):
    """Server: C = C' + sign * V'."""
    s, cp = blinding.recovery()
    return backend.add_plain(backend.mul_plain(ct_vbits, s), cp)


def compare_recover_times(backend, ct_vbits, blinding: ComparisonBlinding, W):
    """Server: C o W computed as V' o (sign o W) + C' o W, one multiplication deep."""
    s, cp = blinding.recovery()
    q = blinding.q
    return backend.add_plain(backend.mul_plain(ct_vbits, mul_mod(s, W, q)), mul_mod(cp, W, q))


def oblivious_compare(backend, ct_x, Y, blinding, keys, variant=None):
    """Both parties in-process. Returns (C ciphertext, key holder's view of V)."""
    if variant is not None and variant != blinding.variant:
        raise ParameterError("blinding sampled for a different variant")
    ct_v = compare_blind(backend, ct_x, Y, blinding)
    ct_bits, view = compare_respond(backend, keys, ct_v)
    return compare_recover(backend, ct_bits, blinding), view


def oblivious_compare_plus(backend, ct_x, Y, blinding, keys):
    if blinding.variant != "plus":
        raise ParameterError("enhanced comparison needs a 'plus' blinding")
    return oblivious_compare(backend, ct_x, Y, blinding, keys)


def scalar_compare_trace(d: int, A: int, B: int, R: int, q: int, variant: str = "base", R2: int = 1):
    """Plaintext trace of one slot: (V centered, V', C', C)."""
    if variant == "base":
        v = A * R * d + B * R
        s = R
    else:
        v = A * R * R2 * (2 * d + 1) + R * B
        s = R * R2
    v_res = v % q
    v_c = v_res if v_res <= (q - 1) // 2 else v_res - q
    vbit = 0 if v_c < 0 else 1
    cp = 1 if s == -1 else 0
    return v_c, vbit, cp, cp + s * vbit


def _interval_cases(a_lo, a_hi, b_lo, t_min, t_max, odd):
    """Per (R, R2, sign of t) case: bounds on |V| with V = R*(R2*A*t + B), B <= A-1.

    The sign of R2*A*t + B is fixed by the sign of R2*t whenever |t| >= 1, since
    A > B; for t = 0 (base variant only) V = R*B. Bounds come from the extreme
    points of each monotone piece.
    """
    cases = []
    for r in (1, -1):
        for r2 in (1, -1):
            for sign in ("neg", "nonneg"):
                if sign == "neg":
                    t_small, t_big = -1, t_min  # |t| from 1 to |t_min|
                else:
                    t_small, t_big = (1 if odd else 0), t_max
                tp_sign = r2 * (1 if sign == "nonneg" else -1)
                if t_small == 0:
                    # t = 0: |V| = B
                    lo = b_lo
                    hi = max(a_hi * abs(t_big) + (a_hi - 1), a_hi - 1)
                    v_sign = r
                elif tp_sign > 0:
                    lo = a_lo * abs(t_small) + b_lo
                    hi = a_hi * abs(t_big) + (a_hi - 1)
                    v_sign = r
                else:
                    lo = min(a * abs(t_small) - (a - 1) for a in (a_lo, a_hi))
                    hi = a_hi * abs(t_big) - b_lo
                    v_sign = -r
                s = r * r2
                vbit = 1 if v_sign > 0 else 0
                c = (1 if s == -1 else 0) + s * vbit
                cases.append({"R": r, "R2": r2, "d": sign, "min_abs_V": lo, "max_abs_V": hi,
                              "V_sign": v_sign, "C": c, "C_correct": c == (1 if sign == "nonneg" else 0)})
    return cases


def range_audit(zeta: int, q: int) -> dict:
    """Analytic range audit of the blinded value for both comparison variants.

    Base operands lie in [0, zeta], so d = X' - Y in [-zeta, zeta]. Enhanced
    operands lie in [0, zeta // 2] before premapping, so t = 2d + 1 is odd with
    |t| <= zeta + 1. A ranges over [B_MIN+1, zeta-1] and B over [B_MIN, A-1].
    """
    a_lo, a_hi = B_MIN + 1, zeta - 1
    half = zeta // 2
    base = [c for c in _interval_cases(a_lo, a_hi, B_MIN, -zeta, zeta, odd=False) if c["R2"] == 1]
    plus = _interval_cases(a_lo, a_hi, B_MIN, -2 * half + 1, 2 * half + 1, odd=True)
    bound = zeta * zeta + zeta
    return {
        "zeta": zeta,
        "q": q,
        "bound": bound,
        "bound_below_half_q": bound < q / 2,
        "base_cases": base,
        "plus_cases": plus,
        "base_min_abs_V": min(c["min_abs_V"] for c in base),
        "base_max_abs_V": max(c["max_abs_V"] for c in base),
        "plus_min_abs_V": min(c["min_abs_V"] for c in plus),
        "plus_max_abs_V": max(c["max_abs_V"] for c in plus),
        "plus_never_zero": min(c["min_abs_V"] for c in plus) >= 1,
        "plus_within_bound": max(c["max_abs_V"] for c in plus) < bound,
        "recovery_correct": all(c["C_correct"] for c in base + plus),
        # documented, not sampled: the base variant's asymmetric window
        "base_leak_window": 2 / (zeta + 1),
    }


__all__ = [
    "ComparisonBlinding", "compare_blind", "compare_recover", "compare_recover_times", "compare_respond",
    "forest_compare_adjust", "oblivious_compare", "oblivious_compare_plus", "range_audit",
    "sample_blinding", "scalar_compare_trace", "sign_bits",
]
