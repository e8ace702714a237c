"""Packed feature selection.

All selectors take the client's encrypted input ``X`` (quantized features
padded to the block size ``M*`` and repeated across the slots) and return
ciphertexts whose node slots hold the feature chosen by that node.
"""
from __future__ import annotations

import numpy as np

from ..phe import neg_mod, power_of_two_shifts


def _is_pow2(m: int) -> bool:
    return m > 0 and m & (m - 1) == 0


def _clog2(m: int) -> int:
    return (m - 1).bit_length()


def block_sum(backend, ct, block: int, keys):
    """Rotate-and-sum so each block start holds the sum of its block.

    Power-of-two blocks use log2(M*) doubling steps; other sizes use the
    pairwise division scheme, with the loop bound and final shift fixed by the
    original ceil(log2 M*).
    """
    rk = keys.rotation_keys
    if block == 1:
        return ct
    if _is_pow2(block):
        for i in range(block.bit_length() - 1):
            ct = backend.add(ct, backend.rotate(ct, -(1 << i), rk))
        return ct
    m = block
    levels = _clog2(block)
    x1 = ct
    x2 = backend.add(ct, backend.rotate(ct, -1, rk))
    if m % 2 == 0:
        x1 = x2
    for i in range(1, levels - 1):
        m -= m // 2
        if m % 2 == 0:
            x1 = backend.add(x2, backend.rotate(x1, -(1 << i), rk))
        x2 = backend.add(x2, backend.rotate(x2, -(1 << i), rk))
    return backend.add(x2, backend.rotate(x1, -(1 << (levels - 1)), rk))


def feature_select_I(backend, ct_x, block: int, mask, keys):
    """Non-interactive selection: mask, then block-sum into block starts."""
    return block_sum(backend, backend.mul_plain(ct_x, mask), block, keys)


def block_start_mask(slot_count: int, block: int, count: int) -> np.ndarray:
    v = np.zeros(slot_count, dtype=np.uint64)
    v[np.arange(count) * block] = 1
    return v


def feature_sel_pack(backend, ct_x, masks, block: int, tau_star: int, keys):
    """Interleaved packing for one group of up to M* trees sharing tau*.

    ``masks[m]`` is tree m's one-hot mask. Each tree's selection is cut to its
    block starts and rotated right by m before summation, so tree m's node n
    lands at slot n*M* + m.
    """
    keep = block_start_mask(backend.S, block, tau_star)
    out = None
    for m, mask in enumerate(masks):
        sel = backend.mul_plain(feature_select_I(backend, ct_x, block, mask, keys), keep)
        sel = backend.rotate(sel, m, keys.rotation_keys)
        out = sel if out is None else backend.add(out, sel)
    return out


def left_rotations(backend, ct_x, max_shift: int, keys) -> list:
    """[Rot(X, 0), Rot(X, -1), ..., Rot(X, -max_shift)] via a chain of unit left shifts."""
    out = [ct_x]
    for _ in range(max_shift):
        out.append(backend.rotate(out[-1], -1, keys.rotation_keys))
    return out


def select_diagonal(backend, rotations, diag_masks):
    """Depth-one selection: sum over d of Rot(X, -d) times the mask of slots needing shift d."""
    out = None
    for d, mask in sorted(diag_masks.items()):
        term = backend.mul_plain(rotations[d], mask)
        out = term if out is None else backend.add(out, term)
    return out


def selection_shifts(block: int) -> set[int]:
    """Rotation shifts any selector may request for this block size."""
    if block <= 1:
        return set()
    return power_of_two_shifts(block - 1) | {-1}


# interactive variant -----------------------------------------------------------

def blockwise_sums(v: np.ndarray, block: int, count: int, q: int) -> np.ndarray:
    """Vector with sum of block b at slot b*block (b < count), zero elsewhere."""
    v = np.asarray(v, dtype=np.uint64)
    out = np.zeros_like(v)
    for b in range(count):
        s = 0
        for x in v[b * block:(b + 1) * block]:
            s += int(x)
        out[b * block] = s % q
    return out


def feature_select_II_mask(backend, ct_x, mask, E):
    """Server: X o M + E, sent to the key holder."""
    return backend.add_plain(backend.mul_plain(ct_x, mask), E)


def feature_select_II_client(backend, keys, ct, block: int, count: int):
    """Key holder: decrypt, sum each block, re-encrypt the block sums."""
    v = backend.decrypt(keys.secret_key, ct)
    return backend.encrypt(keys.public_key, blockwise_sums(v, block, count, backend.q)), v


def feature_select_II_finish(backend, ct, E, block: int, count: int):
    """Server: subtract its own block sums of E."""
    return backend.add_plain(ct, neg_mod(blockwise_sums(E, block, count, backend.q), backend.q))


def feature_select_II(backend, ct_x, block: int, mask, keys, rng, E=None, count=None):
    """Interactive selection run in-process. Returns (result, client's decrypted view)."""
    count = backend.S // block if count is None else count
    if E is None:
        E = rng.integers(0, backend.q, size=backend.S, dtype=np.uint64)
    sent = feature_select_II_mask(backend, ct_x, mask, E)
    reply, view = feature_select_II_client(backend, keys, sent, block, count)
    return feature_select_II_finish(backend, reply, E, block, count), view

