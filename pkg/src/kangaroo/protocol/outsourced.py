"""Outsourced inference: a cloud provider (CSP) evaluates an encrypted model.

The model owner keeps the secret key and the flip signs; the CSP holds the
encrypted thresholds, weights, real-node indicators and selection masks; the
user sends its encrypted input and a plain mask T'. Encrypted model data means
ciphertext-ciphertext products, so only backends with ``mul_ct`` qualify.

Dummy nodes whose children were swapped must route right, but zeroing every
dummy comparison sends them left. The CSP therefore also holds
Enc((1 - psi) * [upsilon = -1]) and adds it to the recovered branch bits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UnsupportedOperation
from ..model import PackedModel
from ..phe import centered, make_backend
from ..rand import make_rng
from .comparison import compare_blind, sample_blinding, sign_bits
from .path import PathPlan, path_blind, path_unblind, sample_path_blinding
from .selection import block_start_mask, block_sum, selection_shifts


@dataclass
class EncryptedModel:
    """What the CSP receives from the model owner."""

    Y: list
    W: list
    P: list
    masks: list  # per tree (interleaved) or per node group (adaptive)
    dummy_swap: list
    structures: list
    layout: object


@dataclass
class OutsourcedResult:
    pi: int
    messages: list = field(default_factory=list)  # (sender, receiver, name, ciphertext count)
    views: dict = field(default_factory=dict)


def outsource_model(backend, keys, pm: PackedModel) -> EncryptedModel:
    """Model owner: encrypt the packed model for the CSP."""
    enc = lambda v: backend.encrypt(keys.public_key, v)  # noqa: E731
    lay = pm.layout
    if lay.mode == "interleaved":
        masks = [enc(pm.tree_mask(k)) for k in range(lay.tree_count)]
    else:
        masks = [enc(pm.group_mask(g)) for g in range(lay.node_groups)]
    minus = np.uint64(pm.q - 1)
    swap = [((pm.P[g] == 0) & (pm.U[g] == minus)).astype(np.uint64) for g in range(lay.node_groups)]
    return EncryptedModel([enc(v) for v in pm.Y], [enc(v) for v in pm.W], [enc(v) for v in pm.P], masks,
                          [enc(v) for v in swap], list(pm.structures), lay)


def _csp_select(be, keys, em: EncryptedModel, ct_x):
    lay = em.layout
    if lay.mode == "interleaved":
        out = []
        for g in range(lay.node_groups):
            ks = [k for k in range(lay.tree_count) if k // lay.block == g]
            keep = block_start_mask(be.S, lay.block, len(lay.node_slots[ks[0]]))
            acc = None
            for m, k in enumerate(ks):
                sel = block_sum(be, be.mul_ct(ct_x, em.masks[k]), lay.block, keys)
                sel = be.rotate(be.mul_plain(sel, keep), m, keys.rotation_keys)
                acc = sel if acc is None else be.add(acc, sel)
            out.append(acc)
        return out
    return [block_sum(be, be.mul_ct(ct_x, em.masks[g]), lay.block, keys) for g in range(lay.node_groups)]


def outsourced_infer(params, pm: PackedModel, xq, *, seed=None, T_prime=None, flip_correction: bool = True,
                     dummy_swap_fix: bool = True, backend=None, keys=None) -> OutsourcedResult:
    """Run the three-party flow in-process and return the user's result.

    ``flip_correction`` and ``dummy_swap_fix`` exist for ablation only.
    """
    be = backend or make_backend(params, seed)
    if not be.supports_ct_mul:
        raise UnsupportedOperation(f"outsourced inference needs ciphertext products, which the {be.id} backend lacks")
    rng = make_rng(seed)
    lay, q = pm.layout, pm.q
    if keys is None:
        keys = be.keygen(selection_shifts(lay.block), seed=int(rng.integers(0, 2**63)))
    owner_sk, pk = keys.secret_key, keys.public_key
    em = outsource_model(be, keys, pm)
    plan = PathPlan.build(em.structures, lay)
    res = OutsourcedResult(0)
    log = res.messages.append

    # user: encrypted input and mask
    if T_prime is None:
        T_prime = rng.integers(0, q, size=be.S, dtype=np.uint64)
    ct_x = be.encrypt(pk, lay.input_vector(xq))
    log(("user", "csp", "input", 1))

    # CSP: selection and blinded comparison against the encrypted thresholds
    xs = _csp_select(be, keys, em, ct_x)
    blind = [sample_blinding(rng, q, params.zeta, lay.node_mask(g), pm.comparison) for g in range(lay.node_groups)]
    cts = [compare_blind(be, x, em.Y[g], blind[g]) for g, x in enumerate(xs)]
    log(("csp", "server", "compare_blinded", len(cts)))

    # owner: sign bits, flipped where children were swapped
    node_masks = [lay.node_mask(g) for g in range(lay.node_groups)]
    vbits = []
    for g, c in enumerate(cts):
        v = be.decrypt(owner_sk, c)
        bits = sign_bits(v, q)
        if flip_correction:
            flip = (pm.U[g] == np.uint64(q - 1)) & (node_masks[g] == 1)
            bits = np.where(flip, np.uint64(1) - bits, bits).astype(np.uint64)
        vbits.append(be.encrypt(pk, bits))
    log(("server", "csp", "compare_result", len(vbits)))

    # CSP: recovery with the dummy correction
    C = []
    for g, vb in enumerate(vbits):
        s = blind[g].sign_mask()
        cp = (s == np.uint64(q - 1)).astype(np.uint64)
        c = be.add(be.mul_plain(em.P[g], cp), be.mul_ct(be.mul_plain(em.P[g], s), vb))
        if dummy_swap_fix:
            c = be.add(c, em.dummy_swap[g])
        C.append(c)

    # path evaluation: CSP plays the server, the owner the key holder
    pb = sample_path_blinding(rng, plan, q)
    ip = path_blind(be, C, pb)
    log(("csp", "server", "path_blinded", len(ip)))
    iprime = [be.decrypt(owner_sk, c) for c in ip]
    res.views["path"] = iprime
    costs = [be.encrypt(pk, v) for v in plan.client_costs(iprime, q)]
    log(("server", "csp", "path_costs", len(costs)))
    I = path_unblind(be, costs, pb)  # noqa: E741
    pblind = [sample_blinding(rng, q, params.zeta, plan.leaf_active[g], pm.comparison) for g in range(lay.leaf_groups)]
    zero = np.zeros(be.S, dtype=np.uint64)
    v2 = [compare_blind(be, i, zero, pblind[g], "path", negate=True) for g, i in enumerate(I)]
    log(("csp", "server", "path_cmp_blinded", len(v2)))
    v2bits = [be.encrypt(pk, sign_bits(be.decrypt(owner_sk, c), q)) for c in v2]
    log(("server", "csp", "path_cmp_result", len(v2bits)))
    T = []
    for g, vb in enumerate(v2bits):
        s = pblind[g].sign_mask()
        cp = (s == np.uint64(q - 1)).astype(np.uint64)
        ind = be.add_plain(be.mul_plain(vb, s), cp)
        T.append(be.mul_ct(ind, em.W[g]))

    # response: CSP -> owner -> user
    masked = be.add_plain(be.sum_ciphertexts(T), T_prime)
    log(("csp", "server", "response", 1))
    total = sum(int(v) for v in be.decrypt(owner_sk, masked)) % q
    log(("server", "user", "sum", 0))
    res.pi = centered((total - sum(int(v) for v in T_prime)) % q, q)
    return res


__all__ = ["EncryptedModel", "OutsourcedResult", "outsource_model", "outsourced_infer"]
