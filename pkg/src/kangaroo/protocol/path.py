"""Packed path evaluation.

Branch bits ``C`` (0 = left, 1 = right) are masked as ``I' = C + R'``. The key
holder charges ``I'`` on left edges and ``1 - I'`` on right edges and sums the
charges along every root-to-leaf path into that leaf's slot. The server adds
its own per-leaf sums ``R''`` (``-R'`` on left edges, ``+R'`` on right edges),
which leaves the true path at 0 and every other leaf positive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError
from ..model import SlotLayout, leaf_order, validate_structure
from ..phe import neg_mod, sub_mod


@dataclass(frozen=True)
class PathPlan:
    """Every (leaf, ancestor) edge of every tree, flattened to slot indices.

    Node slots index the concatenation of node groups (group * S + slot); leaf
    slots the concatenation of leaf groups.
    """

    slot_count: int
    node_groups: int
    leaf_groups: int
    edge_leaf: np.ndarray
    edge_node: np.ndarray
    edge_right: np.ndarray  # 1 when the edge descends to the right child
    leaf_active: np.ndarray  # per leaf group, bool

    @classmethod
    def build(cls, structures, layout: SlotLayout) -> "PathPlan":
        S = layout.slot_count
        el, en, er = [], [], []
        for k, structure in enumerate(structures):
            validate_structure(structure)
            leaves = leaf_order(structure)
            ns, ls = layout.node_slots[k], layout.leaf_slots[k]
            if len(leaves) != len(ls) or len(structure) != len(ns):
                raise ProtocolError("path", f"structure of tree {k} disagrees with the layout "
                                            f"({len(leaves)} leaves vs {len(ls)} leaf slots)")
            node_flat = {h: int(g) * S + int(s) for h, (g, s) in zip(structure, ns)}
            for h, (g, s) in zip(leaves, ls):
                lf = int(g) * S + int(s)
                while h > 1:
                    parent = h // 2
                    el.append(lf)
                    en.append(node_flat[parent])
                    er.append(h & 1)
                    h = parent
        active = np.zeros(layout.leaf_groups * S, dtype=bool)
        for ls in layout.leaf_slots:
            active[ls[:, 0] * S + ls[:, 1]] = True
        return cls(S, layout.node_groups, layout.leaf_groups, np.array(el, dtype=np.int64),
                   np.array(en, dtype=np.int64), np.array(er, dtype=np.uint8),
                   active.reshape(layout.leaf_groups, S))

    def _accumulate(self, per_edge: np.ndarray, q: int) -> list[np.ndarray]:
        acc = np.zeros(self.leaf_groups * self.slot_count, dtype=np.uint64)
        # at most depth terms per leaf, each below q < 2^52: no uint64 overflow below depth 4096
        np.add.at(acc, self.edge_leaf, per_edge)
        acc %= np.uint64(q)
        return list(acc.reshape(self.leaf_groups, self.slot_count))

    def client_costs(self, i_prime: list[np.ndarray], q: int) -> list[np.ndarray]:
        """Key holder: per-leaf path sums of I' (left) and 1 - I' (right)."""
        flat = np.concatenate(i_prime).astype(np.uint64)
        v = flat[self.edge_node]
        right_cost = sub_mod(np.ones_like(v), v, q)
        per_edge = np.where(self.edge_right == 1, right_cost, v)
        return self._accumulate(per_edge, q)

    def server_offsets(self, r_prime: list[np.ndarray], q: int) -> list[np.ndarray]:
        """Server: per-leaf sums of -R' (left) and +R' (right)."""
        flat = np.concatenate(r_prime).astype(np.uint64)
        v = flat[self.edge_node]
        per_edge = np.where(self.edge_right == 1, v, neg_mod(v, q))
        return self._accumulate(per_edge, q)


@dataclass(eq=False)
class PathBlinding:
    R1: list  # R' per node group
    R2: list  # R'' per leaf group


def sample_path_blinding(rng, plan: PathPlan, q: int) -> PathBlinding:
    r1 = [rng.integers(0, q, size=plan.slot_count, dtype=np.uint64) for _ in range(plan.node_groups)]
    return PathBlinding(r1, plan.server_offsets(r1, q))


def path_blind(backend, ct_c: list, blinding: PathBlinding) -> list:
    """Server: I' = C + R' per node group."""
    return [backend.add_plain(c, r) for c, r in zip(ct_c, blinding.R1)]


def path_costs(backend, keys, ct_iprime: list, plan: PathPlan):
    """Key holder: decrypt I', build path sums, encrypt per leaf group. Returns (cts, views)."""
    views = [backend.decrypt(keys.secret_key, c) for c in ct_iprime]
    costs = plan.client_costs(views, backend.q)
    return [backend.encrypt(keys.public_key, c) for c in costs], views


def path_unblind(backend, ct_costs: list, blinding: PathBlinding) -> list:
    """Server: I = I'' + R''; the true path's leaf slot is 0, the others positive."""
    return [backend.add_plain(c, r) for c, r in zip(ct_costs, blinding.R2)]


def path_sums_plain(plan: PathPlan, bits: list[np.ndarray], q: int) -> list[np.ndarray]:
    """Plaintext path sums of the branch bits (no masking): 0 on the true path."""
    return plan.client_costs(bits, q)


__all__ = ["PathBlinding", "PathPlan", "path_blind", "path_costs",
           "path_sums_plain", "path_unblind", "sample_path_blinding"]
