"""Decision trees, quantization, model hiding, slot layout and packing.

Feature indices are 0-based throughout the code and in the JSON format.
Decision nodes route left when ``x[feature] < threshold`` and right otherwise,
so ties go right.

Hidden trees are heap-numbered: the root is 1 and node ``i`` has children
``2i`` and ``2i + 1``. Decision data is listed breadth-first (ascending heap
id); leaves are listed left to right.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import CapacityError, ModelError, SerializationError
from .phe import pack_container, reduce_signed, unpack_container

DEFAULT_FRAC_BITS = 12
MAGIC_PACKED = b"KGRPACK\x00"
MAGIC_PUBLIC = b"KGRPUBB\x00"
BUNDLE_VERSION = 1


# raw trees -------------------------------------------------------------------

@dataclass
class Leaf:
    weight: float


@dataclass
class Node:
    feature: int
    threshold: float
    left: "Node | Leaf"
    right: "Node | Leaf"


@dataclass
class DecisionTree:
    root: Node | Leaf
    feature_count: int

    def __post_init__(self):
        for n in self.decision_nodes():
            if not isinstance(n.left, (Node, Leaf)) or not isinstance(n.right, (Node, Leaf)):
                raise ModelError("every decision node needs two children")
            if not 0 <= n.feature < self.feature_count:
                raise ModelError(f"feature index {n.feature} out of range [0, {self.feature_count})")

    def decision_nodes(self) -> list[Node]:
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            if isinstance(n, Node):
                out.append(n)
                stack.append(n.right)
                stack.append(n.left)
        return out

    def leaves(self) -> list[Leaf]:
        """Leaves left to right."""
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            if isinstance(n, Node):
                stack.append(n.right)
                stack.append(n.left)
            else:
                out.append(n)
        return out

    @property
    def decision_count(self) -> int:
        return len(self.decision_nodes())

    @property
    def depth(self) -> int:
        best, stack = 0, [(self.root, 0)]
        while stack:
            n, d = stack.pop()
            if isinstance(n, Node):
                stack.append((n.left, d + 1))
                stack.append((n.right, d + 1))
            else:
                best = max(best, d)
        return best

    def to_dict(self) -> dict:
        nodes, leaves = [], []
        ids = {}
        queue = deque([self.root])
        while queue:
            n = queue.popleft()
            ids[id(n)] = len(ids)
            if isinstance(n, Node):
                queue.append(n.left)
                queue.append(n.right)
        for n_id, n in _walk_with_ids(self.root, ids):
            if isinstance(n, Node):
                nodes.append({"id": n_id, "feature": n.feature, "threshold": n.threshold,
                              "left": ids[id(n.left)], "right": ids[id(n.right)]})
            else:
                leaves.append({"id": n_id, "weight": n.weight})
        return {"nodes": nodes, "leaves": leaves}

    @classmethod
    def from_dict(cls, doc: dict, feature_count: int) -> "DecisionTree":
        try:
            nodes = {int(n["id"]): n for n in doc.get("nodes", [])}
            leaves = {int(lf["id"]): float(lf["weight"]) for lf in doc["leaves"]}
        except (KeyError, TypeError, ValueError) as e:
            raise ModelError(f"malformed tree document: {e}") from None
        if set(nodes) & set(leaves):
            raise ModelError("node and leaf ids overlap")
        children = [int(n[k]) for n in nodes.values() for k in ("left", "right")]
        if len(children) != len(set(children)):
            raise ModelError("a node is referenced as a child more than once")
        roots = (set(nodes) | set(leaves)) - set(children)
        if len(roots) != 1:
            raise ModelError(f"tree must have exactly one root, found {len(roots)}")
        missing = set(children) - set(nodes) - set(leaves)
        if missing:
            raise ModelError(f"unknown child ids {sorted(missing)[:5]}")

        def build(i, depth=0):
            if i in leaves:
                return Leaf(leaves[i])
            n = nodes[i]
            return Node(int(n["feature"]), float(n["threshold"]), None, None)

        (root_id,) = roots
        root = build(root_id)
        stack = [(root, root_id)]
        seen = 0
        while stack:
            obj, i = stack.pop()
            seen += 1
            if isinstance(obj, Node):
                for side in ("left", "right"):
                    cid = int(nodes[i][side])
                    child = build(cid)
                    setattr(obj, side, child)
                    stack.append((child, cid))
        if seen != len(nodes) + len(leaves):
            raise ModelError("tree document contains unreachable entries")
        return cls(root, feature_count)


def _walk_with_ids(root, ids):
    stack = [root]
    while stack:
        n = stack.pop()
        yield ids[id(n)], n
        if isinstance(n, Node):
            stack.append(n.right)
            stack.append(n.left)


@dataclass(frozen=True)
class FeatureRange:
    name: str
    min: float
    max: float


@dataclass
class Forest:
    trees: list[DecisionTree]
    features: list[FeatureRange]

    @property
    def feature_count(self) -> int:
        return len(self.features)

    @classmethod
    def from_json(cls, doc: dict | str) -> "Forest":
        if isinstance(doc, str):
            doc = json.loads(doc)
        try:
            m = int(doc["feature_count"])
            feats = [FeatureRange(str(f.get("name", f"f{j}")), float(f["min"]), float(f["max"]))
                     for j, f in enumerate(doc["features"])]
            tree_docs = doc["trees"]
        except (KeyError, TypeError, ValueError) as e:
            raise ModelError(f"malformed model document: {e}") from None
        if len(feats) != m:
            raise ModelError(f"feature_count {m} does not match {len(feats)} feature entries")
        if not tree_docs:
            raise ModelError("model has no trees")
        return cls([DecisionTree.from_dict(t, m) for t in tree_docs], feats)

    def to_json(self) -> dict:
        return {
            "feature_count": self.feature_count,
            "features": [{"name": f.name, "min": f.min, "max": f.max} for f in self.features],
            "trees": [t.to_dict() for t in self.trees],
        }

    def quantization(self, zeta: int) -> "QuantizationSpec":
        return QuantizationSpec(tuple(f.min for f in self.features), tuple(f.max for f in self.features), zeta)


# quantization ----------------------------------------------------------------

def round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


@dataclass(frozen=True)
class QuantizationSpec:
    """Maps feature j from [x_min[j], x_max[j]] onto integers [0, zeta]."""

    x_min: tuple
    x_max: tuple
    zeta: int

    def __post_init__(self):
        if len(self.x_min) != len(self.x_max):
            raise ModelError("x_min and x_max lengths differ")
        for j, (lo, hi) in enumerate(zip(self.x_min, self.x_max)):
            if not hi > lo:
                raise ModelError(f"degenerate range for feature {j}: [{lo}, {hi}]")

    @property
    def feature_count(self) -> int:
        return len(self.x_min)

    @property
    def bit_width(self) -> int:
        return int(math.floor(math.log2(self.zeta))) + 1

    def quantize(self, x: float, j: int) -> int:
        lo, hi = self.x_min[j], self.x_max[j]
        x = min(max(float(x), lo), hi)
        return round_half_up((x - lo) / (hi - lo) * self.zeta)

    def quantize_vector(self, x) -> list[int]:
        if len(x) != self.feature_count:
            raise ModelError(f"expected {self.feature_count} features, got {len(x)}")
        return [self.quantize(v, j) for j, v in enumerate(x)]

    def dequantize(self, v: int, j: int) -> float:
        lo, hi = self.x_min[j], self.x_max[j]
        return lo + (hi - lo) * v / self.zeta


def quantize(x: float, j: int, spec: QuantizationSpec) -> int:
    return spec.quantize(x, j)


def evaluate_plain(tree: DecisionTree, x, spec: QuantizationSpec | None = None, domain: str = "raw") -> float:
    """Leaf weight reached by x. In the quantized domain x is already quantized
    and thresholds are quantized with ``spec``."""
    if len(x) != tree.feature_count:
        raise ModelError(f"expected {tree.feature_count} features, got {len(x)}")
    if domain not in ("raw", "quantized"):
        raise ValueError(f"unknown domain {domain!r}")
    if domain == "quantized" and spec is None:
        raise ValueError("quantized evaluation needs a QuantizationSpec")
    n = tree.root
    while isinstance(n, Node):
        if not 0 <= n.feature < len(x):
            raise ModelError(f"feature index {n.feature} out of range")
        y = spec.quantize(n.threshold, n.feature) if domain == "quantized" else n.threshold
        n = n.left if x[n.feature] < y else n.right
    return n.weight


def to_fixed(w: float, frac_bits: int = DEFAULT_FRAC_BITS) -> int:
    return round_half_up(w * (1 << frac_bits))


def evaluate_forest_fixed(trees, xq, spec, frac_bits=DEFAULT_FRAC_BITS) -> int:
    """Oracle: sum of fixed-point selected weights, quantized domain."""
    return sum(to_fixed(evaluate_plain(t, xq, spec, "quantized"), frac_bits) for t in trees)


# hiding ----------------------------------------------------------------------

class FullDepthPadding:
    """Pad toward a full tree of depth ceil(log2(tau+1)), optionally capped."""

    name = "full"

    def __init__(self, cap: int | None = None):
        self.cap = cap

    def target(self, tau: int) -> int:
        full = (1 << math.ceil(math.log2(tau + 1))) - 1 if tau else 0
        if self.cap is not None:
            full = min(full, max(self.cap, tau))
        return max(full, tau)


class FixedPadding:
    """Pad every tree to exactly ``tau_star`` decision nodes."""

    name = "fixed"

    def __init__(self, tau_star: int):
        self.tau_star = tau_star

    def target(self, tau: int) -> int:
        if tau > self.tau_star:
            raise CapacityError(f"tree has {tau} decision nodes, more than the fixed target {self.tau_star}")
        return self.tau_star


class NoPadding:
    name = "none"

    def target(self, tau: int) -> int:
        return tau


def padding_policy(name: str, value: int | None = None):
    if name == "full":
        return FullDepthPadding(value)
    if name == "fixed":
        if value is None:
            raise ModelError("fixed padding needs a target size")
        return FixedPadding(value)
    if name == "none":
        return NoPadding()
    raise ModelError(f"unknown padding policy {name!r}")


class _W:
    """Mutable working node used during hiding."""

    __slots__ = ("leaf", "feature", "yq", "real", "flip", "left", "right", "w", "depth")

    def __init__(self, leaf, depth, feature=0, yq=0, real=1, w=0):
        self.leaf = leaf
        self.depth = depth
        self.feature = feature
        self.yq = yq
        self.real = real
        self.flip = 1
        self.left = self.right = None
        self.w = w


@dataclass(frozen=True)
class DummyRecord:
    """One padding step: the expanded leaf's weight and the dummy's pre-swap children."""

    original_weight: int
    left_weight: int
    right_weight: int


@dataclass(frozen=True)
class ObfuscatedTree:
    """Heap-indexed hidden tree. ``w`` holds signed fixed-point weights."""

    structure: tuple  # decision-node heap ids, ascending (= breadth-first)
    y: tuple
    m: tuple
    upsilon: tuple
    psi: tuple
    leaf_ids: tuple  # leaf heap ids, left to right
    w: tuple
    feature_count: int
    frac_bits: int = DEFAULT_FRAC_BITS

    @property
    def tau_star(self) -> int:
        return len(self.structure)

    def w_residues(self, q: int) -> np.ndarray:
        return reduce_signed(np.array(self.w, dtype=object), q)


class Extracted(NamedTuple):
    y: list
    m: list
    upsilon: list
    psi: list
    w: list
    structure: list


def hide_model(tree: DecisionTree, policy, rng: np.random.Generator, spec: QuantizationSpec,
               frac_bits: int = DEFAULT_FRAC_BITS, flip: bool = True):
    """Pad with dummy nodes, flip children at random and heap-number the result.

    Returns ``(ObfuscatedTree, [DummyRecord, ...])``.
    """
    if spec.feature_count != tree.feature_count:
        raise ModelError("quantization spec and tree disagree on feature count")
    tau = tree.decision_count
    target = policy.target(tau)
    if target < tau:
        raise CapacityError("padding target below the tree's own size")
    weights = [lf.weight for lf in tree.leaves()]
    w_lo, w_hi = min(weights), max(weights)

    # copy into working nodes
    def conv(n, d):
        if isinstance(n, Leaf):
            return _W(True, d, w=to_fixed(n.weight, frac_bits))
        wn = _W(False, d, n.feature, spec.quantize(n.threshold, n.feature), 1)
        return wn

    root = conv(tree.root, 0)
    stack = [(tree.root, root)]
    leaves = [] if isinstance(tree.root, Node) else [root]
    while stack:
        src, dst = stack.pop()
        if isinstance(src, Node):
            dst.left = conv(src.left, dst.depth + 1)
            dst.right = conv(src.right, dst.depth + 1)
            for s, d in ((src.left, dst.left), (src.right, dst.right)):
                if isinstance(s, Node):
                    stack.append((s, d))
                else:
                    leaves.append(d)

    # (1) padding, shallowest leaves first
    record = []
    count = tau
    while count < target:
        shallow = min(lf.depth for lf in leaves)
        candidates = [i for i, lf in enumerate(leaves) if lf.depth == shallow]
        idx = candidates[int(rng.integers(len(candidates)))]
        lf = leaves.pop(idx)
        right_w = to_fixed(float(rng.uniform(w_lo, w_hi)) if w_hi > w_lo else w_lo, frac_bits)
        left = _W(True, lf.depth + 1, w=lf.w)
        right = _W(True, lf.depth + 1, w=right_w)
        record.append(DummyRecord(lf.w, left.w, right.w))
        lf.leaf = False
        lf.real = 0
        lf.feature = int(rng.integers(tree.feature_count))
        lf.yq = int(rng.integers(spec.zeta + 1))
        lf.left, lf.right = left, right
        lf.w = 0
        leaves.extend([left, right])
        count += 1

    # (2) flips, (3) heap numbering
    heap_nodes = {}
    leaf_ids = []
    stack = [(root, 1)]
    while stack:
        n, h = stack.pop()
        if n.leaf:
            leaf_ids.append(h)
            heap_nodes[h] = n
            continue
        if flip and rng.integers(2):
            n.flip = -1
            n.left, n.right = n.right, n.left
        heap_nodes[h] = n
        stack.append((n.right, 2 * h + 1))
        stack.append((n.left, 2 * h))
    structure = sorted(h for h, n in heap_nodes.items() if not n.leaf)
    ot = ObfuscatedTree(
        structure=tuple(structure),
        y=tuple(heap_nodes[h].yq for h in structure),
        m=tuple(heap_nodes[h].feature for h in structure),
        upsilon=tuple(heap_nodes[h].flip for h in structure),
        psi=tuple(heap_nodes[h].real for h in structure),
        leaf_ids=tuple(leaf_ids),
        w=tuple(heap_nodes[h].w for h in leaf_ids),
        feature_count=tree.feature_count,
        frac_bits=frac_bits,
    )
    return ot, record


def leaf_order(structure) -> list[int]:
    """Leaf heap ids, left to right, implied by the decision-node heap ids."""
    nodes = set(structure)
    if not nodes:
        return [1]
    out, stack = [], [1]
    while stack:
        h = stack.pop()
        if h in nodes:
            stack.append(2 * h + 1)
            stack.append(2 * h)
        else:
            out.append(h)
    return out


def validate_structure(structure) -> None:
    nodes = set(structure)
    for h in nodes:
        if h < 1 or (h > 1 and h // 2 not in nodes):
            raise ModelError(f"heap id {h} has no parent decision node")


def evaluate_hidden(ot: ObfuscatedTree, xq) -> int:
    """Flip-aware evaluation in the quantized domain; returns the fixed-point weight."""
    pos = {h: i for i, h in enumerate(ot.structure)}
    leaf = {h: i for i, h in enumerate(ot.leaf_ids)}
    h = 1
    while h in pos:
        i = pos[h]
        if ot.psi[i]:
            c = 1 if xq[ot.m[i]] >= ot.y[i] else 0
            if ot.upsilon[i] == -1:
                c = 1 - c
        else:
            c = 0 if ot.upsilon[i] == 1 else 1
        h = 2 * h + c
    return ot.w[leaf[h]]


def extract(ot: ObfuscatedTree) -> Extracted:
    return Extracted(list(ot.y), list(ot.m), list(ot.upsilon), list(ot.psi), list(ot.w), list(ot.structure))


# layout ----------------------------------------------------------------------

def next_power_of_two(m: int) -> int:
    return 1 << max(0, (m - 1).bit_length())


@dataclass
class SlotLayout:
    """Slot assignment for every decision node and leaf of every tree.

    ``node_slots[k]`` is an (tau*_k, 2) array of (group, slot) in breadth-first
    order; ``leaf_slots[k]`` an (tau*_k + 1, 2) array in left-to-right order.
    Node groups and leaf groups are separate ciphertext families.
    """

    mode: str
    slot_count: int
    block: int
    feature_count: int
    node_groups: int
    leaf_groups: int
    node_slots: list
    leaf_slots: list

    @property
    def tree_count(self) -> int:
        return len(self.node_slots)

    @property
    def replicas(self) -> int:
        return self.slot_count // self.block

    def input_vector(self, xq) -> np.ndarray:
        """Client input: x padded to the block size and repeated across the slots."""
        if len(xq) != self.feature_count:
            raise ModelError(f"expected {self.feature_count} features, got {len(xq)}")
        blockv = np.zeros(self.block, dtype=np.uint64)
        blockv[: len(xq)] = np.asarray(xq, dtype=np.uint64)
        out = np.zeros(self.slot_count, dtype=np.uint64)
        out[: self.replicas * self.block] = np.tile(blockv, self.replicas)
        return out

    def node_mask(self, group: int) -> np.ndarray:
        """1 at occupied node slots of a group."""
        v = np.zeros(self.slot_count, dtype=np.uint64)
        for ns in self.node_slots:
            sel = ns[ns[:, 0] == group, 1]
            v[sel] = 1
        return v

    def leaf_mask(self, group: int) -> np.ndarray:
        v = np.zeros(self.slot_count, dtype=np.uint64)
        for ls in self.leaf_slots:
            v[ls[ls[:, 0] == group, 1]] = 1
        return v

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "slot_count": self.slot_count,
            "block": self.block,
            "feature_count": self.feature_count,
            "node_groups": self.node_groups,
            "leaf_groups": self.leaf_groups,
            "node_slots": [ns.tolist() for ns in self.node_slots],
            "leaf_slots": [ls.tolist() for ls in self.leaf_slots],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SlotLayout":
        return cls(d["mode"], int(d["slot_count"]), int(d["block"]), int(d["feature_count"]),
                   int(d["node_groups"]), int(d["leaf_groups"]),
                   [np.array(x, dtype=np.int64).reshape(-1, 2) for x in d["node_slots"]],
                   [np.array(x, dtype=np.int64).reshape(-1, 2) for x in d["leaf_slots"]])


def plan_layout(trees, slot_count: int, feature_count: int, mode: str = "auto",
                block: int | None = None) -> SlotLayout:
    """Assign slots. ``trees`` may be ObfuscatedTree objects or decision counts."""
    taus = [t if isinstance(t, int) else t.tau_star for t in trees]
    if not taus:
        raise CapacityError("no trees to lay out")
    if block is None:
        block = next_power_of_two(feature_count)
    if block < feature_count:
        raise CapacityError(f"block size {block} smaller than feature count {feature_count}")
    if block > slot_count:
        raise CapacityError(f"block size {block} exceeds {slot_count} slots")
    if mode == "auto":
        fits = (max(taus) + 1) * block <= slot_count
        mode = "interleaved" if fits and len(set(taus)) == 1 else "adaptive"
    if mode == "interleaved":
        return _plan_interleaved(taus, slot_count, feature_count, block)
    if mode == "adaptive":
        return _plan_adaptive(taus, slot_count, feature_count, block)
    raise CapacityError(f"unknown layout mode {mode!r}")


def _plan_interleaved(taus, S, M, block):
    K = len(taus)
    groups = math.ceil(K / block)
    for g in range(groups):
        members = taus[g * block:(g + 1) * block]
        if len(set(members)) != 1:
            raise CapacityError("interleaved layout needs the same padded size for every tree in a group")
        if (members[0] + 1) * block > S:
            raise CapacityError(f"interleaved layout needs (tau*+1)*M* = {(members[0] + 1) * block} <= {S} slots")
    node_slots, leaf_slots = [], []
    for k, tau in enumerate(taus):
        g, m = divmod(k, block)
        n = np.arange(tau, dtype=np.int64)
        node_slots.append(np.stack([np.full(tau, g), n * block + m], axis=1).reshape(-1, 2))
        lf = np.arange(tau + 1, dtype=np.int64)
        leaf_slots.append(np.stack([np.full(tau + 1, g), lf * block + m], axis=1))
    return SlotLayout("interleaved", S, block, M, groups, groups, node_slots, leaf_slots)


def _plan_adaptive(taus, S, M, block):
    per_group = S // block
    node_slots, leaf_slots = [], []
    b = 0
    c = 0
    for tau in taus:
        idx = np.arange(b, b + tau, dtype=np.int64)
        node_slots.append(np.stack([idx // per_group, (idx % per_group) * block], axis=1).reshape(-1, 2))
        b += tau
        li = np.arange(c, c + tau + 1, dtype=np.int64)
        leaf_slots.append(np.stack([li // S, li % S], axis=1))
        c += tau + 1
    return SlotLayout("adaptive", S, block, M, max(1, math.ceil(b / per_group)), math.ceil(c / S),
                      node_slots, leaf_slots)


# packing ---------------------------------------------------------------------

@dataclass
class PackedModel:
    """Server-side encoded model plus everything needed to publish its bundle."""

    q: int
    layout: SlotLayout
    spec: QuantizationSpec
    frac_bits: int
    comparison: str
    structures: list
    Y: list  # per node group
    U: list  # flip signs: 1, q-1, 0 elsewhere
    P: list  # real-node indicator
    F: list  # feature index per node slot, -1 elsewhere
    W: list  # per leaf group
    public_meta: dict = field(default_factory=dict)

    @property
    def tree_count(self) -> int:
        return len(self.structures)

    def tree_mask(self, k: int) -> np.ndarray:
        """M_k: one-hot block per decision node of tree k at (n-1)*M*, interleaved geometry."""
        lay = self.layout
        v = np.zeros(lay.slot_count, dtype=np.uint64)
        feats = self._tree_features(k)
        n = np.arange(len(feats))
        v[n * lay.block + feats] = 1
        return v

    def _tree_features(self, k):
        ns = self.layout.node_slots[k]
        return np.array([self.F[g][s] for g, s in ns], dtype=np.int64)

    def group_mask(self, group: int) -> np.ndarray:
        """Combined one-hot mask: block starting at each node slot selects its feature."""
        f = self.F[group]
        v = np.zeros(self.layout.slot_count, dtype=np.uint64)
        slots = np.nonzero(f >= 0)[0]
        v[slots + f[slots]] = 1
        return v

    def diagonal_masks(self, group: int) -> dict:
        """{d: mask} where node slot s needs the input rotated left by d = (f - s) mod M*."""
        f = self.F[group]
        blk = self.layout.block
        slots = np.nonzero(f >= 0)[0]
        d = (f[slots] - slots) % blk
        out = {}
        for dd in np.unique(d):
            v = np.zeros(self.layout.slot_count, dtype=np.uint64)
            v[slots[d == dd]] = 1
            out[int(dd)] = v
        return out

    def public_bundle(self) -> dict:
        return {
            "version": BUNDLE_VERSION,
            "plain_modulus": self.q,
            "slot_count": self.layout.slot_count,
            "feature_count": self.spec.feature_count,
            "x_min": list(self.spec.x_min),
            "x_max": list(self.spec.x_max),
            "zeta": self.spec.zeta,
            "frac_bits": self.frac_bits,
            "comparison": self.comparison,
            "structures": [list(s) for s in self.structures],
            "layout": self.layout.to_dict(),
            **self.public_meta,
        }

    def to_bytes(self) -> bytes:
        body = {
            "public": self.public_bundle(),
            "Y": [v.tolist() for v in self.Y],
            "U": [v.tolist() for v in self.U],
            "P": [v.tolist() for v in self.P],
            "F": [v.tolist() for v in self.F],
            "W": [v.tolist() for v in self.W],
        }
        return pack_container(MAGIC_PACKED, "transparent", _dumps(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PackedModel":
        _, _, payload = unpack_container(data, MAGIC_PACKED)
        try:
            body = json.loads(payload)
            pub = body["public"]
            lay = SlotLayout.from_dict(pub["layout"])
            spec = QuantizationSpec(tuple(pub["x_min"]), tuple(pub["x_max"]), int(pub["zeta"]))
            arr = lambda key, dt: [np.array(v, dtype=dt) for v in body[key]]  # noqa: E731
            extra = {k: v for k, v in pub.items() if k not in _PUBLIC_CORE}
            return cls(int(pub["plain_modulus"]), lay, spec, int(pub["frac_bits"]), pub["comparison"],
                       [tuple(s) for s in pub["structures"]], arr("Y", np.uint64), arr("U", np.uint64),
                       arr("P", np.uint64), arr("F", np.int64), arr("W", np.uint64), extra)
        except (KeyError, TypeError, ValueError) as e:
            raise SerializationError(f"malformed packed model: {e}") from None


_PUBLIC_CORE = {"version", "plain_modulus", "slot_count", "feature_count", "x_min", "x_max", "zeta",
                "frac_bits", "comparison", "structures", "layout"}


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def public_bundle_bytes(bundle: dict) -> bytes:
    return pack_container(MAGIC_PUBLIC, "transparent", _dumps(bundle))


def public_bundle_from_bytes(data: bytes) -> dict:
    _, _, payload = unpack_container(data, MAGIC_PUBLIC)
    try:
        return json.loads(payload)
    except ValueError as e:
        raise SerializationError(f"malformed public bundle: {e}") from None


def bundle_digest(bundle: dict) -> bytes:
    return hashlib.sha256(_dumps(bundle)).digest()


def encode_pack(trees, layout: SlotLayout, spec: QuantizationSpec, q: int,
                comparison: str = "base") -> PackedModel:
    """Place every hidden tree's data at its layout slots."""
    if comparison not in ("base", "plus"):
        raise ModelError(f"unknown comparison variant {comparison!r}")
    if len(trees) != layout.tree_count:
        raise CapacityError("layout was planned for a different number of trees")
    S = layout.slot_count
    frac = trees[0].frac_bits
    ng, nl = layout.node_groups, layout.leaf_groups
    Y = [np.zeros(S, dtype=np.uint64) for _ in range(ng)]
    U = [np.zeros(S, dtype=np.uint64) for _ in range(ng)]
    P = [np.zeros(S, dtype=np.uint64) for _ in range(ng)]
    F = [np.full(S, -1, dtype=np.int64) for _ in range(ng)]
    W = [np.zeros(S, dtype=np.uint64) for _ in range(nl)]
    used_nodes = [np.zeros(S, dtype=bool) for _ in range(ng)]
    used_leaves = [np.zeros(S, dtype=bool) for _ in range(nl)]
    max_w = 0
    for k, ot in enumerate(trees):
        if ot.frac_bits != frac:
            raise ModelError("trees use different fixed-point precisions")
        ns, ls = layout.node_slots[k], layout.leaf_slots[k]
        if len(ns) != ot.tau_star or len(ls) != ot.tau_star + 1:
            raise CapacityError(f"layout does not match tree {k}")
        y = np.array(ot.y, dtype=np.int64)
        if (y < 0).any() or (y > spec.zeta).any():
            raise ModelError(f"tree {k} has a quantized threshold outside [0, {spec.zeta}]")
        for i, (g, s) in enumerate(ns):
            if used_nodes[g][s]:
                raise CapacityError(f"slot collision at group {g} slot {s}")
            used_nodes[g][s] = True
            Y[g][s] = ot.y[i]
            U[g][s] = 1 if ot.upsilon[i] == 1 else q - 1
            P[g][s] = ot.psi[i]
            F[g][s] = ot.m[i]
        wres = ot.w_residues(q)
        for i, (g, s) in enumerate(ls):
            if used_leaves[g][s]:
                raise CapacityError(f"leaf slot collision at group {g} slot {s}")
            used_leaves[g][s] = True
            W[g][s] = wres[i]
        max_w = max([max_w] + [abs(w) for w in ot.w])
    if len(trees) * max_w >= q / 2:
        raise CapacityError(f"aggregation overflow: K*max|w|*2^f = {len(trees) * max_w} >= q/2")
    return PackedModel(q, layout, spec, frac, comparison, [tuple(t.structure) for t in trees],
                       Y, U, P, F, W)


def unpack_arrays(pm: PackedModel, k: int) -> Extracted:
    """Read tree k back out of a packed model through its layout."""
    ns, ls = pm.layout.node_slots[k], pm.layout.leaf_slots[k]
    q = pm.q
    y = [int(pm.Y[g][s]) for g, s in ns]
    m = [int(pm.F[g][s]) for g, s in ns]
    ups = [1 if int(pm.U[g][s]) == 1 else -1 for g, s in ns]
    psi = [int(pm.P[g][s]) for g, s in ns]
    w = [int(pm.W[g][s]) if int(pm.W[g][s]) <= (q - 1) // 2 else int(pm.W[g][s]) - q for g, s in ls]
    return Extracted(y, m, ups, psi, w, list(pm.structures[k]))


def build_packed_model(forest: Forest, q: int, slot_count: int, zeta: int, rng: np.random.Generator,
                       policy=None, mode: str = "auto", block: int | None = None,
                       frac_bits: int = DEFAULT_FRAC_BITS, comparison: str = "base"):
    """Hide, lay out and pack a forest. Returns (PackedModel, hidden trees, construction records).

    With the enhanced comparison the quantization range shrinks to [0, zeta // 2]
    so that premapped operands stay within [0, zeta].
    """
    qzeta = zeta // 2 if comparison == "plus" else zeta
    spec = forest.quantization(qzeta)
    policy = policy or FullDepthPadding()
    hidden, records = [], []
    for t in forest.trees:
        ot, rec = hide_model(t, policy, rng, spec, frac_bits)
        hidden.append(ot)
        records.append(rec)
    layout = plan_layout(hidden, slot_count, forest.feature_count, mode, block)
    pm = encode_pack(hidden, layout, spec, q, comparison)
    return pm, hidden, records
