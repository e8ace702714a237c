"""Seeded synthetic trees and forests with prescribed shapes.

Protocol cost depends on tree shape (M, D, tau) rather than on learned
splits, so the benchmark and tests use random trees of the published shapes.
"""
from __future__ import annotations

import numpy as np

from .model import DecisionTree, FeatureRange, Forest, Leaf, Node
from .rand import make_rng

# (feature count, depth, decision nodes) of the reference datasets
DATASET_SHAPES = {
    "heart": (13, 3, 5),
    "breast": (30, 7, 12),
    "spambase": (57, 17, 58),
    "diabetes": (8, 28, 393),
    "boston": (13, 30, 425),
}


def _random_node(rng, ranges):
    j = int(rng.integers(0, len(ranges)))
    lo, hi = ranges[j]
    return Node(j, float(rng.uniform(lo, hi)), None, None)


def _random_leaf(rng, weight_scale):
    return Leaf(float(np.round(rng.uniform(-weight_scale, weight_scale), 3)))


def random_tree(rng, feature_count: int, depth: int, decisions: int | None = None,
                ranges=None, weight_scale: float = 8.0) -> DecisionTree:
    """Random tree of exactly ``depth`` levels and ``decisions`` decision nodes.

    A spine of ``depth`` nodes fixes the depth; remaining nodes expand random
    leaves that sit above the depth limit. ``decisions`` defaults to a random
    count between depth and the full-tree size (capped at 64).
    """
    rng = make_rng(rng)
    ranges = ranges or [(0.0, 1.0)] * feature_count
    if depth == 0:
        return DecisionTree(_random_leaf(rng, weight_scale), feature_count)
    full = (1 << depth) - 1
    if decisions is None:
        decisions = int(rng.integers(depth, min(full, max(depth, 64)) + 1))
    if not depth <= decisions <= full:
        raise ValueError(f"{decisions} decision nodes cannot form a depth-{depth} tree")
    root = _random_node(rng, ranges)
    open_leaves = []  # (parent, side, depth of the leaf)
    n = root
    for d in range(1, depth):
        child = _random_node(rng, ranges)
        side = "left" if rng.integers(0, 2) == 0 else "right"
        other = "right" if side == "left" else "left"
        setattr(n, side, child)
        open_leaves.append((n, other, d))
        n = child
    open_leaves += [(n, "left", depth), (n, "right", depth)]
    for _ in range(decisions - depth):
        cand = [i for i, (_, _, d) in enumerate(open_leaves) if d < depth]
        i = cand[int(rng.integers(0, len(cand)))]
        parent, side, d = open_leaves.pop(i)
        child = _random_node(rng, ranges)
        setattr(parent, side, child)
        open_leaves += [(child, "left", d + 1), (child, "right", d + 1)]
    for parent, side, _ in open_leaves:
        setattr(parent, side, _random_leaf(rng, weight_scale))
    return DecisionTree(root, feature_count)


def random_forest(rng, trees: int, feature_count: int, depth: int, decisions: int | None = None,
                  weight_scale: float = 8.0, depth_jitter: bool = False) -> Forest:
    """Forest over features with random ranges; depths vary in [1, depth] when jittered."""
    rng = make_rng(rng)
    lo = np.round(rng.uniform(-100, 100, feature_count), 2)
    hi = lo + np.round(rng.uniform(1, 200, feature_count), 2)
    ranges = list(zip(lo.tolist(), hi.tolist()))
    out = []
    for _ in range(trees):
        d = int(rng.integers(1, depth + 1)) if depth_jitter else depth
        out.append(random_tree(rng, feature_count, d, decisions if d == depth else None, ranges, weight_scale))
    feats = [FeatureRange(f"f{j}", a, b) for j, (a, b) in enumerate(ranges)]
    return Forest(out, feats)


def random_inputs(rng, forest: Forest, count: int) -> np.ndarray:
    """Raw feature vectors, slightly beyond each range so clamping is exercised."""
    rng = make_rng(rng)
    lo = np.array([f.min for f in forest.features])
    hi = np.array([f.max for f in forest.features])
    span = hi - lo
    return rng.uniform(lo - 0.05 * span, hi + 0.05 * span, size=(count, forest.feature_count))


def dataset_tree(name: str, seed=0) -> Forest:
    """Single synthetic tree with a reference dataset's (M, D, tau) shape."""
    m, d, tau = DATASET_SHAPES[name]
    return random_forest(seed, 1, m, d, tau)


__all__ = ["DATASET_SHAPES", "dataset_tree", "random_forest", "random_inputs", "random_tree"]
