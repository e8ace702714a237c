import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kangaroo.errors import CapacityError, ModelError, SerializationError
from kangaroo.model import (DecisionTree, FeatureRange, FixedPadding, Forest, FullDepthPadding, Leaf, Node,
                            NoPadding, PackedModel, QuantizationSpec, build_packed_model, evaluate_forest_fixed,
                            evaluate_hidden, evaluate_plain, extract, hide_model, leaf_order, next_power_of_two,
                            padding_policy, plan_layout, public_bundle_bytes, public_bundle_from_bytes, to_fixed,
                            unpack_arrays, validate_structure)
from kangaroo.synth import dataset_tree, random_forest, random_inputs, random_tree

Q, S, ZETA = 1032193, 2048, 256


def small_tree():
    return DecisionTree(Node(0, 0.5, Leaf(1.0), Node(1, 0.25, Leaf(-2.0), Leaf(3.5))), 2)


def test_json_roundtrip():
    f = Forest([small_tree()], [FeatureRange("a", 0, 1), FeatureRange("b", 0, 1)])
    g = Forest.from_json(json.dumps(f.to_json()))
    assert g.to_json() == f.to_json()
    assert g.trees[0].decision_count == 2 and g.trees[0].depth == 2


@pytest.mark.parametrize("doc", [
    {"feature_count": 1, "features": [], "trees": []},
    {"feature_count": 1, "features": [{"min": 0, "max": 1}], "trees": []},
    {"feature_count": 1, "features": [{"min": 0, "max": 1}],
     "trees": [{"nodes": [{"id": 0, "feature": 3, "threshold": 0.5, "left": 1, "right": 2}],
                "leaves": [{"id": 1, "weight": 0}, {"id": 2, "weight": 1}]}]},
    {"feature_count": 1, "features": [{"min": 0, "max": 1}],
     "trees": [{"nodes": [{"id": 0, "feature": 0, "threshold": 0.5, "left": 1, "right": 1}],
                "leaves": [{"id": 1, "weight": 0}]}]},
    {"feature_count": 1, "features": [{"min": 0, "max": 1}],
     "trees": [{"nodes": [{"id": 0, "feature": 0, "threshold": 0.5, "left": 1, "right": 9}],
                "leaves": [{"id": 1, "weight": 0}]}]},
])
def test_bad_models(doc):
    with pytest.raises(ModelError):
        Forest.from_json(doc)


def test_quantization():
    spec = QuantizationSpec((0.0, -1.0), (10.0, 1.0), 100)
    assert spec.quantize_vector([5.0, 0.0]) == [50, 50]
    assert spec.quantize(-3, 0) == 0 and spec.quantize(99, 0) == 100  # clamped
    assert spec.quantize(0.005, 0) == 0 and spec.quantize(0.05, 0) == 1  # half rounds up
    assert spec.dequantize(25, 0) == 2.5
    with pytest.raises(ModelError):
        QuantizationSpec((1.0,), (1.0,), 10)


def test_plain_eval_ties_right():
    t = small_tree()
    assert evaluate_plain(t, [0.5, 0.25]) == 3.5
    assert evaluate_plain(t, [0.49, 0.9]) == 1.0


def test_to_fixed():
    assert to_fixed(1.5) == 6144 and to_fixed(-0.5, 2) == -2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 7), st.sampled_from(["full", "none", "fixed"]))
def test_hiding_preserves_predictions(seed, depth, pol):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 5, depth, ranges=[(0.0, 1.0)] * 5)
    spec = QuantizationSpec((0.0,) * 5, (1.0,) * 5, ZETA)
    policy = {"full": FullDepthPadding(), "none": NoPadding(), "fixed": FixedPadding(tree.decision_count + 5)}[pol]
    ot, records = hide_model(tree, policy, rng, spec)
    assert ot.tau_star == policy.target(tree.decision_count)
    assert len(records) == ot.tau_star - tree.decision_count
    assert sum(ot.psi) == tree.decision_count
    validate_structure(ot.structure)
    assert list(ot.leaf_ids) == leaf_order(ot.structure)
    for x in rng.integers(0, ZETA + 1, (20, 5)):
        assert evaluate_hidden(ot, x) == to_fixed(evaluate_plain(tree, x, spec, "quantized"))


def test_dummy_keeps_original_weight_left():
    rng = np.random.default_rng(0)
    spec = QuantizationSpec((0.0, 0.0), (1.0, 1.0), ZETA)
    _, records = hide_model(small_tree(), FixedPadding(6), rng, spec)
    for r in records:
        assert r.left_weight == r.original_weight


def test_padding_policies():
    assert FullDepthPadding().target(5) == 7 and FullDepthPadding(6).target(5) == 6
    assert padding_policy("none").target(4) == 4
    with pytest.raises(CapacityError):
        FixedPadding(3).target(4)
    with pytest.raises(ModelError):
        padding_policy("fixed")
    with pytest.raises(ModelError):
        padding_policy("weird")


def test_next_power_of_two():
    assert [next_power_of_two(m) for m in (1, 2, 3, 13, 16, 17)] == [1, 2, 4, 16, 16, 32]


def _collisions(lay):
    for slots in (lay.node_slots, lay.leaf_slots):
        flat = np.concatenate(slots)
        assert len({tuple(r) for r in flat.tolist()}) == len(flat)


def test_interleaved_geometry():
    lay = plan_layout([7] * 10, 64, 3, "interleaved")
    assert lay.block == 4 and lay.node_groups == 3
    for k in range(10):
        g, m = divmod(k, 4)
        assert lay.node_slots[k].tolist() == [[g, n * 4 + m] for n in range(7)]
    _collisions(lay)


def test_adaptive_geometry():
    lay = plan_layout([3, 1, 5, 2], 16, 4, "adaptive")
    starts = np.concatenate(lay.node_slots)
    assert (starts[:, 1] % 4 == 0).all()
    assert lay.node_groups == 3 and lay.leaf_groups == 1
    _collisions(lay)


@given(st.lists(st.integers(0, 40), min_size=1, max_size=30), st.integers(1, 20))
def test_adaptive_layout_invariants(taus, M):
    lay = plan_layout(taus, 256, M, "adaptive")
    _collisions(lay)
    assert lay.node_groups == max(1, -(-sum(taus) // (256 // lay.block)))
    for ns in lay.node_slots:
        assert (ns[:, 1] % lay.block == 0).all()


def test_layout_errors():
    with pytest.raises(CapacityError):
        plan_layout([3, 4], 64, 4, "interleaved")
    with pytest.raises(CapacityError):
        plan_layout([40], 64, 4, "interleaved")
    with pytest.raises(CapacityError):
        plan_layout([1], 64, 8, block=4)
    with pytest.raises(CapacityError):
        plan_layout([], 64, 8)


def test_input_vector():
    lay = plan_layout([3], 16, 3)
    assert lay.input_vector([1, 2, 3]).tolist() == [1, 2, 3, 0] * 4
    with pytest.raises(ModelError):
        lay.input_vector([1, 2])


@pytest.mark.parametrize("mode", ["interleaved", "adaptive"])
def test_pack_roundtrip(mode):
    rng = np.random.default_rng(3)
    f = random_forest(rng, 6, 5, 3)
    pm, hidden, _ = build_packed_model(f, Q, S, ZETA, rng, policy=FixedPadding(7), mode=mode)
    for k, ot in enumerate(hidden):
        assert unpack_arrays(pm, k) == extract(ot)
    again = PackedModel.from_bytes(pm.to_bytes())
    assert again.to_bytes() == pm.to_bytes()
    bundle = public_bundle_from_bytes(public_bundle_bytes(pm.public_bundle()))
    assert bundle == json.loads(json.dumps(pm.public_bundle()))
    for key in ("Y", "U", "P", "F", "W"):
        assert key not in bundle


def test_pack_deterministic():
    f = random_forest(1, 3, 4, 3)
    a, *_ = build_packed_model(f, Q, S, ZETA, np.random.default_rng(5))
    b, *_ = build_packed_model(f, Q, S, ZETA, np.random.default_rng(5))
    assert a.to_bytes() == b.to_bytes()


def test_masks_select_features():
    rng = np.random.default_rng(4)
    f = random_forest(rng, 3, 5, 3)
    pm, hidden, _ = build_packed_model(f, Q, S, ZETA, rng, policy=FixedPadding(7), mode="interleaved")
    for k, ot in enumerate(hidden):
        m = pm.tree_mask(k)
        assert m.sum() == ot.tau_star
        for n, feat in enumerate(ot.m):
            assert m[n * 8 + feat] == 1


def test_overflow_guard():
    f = random_forest(0, 40, 3, 2, weight_scale=8.0)
    with pytest.raises(CapacityError):
        build_packed_model(f, 65537, 1024, 64, np.random.default_rng(0))


def test_bad_pack_bytes():
    with pytest.raises(SerializationError):
        PackedModel.from_bytes(b"garbage")


def test_oracle_matches_single_trees():
    rng = np.random.default_rng(7)
    f = random_forest(rng, 4, 3, 4)
    spec = f.quantization(ZETA)
    for x in random_inputs(rng, f, 10):
        xq = spec.quantize_vector(x)
        want = sum(to_fixed(evaluate_plain(t, xq, spec, "quantized")) for t in f.trees)
        assert evaluate_forest_fixed(f.trees, xq, spec) == want


def test_dataset_shapes():
    t = dataset_tree("boston").trees[0]
    assert (t.feature_count, t.depth, t.decision_count) == (13, 30, 425)
    with pytest.raises(ValueError):
        random_tree(0, 3, 3, decisions=8)
