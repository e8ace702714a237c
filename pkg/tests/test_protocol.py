import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kangaroo.errors import (BlindingReuseError, ParameterError, ProtocolError, SerializationError, StateMachineError,
                             UnsupportedOperation)
from kangaroo.model import FixedPadding, build_packed_model, evaluate_forest_fixed, evaluate_hidden
from kangaroo.phe import PheParams, keygen, make_backend, preset
from kangaroo.protocol import (ClientSession, PathPlan, ServerSession, client_shifts, compare_blind, compare_recover,
                               compare_respond, forest_infer, oblivious_compare, outsourced_infer, path_blind,
                               path_costs, path_sums_plain, path_unblind, sample_blinding, sample_path_blinding,
                               scalar_compare_trace)
from kangaroo.protocol.session import pack_blobs, unpack_blobs
from kangaroo.protocol.selection import (blockwise_sums, feature_select_I, feature_select_II, left_rotations,
                                         select_diagonal, selection_shifts)
from kangaroo.synth import random_forest, random_inputs
from kangaroo.transport import Message, MsgType, QUERY_SEQUENCE, run_session

Q = 65537
SMALL = PheParams(64, Q, name="small")


def blockwise_ref(v, blk, count, q):
    out = np.zeros_like(v)
    for b in range(count):
        out[b * blk] = int(v[b * blk:(b + 1) * blk].astype(object).sum()) % q
    return out


@pytest.mark.parametrize("blk", [1, 2, 3, 4, 5, 7, 8])
def test_feature_select_I(any_backend, blk):
    be, keys = any_backend
    rng = np.random.default_rng(blk)
    v = rng.integers(0, 300, be.S, dtype=np.uint64)
    mask = rng.integers(0, 2, be.S, dtype=np.uint64)
    got = be.decrypt(keys.secret_key, feature_select_I(be, be.encrypt(keys.public_key, v), blk, mask, keys))
    count = be.S // blk
    want = blockwise_ref(v * mask % Q, blk, count, Q)
    starts = np.arange(count) * blk
    assert np.array_equal(got[starts], want[starts])


def test_feature_select_II(any_backend):
    be, keys = any_backend
    rng = np.random.default_rng(0)
    v = rng.integers(0, 300, be.S, dtype=np.uint64)
    mask = rng.integers(0, 2, be.S, dtype=np.uint64)
    out, view = feature_select_II(be, be.encrypt(keys.public_key, v), 8, mask, keys, rng)
    assert np.array_equal(be.decrypt(keys.secret_key, out), blockwise_sums(v * mask % Q, 8, be.S // 8, Q))
    assert not np.array_equal(view, v * mask % Q)


def test_diagonal_selection(any_backend):
    be, keys = any_backend
    rng = np.random.default_rng(1)
    v = rng.integers(0, 300, be.S, dtype=np.uint64)
    diag = {0: np.zeros(be.S, np.uint64), 3: np.zeros(be.S, np.uint64)}
    diag[0][5] = 1
    diag[3][9] = 1
    rots = left_rotations(be, be.encrypt(keys.public_key, v), 3, keys)
    got = be.decrypt(keys.secret_key, select_diagonal(be, rots, diag))
    assert got[5] == v[5] and got[9] == v[12] and got.sum() == v[5] + v[12]


def test_selection_shifts():
    assert selection_shifts(1) == set()
    assert selection_shifts(16) == {1, -1, 2, -2, 4, -4, 8, -8}
    assert selection_shifts(12) == {1, -1, 2, -2, 4, -4, 8, -8}


@pytest.mark.parametrize("variant", ["base", "plus"])
def test_oblivious_compare(any_backend, variant):
    be, keys = any_backend
    zeta = be.params.zeta // (2 if variant == "plus" else 1)
    rng = np.random.default_rng(2)
    x = rng.integers(0, zeta + 1, be.S, dtype=np.uint64)
    y = rng.integers(0, zeta + 1, be.S, dtype=np.uint64)
    y[:10] = x[:10]  # ties
    b = sample_blinding(rng, Q, be.params.zeta, np.ones(be.S, bool), variant)
    c, _ = oblivious_compare(be, be.encrypt(keys.public_key, x), y, b, keys)
    assert np.array_equal(be.decrypt(keys.secret_key, c), (x >= y).astype(np.uint64))


def test_compare_encrypted_operand_and_negate(any_backend):
    be, keys = any_backend
    rng = np.random.default_rng(3)
    x = rng.integers(0, 100, be.S, dtype=np.uint64)
    y = rng.integers(0, 100, be.S, dtype=np.uint64)
    pk, sk = keys.public_key, keys.secret_key
    b = sample_blinding(rng, Q, be.params.zeta, np.ones(be.S, bool))
    ct = compare_blind(be, be.encrypt(pk, x), be.encrypt(pk, y), b)
    bits, _ = compare_respond(be, keys, ct)
    assert np.array_equal(be.decrypt(sk, compare_recover(be, bits, b)), (x >= y).astype(np.uint64))
    b2 = sample_blinding(rng, Q, be.params.zeta, np.ones(be.S, bool))
    ct = compare_blind(be, be.encrypt(pk, x), np.zeros(be.S, np.uint64), b2, negate=True)
    bits, _ = compare_respond(be, keys, ct)
    assert np.array_equal(be.decrypt(sk, compare_recover(be, bits, b2)), (x == 0).astype(np.uint64))


def test_blinding_single_use():
    be = make_backend(SMALL)
    k = be.keygen()
    b = sample_blinding(np.random.default_rng(0), Q, SMALL.zeta, np.ones(64, bool))
    ct = be.encrypt(k.public_key, np.zeros(64, np.uint64))
    compare_blind(be, ct, np.zeros(64, np.uint64), b)
    with pytest.raises(BlindingReuseError):
        compare_blind(be, ct, np.zeros(64, np.uint64), b)
    with pytest.raises(ParameterError):
        sample_blinding(np.random.default_rng(0), Q, SMALL.zeta, np.ones(64, bool), "weird")


@settings(max_examples=200)
@given(st.integers(-128, 128), st.integers(2, 127), st.data(), st.sampled_from([1, -1]), st.sampled_from([1, -1]))
def test_scalar_trace(d, A, data, R, R2):
    B = data.draw(st.integers(1, A - 1))
    for variant in ("base", "plus"):
        dd = d if variant == "base" else max(-64, min(64, d))
        v, vbit, cp, c = scalar_compare_trace(dd, A, B, R, Q, variant, R2 if variant == "plus" else 1)
        assert c == int(dd >= 0)
        assert v != 0 or variant == "base"


def _path_fixture(seed, mode):
    rng = np.random.default_rng(seed)
    f = random_forest(rng, 5, 4, 3, depth_jitter=mode == "adaptive", weight_scale=1.0)
    pol = FixedPadding(7) if mode == "interleaved" else None
    pm, hidden, _ = build_packed_model(f, Q, 256, 128, rng, policy=pol, mode=mode)
    return rng, f, pm, hidden


@pytest.mark.parametrize("mode", ["interleaved", "adaptive"])
def test_path_sums_zero_exactly_on_true_path(mode):
    rng, f, pm, hidden = _path_fixture(4, mode)
    plan = PathPlan.build(pm.structures, pm.layout)
    x = pm.spec.quantize_vector(random_inputs(rng, f, 1)[0])
    bits = [np.zeros(256, np.uint64) for _ in range(pm.layout.node_groups)]
    for k, ot in enumerate(hidden):
        for i, (g, s) in enumerate(pm.layout.node_slots[k]):
            if ot.psi[i]:
                c = int(x[ot.m[i]] >= ot.y[i])
                bits[g][s] = c if ot.upsilon[i] == 1 else 1 - c
            else:
                bits[g][s] = 0 if ot.upsilon[i] == 1 else 1
    sums = path_sums_plain(plan, bits, Q)
    for k, ot in enumerate(hidden):
        zero = [i for i, (g, s) in enumerate(pm.layout.leaf_slots[k]) if sums[g][s] == 0]
        assert len(zero) == 1
        assert ot.w[zero[0]] == evaluate_hidden(ot, x)


def test_path_masking_roundtrip():
    rng, f, pm, hidden = _path_fixture(5, "adaptive")
    be = make_backend(PheParams(256, Q))
    keys = be.keygen()
    plan = PathPlan.build(pm.structures, pm.layout)
    bits = [rng.integers(0, 2, 256, dtype=np.uint64) * pm.layout.node_mask(g) for g in range(pm.layout.node_groups)]
    pb = sample_path_blinding(rng, plan, Q)
    cts, views = path_costs(be, keys, path_blind(be, [be.encrypt(keys.public_key, b) for b in bits], pb), plan)
    got = [be.decrypt(keys.secret_key, c) for c in path_unblind(be, cts, pb)]
    want = path_sums_plain(plan, bits, Q)
    active = plan.leaf_active
    for g in range(pm.layout.leaf_groups):
        assert np.array_equal(got[g][active[g]], want[g][active[g]])


def test_plan_mismatch():
    _, _, pm, _ = _path_fixture(6, "adaptive")
    with pytest.raises(ProtocolError):
        PathPlan.build(pm.structures[:-1] + [(1,)], pm.layout)


def test_blobs():
    blobs = [b"", b"a", b"xyz" * 10]
    data = pack_blobs(blobs) + b"12345678"
    assert unpack_blobs(data, 8) == (blobs, b"12345678")
    with pytest.raises(SerializationError):
        unpack_blobs(data)


@pytest.fixture(scope="module")
def small_model():
    p = preset("desk-small", "transparent")
    rng = np.random.default_rng(10)
    f = random_forest(rng, 6, 5, 4)
    pm, *_ = build_packed_model(f, p.plain_modulus, p.slot_count, p.zeta, rng)
    xq = [pm.spec.quantize_vector(x) for x in random_inputs(rng, f, 3)]
    return p, f, pm, xq


def test_message_flow(small_model):
    p, f, pm, xq = small_model
    res = forest_infer(p, pm, xq, protocol_seed=1, backend_seed=2)
    assert res.pi == [evaluate_forest_fixed(f.trees, x, pm.spec) for x in xq]
    tr = res.transcript
    assert [r.type for r in tr.records[:2]] == ["HELLO", "PUBLIC_BUNDLE"]
    assert tr.query_types() == [t.name for t in QUERY_SEQUENCE] * 3
    assert [r.seq for r in tr.records] == list(range(len(tr.records)))
    assert tr.round_trips() == 12


def test_tcp_transport(small_model):
    p, f, pm, xq = small_model
    keys = keygen(p, client_shifts(pm.public_bundle()), seed=1)
    client = ClientSession(p, keys, pm.public_bundle(), seed=2)
    pis, tr = run_session(client, lambda: ServerSession(p, pm, seed=3), transport="tcp", queries=xq)
    assert pis == [evaluate_forest_fixed(f.trees, x, pm.spec) for x in xq]
    assert tr.message_count() == 24


def test_protocol_seed_reproducible(small_model):
    p, _, pm, xq = small_model
    a = forest_infer(p, pm, xq, protocol_seed=7, backend_seed=8)
    b = forest_infer(p, pm, xq, protocol_seed=7, backend_seed=8)
    for va, vb in zip(a.client.views, b.client.views):
        assert all(np.array_equal(x, y) for x, y in zip(va["path"], vb["path"]))


def test_precompute_off_same_result(small_model):
    p, _, pm, xq = small_model
    a = forest_infer(p, pm, xq, protocol_seed=7, backend_seed=8, precompute=False)
    b = forest_infer(p, pm, xq, protocol_seed=7, backend_seed=8)
    assert a.pi == b.pi


def _setup(p, pm):
    keys = keygen(p, client_shifts(pm.public_bundle()), seed=1)
    client = ClientSession(p, keys, pm.public_bundle(), seed=2)
    server = ServerSession(p, pm, seed=3)
    client.handle(server.handle(client.hello()))
    return client, server


def test_state_machine_errors(small_model):
    p, _, pm, xq = small_model
    client, server = _setup(p, pm)
    # out-of-order message: server answers with an Error message, client raises
    bad = Message(MsgType.PATH_COSTS, pack_blobs([]), client.expect_seq)
    err = server.handle(bad)
    assert err.type == MsgType.ERROR
    with pytest.raises(ProtocolError) as e:
        client.handle(err)
    assert e.value.stage == "query"
    # wrong sequence number
    msg = client.query(xq[0])
    err = server.handle(Message(msg.type, msg.payload, msg.seq + 5))
    assert err.type == MsgType.ERROR
    with pytest.raises(StateMachineError):
        client.query(xq[0])


def test_session_recovers_after_error(small_model):
    p, f, pm, xq = small_model
    client, server = _setup(p, pm)
    err = server.handle(Message(MsgType.COMPARE_RESULT, b"", client.expect_seq))
    with pytest.raises(ProtocolError):
        client.handle(err)
    msg = client.query(xq[0])
    while msg is not None:
        msg = client.handle(server.handle(msg))
    assert client.result == evaluate_forest_fixed(f.trees, xq[0], pm.spec)


def test_wrong_bundle_rejected(small_model):
    p, _, pm, _ = small_model
    other = dict(pm.public_bundle(), zeta=1)
    keys = keygen(p, client_shifts(other), seed=1)
    client = ClientSession(p, keys, other, seed=2)
    err = ServerSession(p, pm, seed=3).handle(client.hello())
    with pytest.raises(ProtocolError) as e:
        client.handle(err)
    assert e.value.stage == "setup"


def test_client_needs_secret_key(small_model):
    p, _, pm, _ = small_model
    keys = keygen(p, (), seed=1)
    with pytest.raises(ParameterError):
        ClientSession(p, keys.public(), pm.public_bundle())
    with pytest.raises(ParameterError):
        ServerSession(p, pm, strategy="magic")
    with pytest.raises(ParameterError):
        ServerSession(preset("paper-default", "transparent"), pm)


def test_rotate_sum_strategy_exhausts_desk_lattice():
    p = preset("desk-small")
    rng = np.random.default_rng(11)
    f = random_forest(rng, 3, 6, 3)
    pm, *_ = build_packed_model(f, p.plain_modulus, p.slot_count, p.zeta, rng, policy=FixedPadding(7),
                                mode="interleaved")
    xq = [pm.spec.quantize_vector(random_inputs(rng, f, 1)[0])]
    with pytest.raises(ProtocolError, match="noise budget"):
        forest_infer(p, pm, xq, protocol_seed=1, backend_seed=2, strategy="rotate-sum")
    res = forest_infer(p, pm, xq, protocol_seed=1, backend_seed=2)
    assert res.server.strategy == "diagonal"
    assert res.pi == [evaluate_forest_fixed(f.trees, xq[0], pm.spec)]


@pytest.mark.parametrize("mode", ["interleaved", "adaptive"])
def test_outsourced(mode):
    p = preset("desk-small", "transparent")
    wrong = {True: 0, False: 0}
    for seed in range(12):
        rng = np.random.default_rng(seed)
        f = random_forest(rng, 4, 5, 3, depth_jitter=mode == "adaptive")
        pol = FixedPadding(7) if mode == "interleaved" else None
        pm, *_ = build_packed_model(f, p.plain_modulus, p.slot_count, p.zeta, rng, policy=pol, mode=mode)
        x = pm.spec.quantize_vector(random_inputs(rng, f, 1)[0])
        want = evaluate_forest_fixed(f.trees, x, pm.spec)
        for fix in (True, False):
            res = outsourced_infer(p, pm, x, seed=seed, dummy_swap_fix=fix)
            wrong[fix] += res.pi != want
        assert [m[2] for m in res.messages][:2] == ["input", "compare_blinded"]
    assert wrong[True] == 0
    assert wrong[False] > 0


def test_outsourced_needs_ct_mul():
    p = preset("desk-small")
    f = random_forest(0, 1, 3, 2)
    pm, *_ = build_packed_model(f, p.plain_modulus, p.slot_count, p.zeta, np.random.default_rng(0))
    with pytest.raises(UnsupportedOperation):
        outsourced_infer(p, pm, [0, 0, 0])
