"""Client and server endpoints for the forest inference protocol.

After a two-message setup (client keys in, public bundle back) every query is
exactly eight messages:

    Query -> CompareBlinded -> CompareResult -> PathBlinded -> PathCosts
          -> PathCmpBlinded -> PathCmpResult -> Response

Both endpoints are plain state machines: ``handle(message)`` returns the
reply (or None). Drivers in :mod:`kangaroo.transport` move the bytes.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..errors import KangarooError, ParameterError, ProtocolError, SerializationError, StateMachineError
from ..model import PackedModel, SlotLayout, bundle_digest, public_bundle_bytes, public_bundle_from_bytes
from ..phe import Backend, KeyMaterial, PheParams, centered, keygen, make_backend
from ..rand import make_rng
from ..transport import Message, MsgType
from .comparison import (compare_blind, compare_recover, compare_recover_times, forest_compare_adjust,
                         sample_blinding, sign_bits)
from .path import PathPlan, path_blind, path_unblind, sample_path_blinding
from .selection import feature_sel_pack, feature_select_I, left_rotations, select_diagonal, selection_shifts

log = logging.getLogger(__name__)

STRATEGIES = ("auto", "rotate-sum", "diagonal")
# below this many plaintext multiplications of headroom the depth-one selector is used
DIAGONAL_CAPACITY = 3.5

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def pack_blobs(blobs) -> bytes:
    out = [_U32.pack(len(blobs))]
    for b in blobs:
        out.append(_U32.pack(len(b)))
        out.append(b)
    return b"".join(out)


def unpack_blobs(data: bytes, trailer: int = 0) -> tuple[list[bytes], bytes]:
    """Inverse of pack_blobs; ``trailer`` bytes after the blobs are returned separately."""
    try:
        (n,) = _U32.unpack_from(data, 0)
        off, out = 4, []
        for _ in range(n):
            (ln,) = _U32.unpack_from(data, off)
            off += 4
            if off + ln > len(data):
                raise SerializationError("blob runs past the end of the payload")
            out.append(data[off:off + ln])
            off += ln
    except struct.error:
        raise SerializationError("truncated blob list") from None
    if len(data) - off != trailer:
        raise SerializationError(f"expected {trailer} trailing bytes, found {len(data) - off}")
    return out, data[off:]


def client_shifts(bundle: dict) -> set[int]:
    """Rotation shifts the server may need for this bundle."""
    return selection_shifts(int(bundle["layout"]["block"]))


def error_message(stage: str, detail: str, seq: int) -> Message:
    return Message(MsgType.ERROR, json.dumps({"stage": stage, "message": detail}).encode(), seq)


def _raise_error(msg: Message):
    try:
        doc = json.loads(msg.payload)
        stage, detail = doc["stage"], doc["message"]
    except (ValueError, KeyError, TypeError):
        stage, detail = "unknown", msg.payload.decode(errors="replace")
    raise ProtocolError(stage, f"peer aborted: {detail}")


class _Endpoint:
    role = ""

    def __init__(self, backend: Backend):
        self.backend = backend
        self.expect_seq = 0
        self.timings = defaultdict(float)  # milliseconds per component, summed over queries

    def _timed(self, name, fn, *args):
        t = time.perf_counter()
        try:
            return fn(*args)
        finally:
            self.timings[name] += (time.perf_counter() - t) * 1000

    def _cts(self, payload: bytes, count: int | None, stage: str, trailer: int = 0):
        blobs, rest = unpack_blobs(payload, trailer)
        if count is not None and len(blobs) != count:
            raise ProtocolError(stage, f"expected {count} ciphertexts, got {len(blobs)}")
        return [self.backend.ciphertext_from_bytes(b) for b in blobs], rest

    def _out(self, kind: MsgType, cts=(), extra: bytes = b"", blobs=None) -> Message:
        if blobs is None:
            blobs = [self.backend.ciphertext_bytes(c) for c in cts]
        msg = Message(kind, pack_blobs(blobs) + extra, self.expect_seq)
        self.expect_seq += 1
        return msg

    def _accept(self, msg: Message, allowed) -> None:
        if msg.seq != self.expect_seq:
            raise StateMachineError(self.role, f"sequence {msg.seq}, expected {self.expect_seq}")
        if msg.type not in allowed:
            names = "/".join(t.name for t in allowed)
            raise StateMachineError(self.role, f"got {msg.type.name} while expecting {names}")
        self.expect_seq += 1


# server --------------------------------------------------------------------------

@dataclass
class _QueryState:
    compare: list = field(default_factory=list)
    path: object = None
    path_cmp: list = field(default_factory=list)
    t_mask: np.ndarray | None = None


class ServerSession(_Endpoint):
    """Holds the packed model; never sees the secret key.

    ``seed`` drives all protocol randomness (blinding, masks). ``strategy``
    picks the feature selector: "rotate-sum" uses the packed rotate-and-sum
    selectors, "diagonal" a depth-one rotation-diagonal selector, and "auto"
    takes the diagonal one when an interleaved layout would otherwise exceed
    the backend's multiplicative headroom.
    """

    role = "server"

    def __init__(self, params: PheParams, packed: PackedModel, seed=None, strategy: str = "auto",
                 precompute: bool = True):
        if strategy not in STRATEGIES:
            raise ParameterError(f"unknown selection strategy {strategy!r}")
        if packed.q != params.plain_modulus or packed.layout.slot_count != params.slot_count:
            raise ParameterError("packed model was built for different parameters")
        limit = params.zeta // 2 if packed.comparison == "plus" else params.zeta
        if packed.spec.zeta > limit:
            raise ParameterError(f"quantization precision {packed.spec.zeta} exceeds {limit} for these parameters")
        super().__init__(make_backend(params))
        self.params = params
        self.pm = packed
        self.zeta = params.zeta
        self.rng = make_rng(seed)
        self.bundle = packed.public_bundle()
        self.digest = bundle_digest(self.bundle)
        self.plan = PathPlan.build(packed.structures, packed.layout)
        self.strategy = self._resolve_strategy(strategy)
        self.precompute_enabled = precompute
        self.keys: KeyMaterial | None = None
        self.state = "init"
        self._q: _QueryState | None = None
        self._next: _QueryState | None = None
        self.queries = 0

    def _resolve_strategy(self, strategy):
        if strategy != "auto":
            return strategy
        cap = getattr(self.backend, "plain_mul_capacity", lambda: math.inf)()
        if self.pm.layout.mode == "interleaved" and cap < DIAGONAL_CAPACITY:
            return "diagonal"
        return "rotate-sum"

    # blinding material, drawn in a fixed order so transcripts are reproducible
    def _fill(self, st: _QueryState, upto: str):
        lay, pm, q = self.pm.layout, self.pm, self.pm.q
        stages = ("compare", "path", "path_cmp", "t_mask")
        for name in stages[:stages.index(upto) + 1]:
            if name == "compare" and not st.compare:
                for g in range(lay.node_groups):
                    b = sample_blinding(self.rng, q, self.zeta, lay.node_mask(g), pm.comparison)
                    forest_compare_adjust(b, pm.U[g], pm.P[g])
                    st.compare.append(b)
            elif name == "path" and st.path is None:
                st.path = sample_path_blinding(self.rng, self.plan, q)
            elif name == "path_cmp" and not st.path_cmp:
                st.path_cmp = [sample_blinding(self.rng, q, self.zeta, self.plan.leaf_active[g], pm.comparison)
                               for g in range(lay.leaf_groups)]
            elif name == "t_mask" and st.t_mask is None:
                st.t_mask = self.rng.integers(0, q, size=lay.slot_count, dtype=np.uint64)

    def after_send(self):
        """Precompute hook: draw the next stage's blinding while the peer works."""
        if not self.precompute_enabled or self.keys is None:
            return
        if self.state == "ready":
            if self._next is None:
                self._next = _QueryState()
                self._fill(self._next, "compare")
        elif self._q is not None:
            nxt = {"compare": "path", "path": "path_cmp", "path_cmp": "t_mask"}.get(self.state)
            if nxt:
                self._fill(self._q, nxt)

    def handle(self, msg: Message) -> Message | None:
        stage = {"init": "setup", "ready": "query"}.get(self.state, self.state)
        try:
            if msg.type == MsgType.ERROR:
                self._accept(msg, (MsgType.ERROR,))
                self._reset()
                return None
            reply = self._dispatch(msg)
        except KangarooError as e:
            if isinstance(e, ProtocolError) and not isinstance(e, StateMachineError):
                stage = e.stage
            log.warning("session aborted at %s: %s", stage, e)
            self._reset()
            out = error_message(stage, getattr(e, "detail", str(e)), msg.seq + 1)
            self.expect_seq = msg.seq + 2
            return out
        return reply

    def _reset(self):
        self._q = None
        self.state = "ready" if self.keys is not None else "init"

    def _dispatch(self, msg):
        if self.state == "init":
            self._accept(msg, (MsgType.HELLO,))
            return self._on_hello(msg)
        handler = {
            "ready": (MsgType.QUERY, self._on_query),
            "compare": (MsgType.COMPARE_RESULT, self._on_compare_result),
            "path": (MsgType.PATH_COSTS, self._on_path_costs),
            "path_cmp": (MsgType.PATH_CMP_RESULT, self._on_path_cmp_result),
        }[self.state]
        self._accept(msg, (handler[0],))
        return self._timed(self.state, handler[1], msg)

    def _on_hello(self, msg):
        blobs, _ = unpack_blobs(msg.payload)
        if len(blobs) != 3:
            raise ProtocolError("setup", "hello must carry digest, public key and rotation keys")
        digest, pk, rk = blobs
        if digest != self.digest:
            raise ProtocolError("setup", "client public bundle does not match the served model")
        try:
            self.keys = self.backend.load_keys(pk, rk)
        except KangarooError as e:
            raise ProtocolError("setup", f"cannot load client keys: {e}") from None
        missing = client_shifts(self.bundle) - set(self.keys.rotation_keys.shifts)
        if missing and self.strategy != "diagonal":
            log.info("client declared no keys for shifts %s", sorted(missing))
        self.state = "ready"
        return self._out(MsgType.PUBLIC_BUNDLE, blobs=[public_bundle_bytes(self.bundle)])

    def _select(self, ct_x):
        lay, pm, be = self.pm.layout, self.pm, self.backend
        if self.strategy == "diagonal":
            diags = [pm.diagonal_masks(g) for g in range(lay.node_groups)]
            span = max((max(d) for d in diags if d), default=0)
            rots = left_rotations(be, ct_x, span, self.keys)
            return [select_diagonal(be, rots, d) if d else be.mul_plain(ct_x, np.zeros(lay.slot_count, np.uint64))
                    for d in diags]
        if lay.mode == "interleaved":
            out = []
            for g in range(lay.node_groups):
                ks = [k for k in range(lay.tree_count) if k // lay.block == g]
                masks = [pm.tree_mask(k) for k in ks]
                out.append(feature_sel_pack(be, ct_x, masks, lay.block, len(lay.node_slots[ks[0]]), self.keys))
            return out
        return [feature_select_I(be, ct_x, lay.block, pm.group_mask(g), self.keys) for g in range(lay.node_groups)]

    def _on_query(self, msg):
        (ct_x,), _ = self._cts(msg.payload, 1, "query")
        st = self._next or _QueryState()
        self._next = None
        self._q = st
        self._fill(st, "compare")
        xs = self._timed("select", self._select, ct_x)
        cts = [compare_blind(self.backend, x, self.pm.Y[g], st.compare[g])
               for g, x in enumerate(xs)]
        self.state = "compare"
        return self._out(MsgType.COMPARE_BLINDED, cts)

    def _on_compare_result(self, msg):
        st = self._q
        bits, _ = self._cts(msg.payload, self.pm.layout.node_groups, "compare")
        C = [compare_recover(self.backend, b, st.compare[g]) for g, b in enumerate(bits)]
        self._fill(st, "path")
        self.state = "path"
        return self._out(MsgType.PATH_BLINDED, path_blind(self.backend, C, st.path))

    def _on_path_costs(self, msg):
        st = self._q
        costs, _ = self._cts(msg.payload, self.pm.layout.leaf_groups, "path")
        I = path_unblind(self.backend, costs, st.path)  # noqa: E741
        self._fill(st, "path_cmp")
        zero = np.zeros(self.pm.layout.slot_count, dtype=np.uint64)
        cts = [compare_blind(self.backend, i, zero, st.path_cmp[g], "path", negate=True)
               for g, i in enumerate(I)]
        self.state = "path_cmp"
        return self._out(MsgType.PATH_CMP_BLINDED, cts)

    def _on_path_cmp_result(self, msg):
        st = self._q
        bits, _ = self._cts(msg.payload, self.pm.layout.leaf_groups, "path_cmp")
        T = [compare_recover_times(self.backend, b, st.path_cmp[g], self.pm.W[g]) for g, b in enumerate(bits)]
        self._fill(st, "t_mask")
        out = self.backend.add_plain(self.backend.sum_ciphertexts(T), st.t_mask)
        scalar = int(sum(int(v) for v in st.t_mask) % self.pm.q)
        self._q = None
        self.state = "ready"
        self.queries += 1
        return self._out(MsgType.RESPONSE, [out], extra=_U64.pack(scalar))


# client ----------------------------------------------------------------------------

class ClientSession(_Endpoint):
    """Holds the secret key and the feature vector; learns only the aggregate."""

    role = "client"

    def __init__(self, params: PheParams, keys: KeyMaterial, bundle: dict, seed=None, precompute: bool = True,
                 record_views: bool = True):
        if keys.secret_key is None:
            raise ParameterError("client needs the secret key")
        super().__init__(make_backend(params, seed))
        if int(bundle["plain_modulus"]) != params.plain_modulus or int(bundle["slot_count"]) != params.slot_count:
            raise ParameterError("public bundle was built for different parameters")
        self.params = params
        self.keys = keys
        self.bundle = bundle
        self.digest = bundle_digest(bundle)
        self.layout = SlotLayout.from_dict(bundle["layout"])
        self.plan = PathPlan.build([tuple(s) for s in bundle["structures"]], self.layout)
        self.q = params.plain_modulus
        self.precompute_enabled = precompute
        self.record_views = record_views
        self.state = "init"
        self.result: int | None = None
        self.views: list[dict] = []
        self._zeros: list = []

    @property
    def frac_bits(self) -> int:
        return int(self.bundle["frac_bits"])

    def _encrypt(self, v):
        if self._zeros:
            return self.backend.add_plain(self._zeros.pop(), v)
        return self.backend.encrypt(self.keys.public_key, v)

    def _expected_encryptions(self) -> int:
        return {"ready": 1, "query": self.layout.node_groups, "compare": self.layout.leaf_groups,
                "path": self.layout.leaf_groups}.get(self.state, 0)

    def after_send(self):
        """Precompute hook: prepare encryptions of zero for the next reply."""
        if not self.precompute_enabled:
            return
        need = self._expected_encryptions() - len(self._zeros)
        for _ in range(max(0, need)):
            self._zeros.append(self.backend.encrypt_zero(self.keys.public_key))

    def hello(self) -> Message:
        if self.state != "init":
            raise StateMachineError("client", "setup already done")
        self.expect_seq = 0
        blobs = [self.digest, self.backend.public_key_bytes(self.keys), self.backend.rotation_keys_bytes(self.keys)]
        self.state = "setup"
        return self._out(MsgType.HELLO, blobs=blobs)

    def query(self, xq) -> Message:
        """Start a query on a quantized feature vector."""
        if self.state != "ready":
            raise StateMachineError("client", f"cannot start a query in state {self.state}")
        self.result = None
        self._view = {}
        if self.record_views:
            self.views.append(self._view)
        ct = self._timed("encrypt", self._encrypt, self.layout.input_vector(xq))
        self.state = "query"
        return self._out(MsgType.QUERY, [ct])

    def handle(self, msg: Message) -> Message | None:
        if msg.type == MsgType.ERROR:
            self.state = "ready" if self.state != "setup" else "init"
            self.expect_seq = msg.seq + 1
            _raise_error(msg)
        handler = {
            "setup": (MsgType.PUBLIC_BUNDLE, self._on_bundle),
            "query": (MsgType.COMPARE_BLINDED, self._on_compare),
            "compare": (MsgType.PATH_BLINDED, self._on_path),
            "path": (MsgType.PATH_CMP_BLINDED, self._on_path_cmp),
            "path_cmp": (MsgType.RESPONSE, self._on_response),
        }.get(self.state)
        if handler is None:
            raise StateMachineError("client", f"unexpected {msg.type.name} in state {self.state}")
        self._accept(msg, (handler[0],))
        return self._timed(self.state, handler[1], msg)

    def _decrypt_all(self, cts, name):
        out = [self.backend.decrypt(self.keys.secret_key, c) for c in cts]
        if self.record_views:
            self._view[name] = [v.copy() for v in out]
        return out

    def _on_bundle(self, msg):
        blobs, _ = unpack_blobs(msg.payload)
        if len(blobs) != 1 or bundle_digest(public_bundle_from_bytes(blobs[0])) != self.digest:
            raise ProtocolError("setup", "server returned a different public bundle")
        self.state = "ready"
        return None

    def _on_compare(self, msg):
        cts, _ = self._cts(msg.payload, self.layout.node_groups, "compare")
        vs = self._decrypt_all(cts, "compare")
        self.state = "compare"
        return self._out(MsgType.COMPARE_RESULT, [self._encrypt(sign_bits(v, self.q)) for v in vs])

    def _on_path(self, msg):
        cts, _ = self._cts(msg.payload, self.layout.node_groups, "path")
        iprime = self._decrypt_all(cts, "path")
        costs = self.plan.client_costs(iprime, self.q)
        self.state = "path"
        return self._out(MsgType.PATH_COSTS, [self._encrypt(c) for c in costs])

    def _on_path_cmp(self, msg):
        cts, _ = self._cts(msg.payload, self.layout.leaf_groups, "path_cmp")
        vs = self._decrypt_all(cts, "path_cmp")
        self.state = "path_cmp"
        return self._out(MsgType.PATH_CMP_RESULT, [self._encrypt(sign_bits(v, self.q)) for v in vs])

    def _on_response(self, msg):
        (ct,), rest = self._cts(msg.payload, 1, "response", trailer=_U64.size)
        (mask_sum,) = _U64.unpack(rest)
        (t2,) = self._decrypt_all([ct], "response")
        total = sum(int(v) for v in t2)
        self.result = centered((total - mask_sum) % self.q, self.q)
        if self.record_views:
            self._view["pi"] = self.result
        self.state = "ready"
        return None

    def dequantized(self, pi: int | None = None) -> float:
        pi = self.result if pi is None else pi
        return pi / (1 << self.frac_bits)


# in-process convenience ------------------------------------------------------------

@dataclass
class InferenceResult:
    pi: list
    transcript: object
    client: ClientSession
    server: ServerSession


def forest_infer(params: PheParams, packed: PackedModel, queries, *, keys: KeyMaterial | None = None,
                 protocol_seed=None, backend_seed=None, strategy: str = "auto", transport: str = "sim",
                 profile="lan", precompute: bool = True) -> InferenceResult:
    """Run setup plus one query per quantized input vector, both parties in-process."""
    from ..transport import run_session

    bundle = packed.public_bundle()
    if keys is None:
        keys = keygen(params, client_shifts(bundle), seed=backend_seed)
    client = ClientSession(params, keys, bundle, seed=backend_seed, precompute=precompute)
    server = ServerSession(params, packed, seed=protocol_seed, strategy=strategy, precompute=precompute)
    pis, transcript = run_session(client, server, transport=transport, profile=profile, queries=list(queries))
    return InferenceResult(pis, transcript, client, server)


__all__ = ["ClientSession", "InferenceResult", "STRATEGIES", "ServerSession", "client_shifts", "error_message",
           "forest_infer", "pack_blobs", "unpack_blobs"]
