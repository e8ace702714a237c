import io
import socket

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kangaroo.errors import FramingError
from kangaroo.transport import (HEADER, MAX_PAYLOAD, PROFILES, Message, MsgType, NetProfile, Record, SimClock,
                                Transcript, deframe, frame, load_profiles, read_frame, simulate_send, write_frame)


@given(st.sampled_from(list(MsgType)), st.binary(max_size=2048), st.integers(0, 2**64 - 1))
def test_frame_roundtrip(kind, payload, seq):
    msg = Message(kind, payload, seq)
    data = frame(msg)
    assert len(data) == msg.size == HEADER.size + len(payload)
    back, rest = deframe(data + b"tail")
    assert back == msg and rest == b"tail"


def test_wire_layout():
    data = frame(Message(MsgType.QUERY, b"\x01\x02", 7))
    assert data == b"\x02\x00\x00\x00" + b"\x03" + (7).to_bytes(8, "little") + b"\x01\x02"


@given(st.binary(max_size=64), st.integers(0, 2**32))
def test_truncation_detected(payload, seq):
    data = frame(Message(MsgType.RESPONSE, payload, seq))
    for cut in range(len(data)):
        with pytest.raises(FramingError):
            deframe(data[:cut])


def test_unknown_tag_and_oversize():
    data = bytearray(frame(Message(MsgType.HELLO, b"x")))
    data[4] = 0xFF
    with pytest.raises(FramingError):
        deframe(bytes(data))
    with pytest.raises(FramingError):
        frame(Message(MsgType.HELLO, b"x" * 11), max_payload=10)
    big = HEADER.pack(MAX_PAYLOAD + 1, 1, 0)
    with pytest.raises(FramingError):
        deframe(big)


def test_socket_frames():
    a, b = socket.socketpair()
    with a, b:
        msg = Message(MsgType.PATH_COSTS, b"abc" * 1000, 3)
        assert write_frame(a, msg) == msg.size
        assert read_frame(b) == msg
        a.close()
        with pytest.raises(FramingError):
            read_frame(b)


def test_profiles(tmp_path):
    assert NetProfile.parse("wan") == PROFILES["wan"] == NetProfile("wan", 40e6, 80.0)
    p = NetProfile.parse("sat:1e6:600")
    assert (p.name, p.bandwidth_bps, p.rtt_ms) == ("sat", 1e6, 600.0)
    for bad in ("nope", "a:b:c", "x:0:1", "x:1:-1"):
        with pytest.raises(ValueError):
            NetProfile.parse(bad)
    f = tmp_path / "nets.conf"
    f.write_text("# comment\nfast:1e10:0.01\nslow:1e5:300  # tail\n\n")
    profs = load_profiles(f)
    assert set(profs) == {"fast", "slow"} and profs["slow"].rtt_ms == 300


def test_simulate_send():
    wan = PROFILES["wan"]
    assert simulate_send(wan, 5000, 10.0) == pytest.approx(10 + 40 + 1.0)
    assert simulate_send(wan, 5000, 10.0, link_free=20.0) == pytest.approx(20 + 41.0)


@given(st.lists(st.tuples(st.sampled_from(["up", "down"]), st.integers(1, 10**6)), min_size=1, max_size=30))
def test_alternating_closed_form(msgs):
    wan = PROFILES["wan"]
    # strictly alternating exchange: wall time is the plain sum of transits
    seq = [("up" if i % 2 == 0 else "down", n) for i, (_, n) in enumerate(msgs)]
    clock = SimClock(wan)
    for d, n in seq:
        clock.send(d, n)
    want = sum(wan.rtt_ms / 2 + n * 8 / wan.bandwidth_bps * 1000 for _, n in seq)
    assert clock.now == pytest.approx(want, rel=1e-12)


def test_same_direction_serializes():
    p = NetProfile("t", 8000, 0)  # 1 byte per ms
    clock = SimClock(p)
    t0, t1 = clock.send("up", 10)
    assert (t0, t1) == (0, 10)
    assert clock.send("up", 5) == (10, 15)


def test_transcript_accounting():
    tr = Transcript()
    kinds = [("up", "HELLO", True), ("down", "PUBLIC_BUNDLE", True)] + [
        ("up" if i % 2 == 0 else "down", f"T{i}", False) for i in range(8)]
    for i, (d, k, s) in enumerate(kinds):
        tr.add(Record(i, d, k, 100 * (i + 1), 0.0, 0.0, s))
    assert tr.message_count() == 8 and tr.round_trips() == 4
    assert tr.bytes_up(True) == 100 and tr.bytes_down(True) == 200
    assert tr.total_bytes() == sum(100 * (i + 1) for i in range(10))
    text = tr.to_csv()
    assert text.splitlines()[0] == "seq,direction,type,bytes,t_send_ms,t_recv_ms"
    buf = io.StringIO()
    tr.to_csv(buf)
    assert buf.getvalue() == text
    shaped = tr.resimulate(PROFILES["lan"])
    assert shaped.wall_ms(False) > 0 and shaped.summary()["query_messages"] == 8
