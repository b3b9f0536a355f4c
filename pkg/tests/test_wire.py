"""Frame codec: exact round trips for every message shape, and strictness
against truncated, oversized, and random-garbage input."""

import random
import struct

import pytest

from crdtlin.crdt import CausalTaggedState, GCounter, GSet, QueryCommand
from crdtlin.messages import (
    ROUND_BOTTOM,
    Ack,
    Failed,
    Merge,
    Merged,
    Nack,
    Prepare,
    Query,
    QueryDone,
    Round,
    Update,
    UpdateDone,
    UpdateOp,
    Vote,
    Voted,
    incremental_round,
)
from crdtlin.wire import MAX_FRAME, FrameError, decode_payload, encode, try_decode

RID = bytes(range(16))
STATE = CausalTaggedState(GCounter((3, 0, 7)), frozenset({(1, 1), (3, 2)}))
PLAIN = GCounter((1, 2, 3))
SET_STATE = GSet(frozenset({b"", b"alpha", b"\x00\xff"}))

SAMPLES = [
    Update(0, RID, UpdateOp.increment()),
    Update(0, RID, UpdateOp.set_add(b"")),
    Update(0, RID, UpdateOp.set_add(b"payload \xf0\x9f")),
    UpdateDone(2, RID, (2, 41), 1, 0),
    Query(0, RID, QueryCommand.counter_value()),
    Query(0, RID, QueryCommand.set_contains(b"x")),
    Query(0, RID, QueryCommand.set_elements()),
    QueryDone(1, RID, 42, STATE, 3, 1),
    QueryDone(1, RID, None, None, 1, 0),
    QueryDone(1, RID, True, None, 1, 0),
    QueryDone(1, RID, False, SET_STATE, 2, 0),
    QueryDone(1, RID, (b"", b"two"), SET_STATE, 1, 0),
    Merge(3, RID, PLAIN),
    Merge(3, RID, STATE),
    Merged(2, RID),
    Prepare(1, RID, incremental_round((4, 1)), PLAIN),
    Prepare(1, RID, Round(7, (9, 2)), STATE),
    Ack(2, RID, Round(0, (0, 0)), PLAIN),
    Ack(2, RID, Round(12, (3, 5)), SET_STATE),
    Vote(1, RID, Round(5, (8, 1)), STATE),
    Voted(3, RID, Round(5, (8, 1))),
    Nack(2, RID, Round(9, (0, 0)), PLAIN, (17, 4)),
    Failed(1, RID, "query", "max-retries"),
    Failed(1, RID, "update", "max-retries", (2, 9)),
    Failed(1, RID, "update", "ожидание истекло", None),
]


@pytest.mark.parametrize("msg", SAMPLES, ids=lambda m: type(m).__name__)
def test_round_trip(msg):
    frame = encode(msg)
    (length,) = struct.unpack(">I", frame[:4])
    assert length == len(frame) - 4
    assert decode_payload(frame[4:]) == msg
    decoded, consumed = try_decode(frame + b"extra")
    assert decoded == msg
    assert consumed == len(frame)


def test_booleans_survive_the_int_overlap():
    # bool is an int subclass; make sure True does not come back as 1
    frame = encode(QueryDone(1, RID, True, None, 1, 0))
    assert decode_payload(frame[4:]).result is True
    frame = encode(QueryDone(1, RID, 1, None, 1, 0))
    result = decode_payload(frame[4:]).result
    assert result == 1 and not isinstance(result, bool)


def test_try_decode_waits_for_a_full_frame():
    frame = encode(Merge(1, RID, STATE))
    for cut in range(len(frame)):
        assert try_decode(frame[:cut]) is None
    assert try_decode(frame) is not None


def test_every_truncated_payload_is_rejected():
    for msg in SAMPLES:
        payload = encode(msg)[4:]
        for cut in range(len(payload)):
            with pytest.raises(FrameError):
                decode_payload(payload[:cut])


def test_trailing_bytes_inside_the_frame_are_rejected():
    payload = encode(Merged(2, RID))[4:]
    with pytest.raises(FrameError):
        decode_payload(payload + b"\x00")


def test_oversized_declared_length_is_rejected():
    with pytest.raises(FrameError):
        try_decode(struct.pack(">I", MAX_FRAME) + b"x")


def test_oversized_state_is_rejected_at_encode():
    big = GSet(frozenset({bytes([i % 251, i // 251 % 251, i // 63001]) + b"x" * 40 for i in range(400_000)}))
    with pytest.raises(FrameError):
        encode(Merge(1, RID, big))


def test_unknown_message_type_is_rejected():
    payload = bytearray(encode(Merged(2, RID))[4:])
    payload[0] = 99
    with pytest.raises(FrameError):
        decode_payload(bytes(payload))


def test_wrong_request_id_length_is_rejected():
    with pytest.raises(FrameError):
        encode(Merged(2, b"short"))


def test_filler_round_must_be_bottom():
    # a Merge carries no round; smuggling one in is corruption
    good = encode(Merge(1, RID, PLAIN))[4:]
    bad = bytearray(good)
    struct.pack_into(">q", bad, 1 + 16 + 4, 3)
    with pytest.raises(FrameError):
        decode_payload(bytes(bad))
    assert decode_payload(good) == Merge(1, RID, PLAIN)


def test_merge_requires_a_state_payload():
    # absent state slot (length 0) is only legal where states are optional
    payload = bytearray(encode(Merge(1, RID, PLAIN))[4:])
    header_end = 1 + 16 + 4 + 8 + 16
    truncated = payload[:header_end] + struct.pack(">I", 0)
    with pytest.raises(FrameError):
        decode_payload(bytes(truncated))


def test_corrupt_state_bytes_are_rejected():
    payload = bytearray(encode(Merge(1, RID, PLAIN))[4:])
    payload[-1] ^= 0xFF
    payload[-9] ^= 0xFF  # stay decodable in length, break the content lead
    header_end = 1 + 16 + 4 + 8 + 16
    payload[header_end + 4] = ord("?")
    with pytest.raises(FrameError):
        decode_payload(bytes(payload))


def test_fuzzed_buffers_never_raise_anything_but_frame_errors():
    rng = random.Random(99)
    survived = 0
    for _ in range(100_000):
        blob = rng.randbytes(rng.randrange(0, 60))
        try:
            out = try_decode(blob)
        except FrameError:
            continue
        if out is not None:
            survived += 1
    # random short buffers essentially never form a valid frame
    assert survived == 0


def test_fuzzed_mutations_of_valid_frames():
    rng = random.Random(7)
    frames = [encode(m) for m in SAMPLES]
    for _ in range(20_000):
        frame = bytearray(rng.choice(frames))
        for _ in range(rng.randrange(1, 4)):
            frame[rng.randrange(len(frame))] ^= 1 << rng.randrange(8)
        try:
            try_decode(bytes(frame))
        except FrameError:
            pass  # rejection is fine; any other exception fails the test


def _random_state(rng: random.Random):
    pick = rng.randrange(3)
    if pick == 0:
        return GCounter(tuple(rng.randrange(1 << 40) for _ in range(rng.randrange(1, 6))))
    if pick == 1:
        return GSet(frozenset(rng.randbytes(rng.randrange(0, 12)) for _ in range(rng.randrange(0, 6))))
    tags = frozenset((rng.randrange(1, 8), rng.randrange(1, 1 << 30)) for _ in range(rng.randrange(0, 5)))
    return CausalTaggedState(GCounter((rng.randrange(1 << 20),)), tags)


def test_hundred_thousand_random_valid_messages_round_trip():
    rng = random.Random(2401)
    rounds = 100_000
    for i in range(rounds):
        rid = rng.randbytes(16)
        sender = rng.randrange(0, 64)
        rnd = Round(rng.randrange(-1, 1 << 30), (rng.randrange(1, 1 << 40), rng.randrange(1, 32)))
        pick = i % 12
        if pick == 0:
            msg = Update(sender, rid, UpdateOp.set_add(rng.randbytes(rng.randrange(0, 20))))
        elif pick == 1:
            msg = UpdateDone(sender, rid, (rng.randrange(1, 9), rng.randrange(1, 1 << 30)),
                             rng.randrange(1 << 16), rng.randrange(1 << 10))
        elif pick == 2:
            msg = Query(sender, rid, QueryCommand.set_contains(rng.randbytes(rng.randrange(0, 9))))
        elif pick == 3:
            result = rng.choice([None, True, False, rng.randrange(-(1 << 40), 1 << 40),
                                 tuple(rng.randbytes(3) for _ in range(rng.randrange(0, 4)))])
            msg = QueryDone(sender, rid, result, rng.choice([None, _random_state(rng)]),
                            rng.randrange(1 << 8), rng.randrange(1 << 8))
        elif pick == 4:
            msg = Merge(sender, rid, _random_state(rng))
        elif pick == 5:
            msg = Merged(sender, rid)
        elif pick == 6:
            msg = Prepare(sender, rid, rnd, _random_state(rng))
        elif pick == 7:
            msg = Ack(sender, rid, rnd, _random_state(rng))
        elif pick == 8:
            msg = Vote(sender, rid, rnd, _random_state(rng))
        elif pick == 9:
            msg = Voted(sender, rid, rnd)
        elif pick == 10:
            msg = Nack(sender, rid, rnd, _random_state(rng),
                       (rng.randrange(1, 1 << 40), rng.randrange(1, 32)))
        else:
            tag = (rng.randrange(1, 9), rng.randrange(1, 1 << 20)) if rng.random() < 0.5 else None
            msg = Failed(sender, rid, rng.choice(["update", "query"]), "timeout", tag)
        assert decode_payload(encode(msg)[4:]) == msg


def test_back_to_back_frames_decode_in_sequence():
    stream = b"".join(encode(m) for m in SAMPLES)
    decoded = []
    view = stream
    while view:
        msg, consumed = try_decode(view)
        decoded.append(msg)
        view = view[consumed:]
    assert decoded == SAMPLES
