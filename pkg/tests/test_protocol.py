"""Wire format: weight blobs, frames, message round-trips, corruption handling."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbot.errors import Disconnected, FormatError, ProtocolError, TruncationError
from fedbot.protocol import (
    ERR_FEDERATION_COMPLETE,
    MAGIC,
    MAX_FRAME,
    MSG_HEARTBEAT,
    MSG_JOIN,
    Error,
    Heartbeat,
    Join,
    RoundResult,
    RoundStart,
    Update,
    decode_message,
    deserialize_weights,
    encode_message,
    read_frame,
    recv_message,
    send_message,
    serialize_weights,
    write_frame,
)
from fedbot.tensor import Tensor
from fedbot.weights import ModelWeights


def _mw(named_shapes, seed=0):
    rng = np.random.default_rng(seed)
    return ModelWeights(
        [(n, Tensor(rng.normal(size=s).astype(np.float32), name=n)) for n, s in named_shapes]
    )


class TestWeightBlob:
    def test_round_trip(self):
        w = _mw([("a.w", (3, 4)), ("a.b", (4,)), ("deep.L0.x", (2, 2, 2))])
        out = deserialize_weights(serialize_weights(w))
        assert out.bit_equal(w)
        assert list(out.names()) == list(w.names())

    def test_header(self):
        blob = serialize_weights(_mw([("x", (1,))]))
        assert blob[:4] == MAGIC
        assert blob[4] == 1  # version

    def test_float64_cast_to_f32_on_wire(self):
        w = ModelWeights([("x", Tensor(np.array([1.0, 2.0], dtype=np.float64), name="x"))])
        out = deserialize_weights(serialize_weights(w))
        assert out["x"].data.dtype == np.float32

    def test_deserialized_arrays_freshly_allocated(self):
        # tensors must not alias the blob bytes (BLAS alignment determinism)
        blob = serialize_weights(_mw([("x", (4, 4))]))
        out = deserialize_weights(blob)
        data = out["x"].data
        assert data.flags["C_CONTIGUOUS"]
        assert data.base is None or data.base.nbytes == data.nbytes

    def test_bad_magic(self):
        blob = bytearray(serialize_weights(_mw([("x", (1,))])))
        blob[0] = ord("X")
        with pytest.raises(FormatError, match="magic"):
            deserialize_weights(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(serialize_weights(_mw([("x", (1,))])))
        blob[4] = 9
        with pytest.raises(FormatError, match="version"):
            deserialize_weights(bytes(blob))

    def test_truncation_reports_offset(self):
        blob = serialize_weights(_mw([("x", (8, 8))]))
        with pytest.raises(TruncationError):
            deserialize_weights(blob[: len(blob) - 5])

    def test_trailing_garbage_rejected(self):
        blob = serialize_weights(_mw([("x", (2,))]))
        with pytest.raises(FormatError, match="trailing"):
            deserialize_weights(blob + b"\x00")

    def test_zero_tensor_blob_round_trips(self):
        # a weightless set is valid on the wire; aggregation rejects it later
        out = deserialize_weights(struct.pack("<4sHI", MAGIC, 1, 0))
        assert list(out.names()) == []

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.text(st.characters(whitelist_categories=("Ll",), max_codepoint=0x7F), min_size=1, max_size=12),
                st.lists(st.integers(1, 5), min_size=1, max_size=3),
            ),
            min_size=1,
            max_size=6,
            unique_by=lambda t: t[0],
        ),
        st.integers(0, 2**31),
    )
    def test_round_trip_property(self, named_shapes, seed):
        w = _mw([(n, tuple(s)) for n, s in named_shapes], seed=seed)
        out = deserialize_weights(serialize_weights(w))
        assert out.bit_equal(w)


class TestFraming:
    def test_round_trip(self):
        buf = io.BytesIO()
        write_frame(buf, MSG_HEARTBEAT, b"payload")
        buf.seek(0)
        assert read_frame(buf) == (MSG_HEARTBEAT, b"payload")

    def test_length_prefix_covers_type_byte(self):
        buf = io.BytesIO()
        write_frame(buf, 3, b"ab")
        raw = buf.getvalue()
        assert struct.unpack("<I", raw[:4])[0] == 3  # type byte + 2 body bytes
        assert raw[4] == 3

    def test_eof_is_disconnect(self):
        with pytest.raises(Disconnected):
            read_frame(io.BytesIO(b""))

    def test_partial_header_is_disconnect(self):
        with pytest.raises(Disconnected):
            read_frame(io.BytesIO(b"\x05\x00"))

    def test_partial_body_is_disconnect(self):
        buf = io.BytesIO()
        write_frame(buf, 1, b"full body here")
        with pytest.raises(Disconnected):
            read_frame(io.BytesIO(buf.getvalue()[:-3]))

    def test_zero_length_rejected(self):
        with pytest.raises(ProtocolError):
            read_frame(io.BytesIO(struct.pack("<I", 0)))

    def test_oversized_frame_rejected_before_allocation(self):
        with pytest.raises(ProtocolError, match="frame"):
            read_frame(io.BytesIO(struct.pack("<I", MAX_FRAME + 1)))


def _messages():
    w = _mw([("a", (2, 3)), ("b", (3,))])
    return [
        Join(client_id="client_00", n_k=120),
        RoundStart(t=3, epochs=2, lr=0.001, batch_size=16, deadline_ms=5000, weights=w),
        Update(
            client_id="client_01", t=3, n_k=120,
            train_loss=1.25, train_acc=43.75, val_loss=1.5, val_acc=40.0, weights=w,
        ),
        RoundResult(
            t=3, n_received=2, mean_train_acc=50.0, mean_val_acc=45.0,
            mean_train_loss=1.1, mean_val_loss=1.3, weights=w,
        ),
        RoundResult(
            t=4, n_received=2, mean_train_acc=51.0, mean_val_acc=46.0,
            mean_train_loss=1.0, mean_val_loss=1.2, weights=w,
            global_acc=44.0, global_loss=1.4,
        ),
        Heartbeat(),
        Error(code=ERR_FEDERATION_COMPLETE, text="done"),
    ]


class TestMessages:
    @pytest.mark.parametrize("msg", _messages(), ids=lambda m: type(m).__name__)
    def test_encode_decode_round_trip(self, msg):
        msg_type, body = encode_message(msg)
        out = decode_message(msg_type, body)
        assert type(out) is type(msg)
        for field in vars(msg):
            a, b = getattr(msg, field), getattr(out, field)
            if isinstance(a, ModelWeights):
                assert b.bit_equal(a)
            elif isinstance(a, float):
                assert b == pytest.approx(a)
            else:
                assert b == a

    def test_optional_global_metrics(self):
        plain, with_global = _messages()[3], _messages()[4]
        out = decode_message(*encode_message(plain))
        assert out.global_acc is None and out.global_loss is None
        out = decode_message(*encode_message(with_global))
        assert out.global_acc == pytest.approx(44.0)

    def test_unknown_type_rejected(self):
        with pytest.raises(ProtocolError, match="type"):
            decode_message(200, b"")

    def test_short_body_rejected(self):
        msg_type, body = encode_message(Join("c", 5))
        with pytest.raises(ProtocolError):
            decode_message(msg_type, body[:2])

    def test_join_rejects_non_utf8_id(self):
        body = struct.pack("<H", 2) + b"\xff\xfe" + struct.pack("<I", 1)
        with pytest.raises(ProtocolError):
            decode_message(MSG_JOIN, body)

    def test_stream_round_trip(self):
        buf = io.BytesIO()
        for msg in _messages():
            send_message(buf, msg)
        buf.seek(0)
        for msg in _messages():
            out = recv_message(buf)
            assert type(out) is type(msg)
        with pytest.raises(Disconnected):
            recv_message(buf)
