"""Binary wire format for weight exchange between clients and combiner.

Weight blobs: magic "FBW1", version u16, tensor count u32, then per
tensor a u16-length utf-8 name, ndim u8, dims as u32, and the payload as
little-endian float32. Everything on the wire is float32 regardless of
the dtype used in memory.

Frames: u32 little-endian length, one type byte, body. The length covers
the type byte plus the body and is capped at 512 MiB so a corrupt header
cannot trigger a huge allocation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import Disconnected, FormatError, ProtocolError, TruncationError
from .tensor import Tensor
from .weights import ModelWeights

MAGIC = b"FBW1"
BLOB_VERSION = 1
MAX_FRAME = 512 * 1024 * 1024

MSG_JOIN = 1
MSG_ROUND_START = 2
MSG_UPDATE = 3
MSG_ROUND_RESULT = 4
MSG_HEARTBEAT = 5
MSG_ERROR = 6

ERR_FEDERATION_COMPLETE = 0
ERR_GENERIC = 1
ERR_BAD_MESSAGE = 2
ERR_BUSY = 3


# -- weight blobs -------------------------------------------------------------


def serialize_weights(weights: ModelWeights) -> bytes:
    chunks = [struct.pack("<4sHI", MAGIC, BLOB_VERSION, len(weights))]
    for name in weights.names():
        arr = np.ascontiguousarray(weights[name].data, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long ({len(encoded)} bytes)")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} has too many dimensions")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _need(buf: bytes, offset: int, count: int, what: str) -> None:
    if offset + count > len(buf):
        raise TruncationError(
            f"blob ends inside {what}: need {count} bytes at offset {offset}, "
            f"have {len(buf) - offset}",
            offset=offset,
        )


def deserialize_weights(buf: bytes) -> ModelWeights:
    _need(buf, 0, 10, "header")
    magic, version, count = struct.unpack_from("<4sHI", buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != BLOB_VERSION:
        raise FormatError(f"unsupported blob version {version}")
    offset = 10
    items = []
    seen = set()
    for index in range(count):
        _need(buf, offset, 2, f"tensor {index} name length")
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        _need(buf, offset, name_len, f"tensor {index} name")
        try:
            name = buf[offset : offset + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor {index} name is not valid utf-8") from exc
        offset += name_len
        if not name:
            raise FormatError(f"tensor {index} has an empty name")
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        _need(buf, offset, 1, f"{name!r} ndim")
        ndim = buf[offset]
        offset += 1
        if ndim == 0:
            raise FormatError(f"{name!r} has ndim 0")
        _need(buf, offset, 4 * ndim, f"{name!r} dims")
        dims = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        if any(d == 0 for d in dims):
            raise FormatError(f"{name!r} has a zero dimension {dims}")
        n_scalars = 1
        for d in dims:
            n_scalars *= d
        n_bytes = 4 * n_scalars
        _need(buf, offset, n_bytes, f"{name!r} payload")
        flat = np.frombuffer(buf, dtype="<f4", count=n_scalars, offset=offset)
        offset += n_bytes
        # copy out of the blob: fresh allocations keep BLAS deterministic
        # regardless of how tensors were aligned inside the byte stream
        arr = np.array(flat.reshape(dims), dtype=np.float32, order="C")
        arr.flags.writeable = False
        items.append((name, Tensor._wrap(arr, name=name)))
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last tensor")
    return ModelWeights(items)


# -- framing ------------------------------------------------------------------


def write_frame(fh, msg_type: int, body: bytes) -> None:
    if not 0 <= msg_type <= 0xFF:
        raise ProtocolError(f"message type {msg_type} out of range")
    length = 1 + len(body)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds {MAX_FRAME} cap")
    fh.write(struct.pack("<IB", length, msg_type))
    fh.write(body)
    fh.flush()


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if data is None or len(data) < count:
        raise Disconnected("connection closed mid-frame")
    return data


def read_frame(fh) -> tuple[int, bytes]:
    head = fh.read(4)
    if not head:
        raise Disconnected("connection closed")
    if len(head) < 4:
        raise Disconnected("connection closed inside frame header")
    (length,) = struct.unpack("<I", head)
    if length < 1:
        raise ProtocolError("zero-length frame")
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds {MAX_FRAME} cap")
    payload = _read_exact(fh, length)
    return payload[0], payload[1:]


# -- message bodies -----------------------------------------------------------


def _pack_str(text: str) -> bytes:
    encoded = text.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise ProtocolError("string field too long")
    return struct.pack("<H", len(encoded)) + encoded


def _unpack_str(body: bytes, offset: int) -> tuple[str, int]:
    if offset + 2 > len(body):
        raise ProtocolError("body ends inside string length")
    (length,) = struct.unpack_from("<H", body, offset)
    offset += 2
    if offset + length > len(body):
        raise ProtocolError("body ends inside string payload")
    return body[offset : offset + length].decode("utf-8"), offset + length


@dataclass
class Join:
    client_id: str
    n_k: int


@dataclass
class RoundStart:
    t: int
    epochs: int
    lr: float
    batch_size: int
    deadline_ms: int
    weights: ModelWeights


@dataclass
class Update:
    client_id: str
    t: int
    n_k: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    weights: ModelWeights


@dataclass
class RoundResult:
    t: int
    n_received: int
    mean_train_acc: float
    mean_val_acc: float
    mean_train_loss: float
    mean_val_loss: float
    weights: ModelWeights
    global_acc: Optional[float] = None
    global_loss: Optional[float] = None


@dataclass
class Heartbeat:
    pass


@dataclass
class Error:
    code: int
    text: str = ""


def encode_message(msg) -> tuple[int, bytes]:
    if isinstance(msg, Join):
        return MSG_JOIN, _pack_str(msg.client_id) + struct.pack("<I", msg.n_k)
    if isinstance(msg, RoundStart):
        head = struct.pack("<IHdII", msg.t, msg.epochs, msg.lr, msg.batch_size, msg.deadline_ms)
        return MSG_ROUND_START, head + serialize_weights(msg.weights)
    if isinstance(msg, Update):
        head = _pack_str(msg.client_id) + struct.pack(
            "<IIdddd", msg.t, msg.n_k,
            msg.train_loss, msg.train_acc, msg.val_loss, msg.val_acc,
        )
        return MSG_UPDATE, head + serialize_weights(msg.weights)
    if isinstance(msg, RoundResult):
        has_global = msg.global_acc is not None and msg.global_loss is not None
        head = struct.pack(
            "<IIddddB", msg.t, msg.n_received,
            msg.mean_train_acc, msg.mean_val_acc,
            msg.mean_train_loss, msg.mean_val_loss,
            1 if has_global else 0,
        )
        if has_global:
            head += struct.pack("<dd", msg.global_acc, msg.global_loss)
        return MSG_ROUND_RESULT, head + serialize_weights(msg.weights)
    if isinstance(msg, Heartbeat):
        return MSG_HEARTBEAT, b""
    if isinstance(msg, Error):
        return MSG_ERROR, struct.pack("<H", msg.code) + _pack_str(msg.text)
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def decode_message(msg_type: int, body: bytes):
    try:
        if msg_type == MSG_JOIN:
            client_id, offset = _unpack_str(body, 0)
            (n_k,) = struct.unpack_from("<I", body, offset)
            return Join(client_id, n_k)
        if msg_type == MSG_ROUND_START:
            t, epochs, lr, batch, deadline = struct.unpack_from("<IHdII", body, 0)
            return RoundStart(t, epochs, lr, batch, deadline,
                              deserialize_weights(body[struct.calcsize("<IHdII"):]))
        if msg_type == MSG_UPDATE:
            client_id, offset = _unpack_str(body, 0)
            fmt = "<IIdddd"
            t, n_k, tl, ta, vl, va = struct.unpack_from(fmt, body, offset)
            blob = body[offset + struct.calcsize(fmt):]
            return Update(client_id, t, n_k, tl, ta, vl, va, deserialize_weights(blob))
        if msg_type == MSG_ROUND_RESULT:
            fmt = "<IIddddB"
            t, n_received, mta, mva, mtl, mvl, has_global = struct.unpack_from(fmt, body, 0)
            offset = struct.calcsize(fmt)
            global_acc = global_loss = None
            if has_global:
                global_acc, global_loss = struct.unpack_from("<dd", body, offset)
                offset += struct.calcsize("<dd")
            return RoundResult(t, n_received, mta, mva, mtl, mvl,
                               deserialize_weights(body[offset:]), global_acc, global_loss)
        if msg_type == MSG_HEARTBEAT:
            if body:
                raise ProtocolError("heartbeat carries a body")
            return Heartbeat()
        if msg_type == MSG_ERROR:
            (code,) = struct.unpack_from("<H", body, 0)
            text, _ = _unpack_str(body, 2)
            return Error(code, text)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed body for message type {msg_type}: {exc}") from exc
    raise ProtocolError(f"unknown message type {msg_type}")


def send_message(fh, msg) -> None:
    msg_type, body = encode_message(msg)
    write_frame(fh, msg_type, body)


def recv_message(fh):
    msg_type, body = read_frame(fh)
    return decode_message(msg_type, body)
