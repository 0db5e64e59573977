"""Daemon wire format.

frame   := length(u32 LE, covers opcode and payload) opcode(1 byte) payload
payload := field*            field := length(u64 LE) bytes

Responses reuse the framing with a status byte in place of the opcode:
OK carries the result fields, ERROR carries (kind, message, log).
"""

from __future__ import annotations

import enum
import struct

from .errors import ProtocolError

PROTOCOL_VERSION = "1"
MAX_FRAME = 64 * 1024 * 1024


class Op(enum.IntEnum):
    HELLO = 0x01
    PING = 0x02
    ADD_CONTENT = 0x03
    REALIZE = 0x04
    QUERY_VALID = 0x05
    QUERY_REFS = 0x06
    CLOSURE = 0x07
    ADD_ROOT = 0x08
    GC = 0x09
    EXPORT = 0x0A
    IMPORT = 0x0B


class Status(enum.IntEnum):
    OK = 0
    ERROR = 1


def flag(value: bool) -> str:
    return "1" if value else "0"


def encode_fields(*fields) -> bytes:
    out = []
    for f in fields:
        b = f.encode("utf-8") if isinstance(f, str) else bytes(f)
        out.append(struct.pack("<Q", len(b)) + b)
    return b"".join(out)


def decode_fields(payload: bytes) -> list[bytes]:
    fields, pos = [], 0
    while pos < len(payload):
        if pos + 8 > len(payload):
            raise ProtocolError("truncated field length")
        (n,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        if pos + n > len(payload):
            raise ProtocolError("truncated field")
        fields.append(payload[pos:pos + n])
        pos += n
    return fields


def encode_frame(code: int, *fields) -> bytes:
    body = bytes([int(code)]) + encode_fields(*fields)
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds the {MAX_FRAME}-byte limit")
    return struct.pack("<I", len(body)) + body


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if data is None or len(data) != n:
        raise ProtocolError("connection closed mid-frame")
    return data


def read_frame(f) -> tuple[int, bytes] | None:
    """Next (code, payload) from a binary file object; None on clean end of stream."""
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise ProtocolError("connection closed mid-frame")
    (length,) = struct.unpack("<I", head)
    if length == 0:
        raise ProtocolError("empty frame")
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME}-byte limit")
    body = _read_exact(f, length)
    return body[0], body[1:]
