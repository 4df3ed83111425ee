"""Length-prefixed JSON framing shared by the socket transport.

Every message is a 4-byte big-endian length followed by a UTF-8 JSON
object. Requests carry ``{request_id, op, args}``; responses mirror with
``{request_id, status, result | error}``. A binary block payload travels as
a second raw frame immediately after the JSON one, its size declared in the
JSON as ``data_len`` and its MD5 hex digest as ``data_md5``. Bloom filter
payloads embedded in heartbeat messages are base64-encoded 20-byte strings.
"""

import base64
import hashlib
import json
import struct
from dataclasses import dataclass

from .bloom import PropertyBloomFilter
from .errors import IntegrityError

_LEN = struct.Struct(">I")
MAX_JSON_FRAME = 16 * 1024 * 1024
MAX_DATA_FRAME = 256 * 1024 * 1024


@dataclass
class Message:
    header: dict
    payload: bytes | None = None


def encode_message(header: dict, payload: bytes | None = None) -> bytes:
    header = dict(header)
    if payload is not None:
        header["data_len"] = len(payload)
        header["data_md5"] = hashlib.md5(payload).hexdigest()
    body = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    out = _LEN.pack(len(body)) + body
    if payload is not None:
        out += payload
    return out


def read_exactly(stream, n: int) -> bytes:
    """Read n bytes from a socket-like or file-like object."""
    chunks = []
    remaining = n
    recv = getattr(stream, "recv", None)
    while remaining > 0:
        chunk = recv(remaining) if recv is not None else stream.read(remaining)
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(stream) -> Message:
    (size,) = _LEN.unpack(read_exactly(stream, 4))
    if size > MAX_JSON_FRAME:
        raise IntegrityError(f"JSON frame of {size} bytes exceeds limit")
    header = json.loads(read_exactly(stream, size).decode("utf-8"))
    payload = None
    data_len = header.get("data_len")
    if data_len is not None:
        if not 0 <= data_len <= MAX_DATA_FRAME:
            raise IntegrityError(f"declared payload of {data_len} bytes out of range")
        payload = read_exactly(stream, data_len)
        digest = hashlib.md5(payload).hexdigest()
        if digest != header.get("data_md5"):
            raise IntegrityError("payload digest does not match frame header")
    return Message(header, payload)


def encode_filters(filters: dict[str, PropertyBloomFilter]) -> dict[str, str]:
    return {
        name: base64.b64encode(f.to_bytes()).decode("ascii")
        for name, f in sorted(filters.items())
    }


def decode_filters(encoded: dict[str, str]) -> dict[str, PropertyBloomFilter]:
    return {
        name: PropertyBloomFilter.from_bytes(name, base64.b64decode(b64))
        for name, b64 in encoded.items()
    }


def encoded_size(header: dict, payload: bytes | None = None) -> int:
    """Wire size of a message, for transfer accounting."""
    return len(encode_message(header, payload))
