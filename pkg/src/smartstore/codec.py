"""Document value model and its canonical binary encoding.

A document is built from plain Python values:

    None, bool, int (signed 64-bit), float (finite), str,
    Timestamp, Reference, list/tuple, dict with str keys

The encoding is a tagged, big-endian format whose Map entries are sorted by
the UTF-8 bytes of their keys, so two structurally equal documents always
produce the same bytes. ``content_hash`` is SHA-256 over those bytes.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from typing import Any, Union

TAG_NULL = 0x00
TAG_FALSE = 0x01
TAG_TRUE = 0x02
TAG_INTEGER = 0x03
TAG_FLOAT = 0x04
TAG_TEXT = 0x05
TAG_ARRAY = 0x06
TAG_MAP = 0x07
TAG_TIMESTAMP = 0x08
TAG_REFERENCE = 0x09

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1
UINT32_MAX = 2**32 - 1

DIGEST_SIZE = 32

_U32 = struct.Struct(">I")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")

_EPOCH = _dt.datetime(1970, 1, 1, tzinfo=_dt.timezone.utc)


class CodecError(ValueError):
    """Base class for encoding and decoding failures."""


class NonFiniteFloat(CodecError):
    pass


class DuplicateKey(CodecError):
    pass


class CycleDetected(CodecError):
    pass


class IntegerOutOfRange(CodecError):
    pass


class UnsupportedValue(CodecError, TypeError):
    pass


class Truncated(CodecError):
    pass


class UnknownTag(CodecError):
    pass


class NonCanonicalOrdering(CodecError):
    pass


class NonCanonicalValue(CodecError):
    """Bytes that no encoder output could contain (e.g. a negative zero)."""


class TrailingBytes(CodecError):
    pass


@dataclass(frozen=True, order=True)
class Timestamp:
    """UTC instant with microsecond resolution."""

    micros: int

    def __post_init__(self):
        if isinstance(self.micros, bool) or not isinstance(self.micros, int):
            raise TypeError(f"Timestamp micros must be int, got {type(self.micros).__name__}")
        if not INT64_MIN <= self.micros <= INT64_MAX:
            raise IntegerOutOfRange(f"timestamp {self.micros} does not fit in 64 bits")

    @classmethod
    def from_datetime(cls, value: _dt.datetime | _dt.date) -> Timestamp:
        if not isinstance(value, _dt.datetime):
            value = _dt.datetime(value.year, value.month, value.day, tzinfo=_dt.timezone.utc)
        elif value.tzinfo is None:
            value = value.replace(tzinfo=_dt.timezone.utc)
        delta = value - _EPOCH
        return cls((delta.days * 86_400 + delta.seconds) * 1_000_000 + delta.microseconds)

    def to_datetime(self) -> _dt.datetime:
        return _EPOCH + _dt.timedelta(microseconds=self.micros)

    def isoformat(self) -> str:
        return self.to_datetime().isoformat().replace("+00:00", "Z")

    def __str__(self) -> str:
        return self.isoformat()


@dataclass(frozen=True, order=True)
class Reference:
    """Pointer to one stored version, held as its rendered versioned ID."""

    target: str

    def __post_init__(self):
        if not isinstance(self.target, str):
            raise TypeError("Reference target must be text")

    def __str__(self) -> str:
        return self.target


Document = Union[None, bool, int, float, str, Timestamp, Reference, list, tuple, dict]


def from_pairs(pairs: Iterable[tuple[str, Any]]) -> dict:
    """Build a Map from successive key/value pairs, rejecting repeated keys."""
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateKey(f"duplicate map key {key!r}")
        out[key] = value
    return out


def _key_bytes(key: Any) -> bytes:
    if not isinstance(key, str):
        raise UnsupportedValue(f"map keys must be text, got {type(key).__name__}")
    try:
        return key.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise UnsupportedValue(f"map key {key!r} is not valid Unicode") from exc


def _encode_text(out: bytearray, raw: bytes) -> None:
    if len(raw) > UINT32_MAX:
        raise UnsupportedValue("text longer than 4 GiB")
    out.append(TAG_TEXT)
    out += _U32.pack(len(raw))
    out += raw


def _encode(value: Any, out: bytearray, path: set[int]) -> None:
    # bool before int: bool is an int subclass
    if value is None:
        out.append(TAG_NULL)
    elif value is True:
        out.append(TAG_TRUE)
    elif value is False:
        out.append(TAG_FALSE)
    elif isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise IntegerOutOfRange(f"integer {value} does not fit in 64 bits")
        out.append(TAG_INTEGER)
        out += _I64.pack(value)
    elif isinstance(value, float):
        if not math.isfinite(value):
            raise NonFiniteFloat(f"cannot encode {value!r}")
        out.append(TAG_FLOAT)
        out += _F64.pack(value + 0.0)  # -0.0 + 0.0 == +0.0
    elif isinstance(value, str):
        try:
            raw = value.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise UnsupportedValue(f"text {value!r} is not valid Unicode") from exc
        _encode_text(out, raw)
    elif isinstance(value, Timestamp):
        out.append(TAG_TIMESTAMP)
        out += _I64.pack(value.micros)
    elif isinstance(value, Reference):
        out.append(TAG_REFERENCE)
        _encode_text(out, value.target.encode("utf-8"))
    elif isinstance(value, (list, tuple)):
        marker = id(value)
        if marker in path:
            raise CycleDetected("document contains itself")
        path.add(marker)
        out.append(TAG_ARRAY)
        out += _U32.pack(len(value))
        for item in value:
            _encode(item, out, path)
        path.discard(marker)
    elif isinstance(value, Mapping):
        marker = id(value)
        if marker in path:
            raise CycleDetected("document contains itself")
        path.add(marker)
        entries = sorted(((_key_bytes(k), v) for k, v in value.items()), key=lambda kv: kv[0])
        for (a, _), (b, _) in zip(entries, entries[1:]):
            if a == b:
                raise DuplicateKey(f"duplicate map key {a.decode('utf-8')!r}")
        out.append(TAG_MAP)
        out += _U32.pack(len(entries))
        for raw_key, item in entries:
            _encode_text(out, raw_key)
            _encode(item, out, path)
        path.discard(marker)
    else:
        raise UnsupportedValue(f"cannot encode value of type {type(value).__name__}")


def encode_canonical(doc: Any) -> bytes:
    out = bytearray()
    _encode(doc, out, set())
    return bytes(out)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        raw = bytes(self.take(self.u32()))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError(f"invalid UTF-8 ending at offset {self.pos}") from exc

    def tagged_text(self) -> tuple[str, bytes]:
        start = self.pos
        tag = self.take(1)[0]
        if tag != TAG_TEXT:
            raise UnknownTag(f"expected text tag at offset {start}, found 0x{tag:02x}")
        length = self.u32()
        raw = bytes(self.take(length))
        try:
            return raw.decode("utf-8"), raw
        except UnicodeDecodeError as exc:
            raise CodecError(f"invalid UTF-8 at offset {start}") from exc


def _decode(r: _Reader) -> Any:
    start = r.pos
    tag = r.take(1)[0]
    if tag == TAG_NULL:
        return None
    if tag == TAG_FALSE:
        return False
    if tag == TAG_TRUE:
        return True
    if tag == TAG_INTEGER:
        return _I64.unpack(r.take(8))[0]
    if tag == TAG_FLOAT:
        value = _F64.unpack(r.take(8))[0]
        if not math.isfinite(value):
            raise NonFiniteFloat(f"non-finite float at offset {start}")
        if value == 0.0 and math.copysign(1.0, value) < 0:
            raise NonCanonicalValue(f"negative zero at offset {start}")
        return value
    if tag == TAG_TEXT:
        return r.text()
    if tag == TAG_TIMESTAMP:
        return Timestamp(_I64.unpack(r.take(8))[0])
    if tag == TAG_REFERENCE:
        return Reference(r.tagged_text()[0])
    if tag == TAG_ARRAY:
        count = r.u32()
        return [_decode(r) for _ in range(count)]
    if tag == TAG_MAP:
        count = r.u32()
        out: dict = {}
        prev: bytes | None = None
        for _ in range(count):
            key_at = r.pos
            key, raw = r.tagged_text()
            if prev is not None:
                if raw == prev:
                    raise DuplicateKey(f"duplicate map key {key!r} at offset {key_at}")
                if raw < prev:
                    raise NonCanonicalOrdering(f"map key {key!r} out of order at offset {key_at}")
            prev = raw
            out[key] = _decode(r)
        return out
    raise UnknownTag(f"unknown tag 0x{tag:02x} at offset {start}")


def decode(data: bytes) -> Any:
    r = _Reader(data)
    doc = _decode(r)
    if r.pos != len(r.buf):
        raise TrailingBytes(f"{len(r.buf) - r.pos} bytes after document end")
    return doc


def content_hash(doc: Any) -> bytes:
    """SHA-256 of the canonical encoding; always 32 bytes."""
    return hashlib.sha256(encode_canonical(doc)).digest()


def verify_bits(doc: Any, claimed: bytes) -> bool:
    try:
        return content_hash(doc) == bytes(claimed)
    except (CodecError, TypeError):
        return False


def strict_equal(a: Any, b: Any) -> bool:
    """Structural equality that keeps 1, 1.0 and True apart."""
    if type(a) is not type(b):
        if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
            pass
        elif isinstance(a, Mapping) and isinstance(b, Mapping):
            pass
        else:
            return False
    if isinstance(a, float):
        return a == b  # -0.0 and 0.0 encode identically
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(strict_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, Mapping):
        return a.keys() == b.keys() and all(strict_equal(a[k], b[k]) for k in a)
    return a == b


def references_in(doc: Any) -> list[Reference]:
    """Every Reference reachable from ``doc``, in encounter order."""
    found: list[Reference] = []
    stack = [doc]
    while stack:
        item = stack.pop()
        if isinstance(item, Reference):
            found.append(item)
        elif isinstance(item, (list, tuple)):
            stack.extend(reversed(item))
        elif isinstance(item, Mapping):
            stack.extend(item[k] for k in sorted(item, reverse=True))
    return found


def to_debug(doc: Any) -> Any:
    """JSON-compatible rendering for humans. Never hashed."""
    if isinstance(doc, Timestamp):
        return {"$timestamp": doc.isoformat()}
    if isinstance(doc, Reference):
        return {"$ref": doc.target}
    if isinstance(doc, (list, tuple)):
        return [to_debug(x) for x in doc]
    if isinstance(doc, Mapping):
        return {k: to_debug(v) for k, v in doc.items()}
    return doc


def debug_text(doc: Any, indent: int | None = 2) -> str:
    return json.dumps(to_debug(doc), indent=indent, sort_keys=True, ensure_ascii=False)
