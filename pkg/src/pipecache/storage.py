"""Canonical binary encodings and the append-only key-value log behind every cache.

Byte layouts (all integers little-endian):

row key
    u16 column count, then per key column sorted by name: u16 name length,
    UTF-8 name, 1-byte kind tag, value.
frame
    ``PTFR1``, u16 column count, per column (u16 name length, name, kind tag),
    u32 row count, then row-major values.
log file
    ``PTCACHE1`` header, then records of ``[32-byte digest][u32 length][value]``.
    The value starts with a 1-byte codec tag (0 = raw).

Values: text is u32 length + UTF-8, real is an 8-byte IEEE-754 double,
integer is an 8-byte two's complement, real-list is u32 count + doubles.
"""

from __future__ import annotations

import fcntl
import hashlib
import os
import struct
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from .frame import INTEGER, REAL, REAL_LIST, TEXT, Frame, kind_of

KIND_TAGS = {TEXT: 0, REAL: 1, INTEGER: 2, REAL_LIST: 3}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

FRAME_MAGIC = b"PTFR1"
LOG_MAGIC = b"PTCACHE1"
LOG_FILE = "kv.log"
LOCK_FILE = "LOCK"
DIGEST_SIZE = 32
CODEC_RAW = 0

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")
_I64 = struct.Struct("<q")
_RECORD_HEADER = struct.Struct("<32sI")


class StorageError(Exception):
    pass


class DecodeError(StorageError):
    pass


class LockedError(StorageError):
    pass


def _encode_text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise StorageError(f"column name too long: {name[:40]!r}...")
    return _U16.pack(len(raw)) + raw


def encode_value(value: Any, kind: str) -> bytes:
    if kind == TEXT:
        return _encode_text(value)
    if kind == REAL:
        return _F64.pack(value)
    if kind == INTEGER:
        return _I64.pack(value)
    if kind == REAL_LIST:
        return _U32.pack(len(value)) + struct.pack(f"<{len(value)}d", *value)
    raise StorageError(f"unknown kind {kind!r}")


class RowKeyEncoder:
    """Canonical key encoder bound to a frame schema; reused across rows."""

    def __init__(self, columns: Sequence[tuple[str, str]], key_columns: Sequence[str]):
        kinds = dict(columns)
        names = [n for n, _ in columns]
        missing = [k for k in key_columns if k not in kinds]
        if missing:
            raise StorageError(f"key column(s) {missing} not in frame columns {names}")
        ordered = sorted(set(key_columns), key=lambda n: n.encode("utf-8"))
        self._parts = []
        for name in ordered:
            kind = kinds[name]
            if kind == REAL_LIST:
                raise StorageError(f"key column {name!r} is a real-list; keys must be scalar")
            header = _encode_name(name) + bytes([KIND_TAGS[kind]])
            self._parts.append((names.index(name), kind, header))
        self._prefix = _U16.pack(len(ordered))

    def encode(self, row: Sequence[Any]) -> bytes:
        out = [self._prefix]
        for i, kind, header in self._parts:
            out.append(header)
            out.append(encode_value(row[i], kind))
        return b"".join(out)

    def digest(self, row: Sequence[Any]) -> bytes:
        return key_digest(self.encode(row))


def canonical_encode_row(
    key_columns: Sequence[str],
    row: Mapping[str, Any],
    kinds: Mapping[str, str] | None = None,
) -> bytes:
    """Encode the key projection of ``row``; independent of key column order."""
    missing = [k for k in key_columns if k not in row]
    if missing:
        raise StorageError(f"row lacks key column(s) {missing}")
    names = sorted(set(key_columns), key=lambda n: n.encode("utf-8"))
    columns = [(n, (kinds or {}).get(n) or kind_of(row[n])) for n in names]
    return RowKeyEncoder(columns, names).encode([row[n] for n in names])


def key_digest(encoded: bytes) -> bytes:
    return hashlib.sha256(encoded).digest()


# frames -------------------------------------------------------------------


def encode_frame(frame: Frame) -> bytes:
    out = [FRAME_MAGIC, _U16.pack(len(frame.columns))]
    for name, kind in frame.columns:
        out.append(_encode_name(name))
        out.append(bytes([KIND_TAGS[kind]]))
    out.append(_U32.pack(len(frame.rows)))
    kinds = [k for _, k in frame.columns]
    for row in frame.rows:
        for value, kind in zip(row, kinds):
            out.append(encode_value(value, kind))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError(f"truncated input at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> Any:
        return fmt.unpack(self.take(fmt.size))[0]

    def text(self, length_fmt: struct.Struct = _U32) -> str:
        raw = self.take(self.unpack(length_fmt))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(f"invalid UTF-8: {e}") from None

    def value(self, kind: str) -> Any:
        if kind == TEXT:
            return self.text()
        if kind == REAL:
            return self.unpack(_F64)
        if kind == INTEGER:
            return self.unpack(_I64)
        n = self.unpack(_U32)
        return struct.unpack(f"<{n}d", self.take(8 * n))


def decode_frame(data: bytes) -> Frame:
    r = _Reader(data)
    if r.take(len(FRAME_MAGIC)) != FRAME_MAGIC:
        raise DecodeError("bad frame magic")
    columns = []
    for _ in range(r.unpack(_U16)):
        name = r.text(_U16)
        tag = r.take(1)[0]
        if tag not in TAG_KINDS:
            raise DecodeError(f"unknown kind tag {tag}")
        columns.append((name, TAG_KINDS[tag]))
    kinds = [k for _, k in columns]
    rows = tuple(
        tuple(r.value(k) for k in kinds) for _ in range(r.unpack(_U32))
    )
    if r.pos != len(data):
        raise DecodeError(f"{len(data) - r.pos} trailing bytes after frame")
    return Frame(tuple(columns), rows)


# key-value log --------------------------------------------------------------


class KvLog:
    """Append-only digest -> bytes store in a directory.

    The in-memory index is rebuilt by scanning the log on open; later
    records win. A torn trailing record is ignored (and cut off when the
    log is opened for writing).
    """

    def __init__(self, path: str | Path, readonly: bool = False):
        self.path = Path(path)
        self.readonly = readonly
        self._index: dict[bytes, tuple[int, int]] = {}
        self._lock_fd: int | None = None
        self._fh = None
        if readonly:
            if not (self.path / LOG_FILE).exists():
                raise StorageError(f"no key-value log in {self.path}")
        else:
            self.path.mkdir(parents=True, exist_ok=True)
            self._acquire_lock()
        log = self.path / LOG_FILE
        try:
            if not log.exists():
                log.write_bytes(LOG_MAGIC)
            self._fh = open(log, "rb" if readonly else "r+b")
            self._end = self._scan()
            if not readonly:
                self._fh.truncate(self._end)
        except BaseException:
            self.close()
            raise

    def _acquire_lock(self) -> None:
        fd = os.open(self.path / LOCK_FILE, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise LockedError(f"{self.path} is already open for writing") from None
        self._lock_fd = fd

    def _scan(self) -> int:
        fh = self._fh
        fh.seek(0)
        if fh.read(len(LOG_MAGIC)) != LOG_MAGIC:
            raise StorageError(f"{self.path / LOG_FILE}: header mismatch")
        size = os.fstat(fh.fileno()).st_size
        pos = len(LOG_MAGIC)
        while pos + _RECORD_HEADER.size <= size:
            digest, length = _RECORD_HEADER.unpack(fh.read(_RECORD_HEADER.size))
            start = pos + _RECORD_HEADER.size
            if start + length > size:
                break
            self._index[digest] = (start, length)
            pos = start + length
            fh.seek(pos)
        return pos

    @property
    def closed(self) -> bool:
        return self._fh is None

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._index

    def keys(self) -> Iterator[bytes]:
        return iter(list(self._index))

    def get(self, digest: bytes) -> bytes | None:
        loc = self._index.get(digest)
        if loc is None:
            return None
        self._require_open()
        start, length = loc
        self._fh.seek(start)
        raw = self._fh.read(length)
        if len(raw) != length or not raw:
            raise StorageError("log record shorter than indexed")
        if raw[0] != CODEC_RAW:
            raise StorageError(f"unknown value codec {raw[0]}")
        return raw[1:]

    def put(self, digest: bytes, value: bytes) -> None:
        self._require_open()
        if self.readonly:
            raise StorageError(f"{self.path} is open read-only")
        if len(digest) != DIGEST_SIZE:
            raise StorageError(f"digest must be {DIGEST_SIZE} bytes, got {len(digest)}")
        payload = bytes([CODEC_RAW]) + value
        self._fh.seek(self._end)
        self._fh.write(_RECORD_HEADER.pack(digest, len(payload)))
        self._fh.write(payload)
        start = self._end + _RECORD_HEADER.size
        self._index[digest] = (start, len(payload))
        self._end = start + len(payload)

    def flush(self) -> None:
        if self._fh is not None and not self.readonly:
            self._fh.flush()

    def _require_open(self) -> None:
        if self._fh is None:
            raise StorageError(f"{self.path} is closed")

    def close(self) -> None:
        if self._fh is not None:
            self.flush()
            self._fh.close()
            self._fh = None
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self) -> KvLog:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self.close()
        except Exception:
            pass


def kv_open(path: str | Path, readonly: bool = False) -> KvLog:
    return KvLog(path, readonly=readonly)


def kv_get(log: KvLog, digest: bytes) -> bytes | None:
    return log.get(digest)


def kv_put(log: KvLog, digest: bytes, value: bytes) -> None:
    log.put(digest, value)


def is_locked(path: str | Path) -> bool:
    """True if some KvLog currently holds the write lock on ``path``."""
    lock = Path(path) / LOCK_FILE
    if not lock.exists():
        return False
    fd = os.open(lock, os.O_RDWR)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        return True
    else:
        fcntl.flock(fd, fcntl.LOCK_UN)
        return False
    finally:
        os.close(fd)
