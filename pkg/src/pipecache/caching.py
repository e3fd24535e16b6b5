"""Explicit, persistent caches that wrap transformers.

``KeyValueCache``
    row-wise: key columns -> value columns, output row order = input order.
``ScorerCache`` / ``DenseScorerCache``
    (query, docno) -> score, followed by rank reassignment.
``RetrieverCache``
    one input row -> a whole result frame.
``IndexerCache``
    a terminal that records a stream of rows in order and doubles as a
    docno-addressed forward index.

Every cache directory carries a ``meta`` file (UTF-8 ``key=value`` lines).
Omitting the path gives a temporary cache that is removed on ``close()``,
on leaving a ``with`` block, or when the object is garbage collected.
"""

from __future__ import annotations

import math
import os
import shutil
import struct
import tarfile
import tempfile
import threading
import warnings
import weakref
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .frame import INTEGER, REAL, TEXT, Frame, assign_ranks, concat_rows
from .pipeline import Transformer
from .storage import (
    LOCK_FILE,
    LOG_FILE,
    KvLog,
    RowKeyEncoder,
    decode_frame,
    encode_frame,
    is_locked,
)

META_FILE = "meta"
META_VERSION = "1"


class CacheError(Exception):
    pass


class CacheMissError(CacheError, KeyError):
    """A key was not cached and there is no transformer to compute it."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


def _columns(spec: str | Sequence[str] | None) -> list[str] | None:
    if spec is None:
        return None
    return [spec] if isinstance(spec, str) else list(spec)


def read_meta(path: str | Path) -> dict[str, str]:
    meta = Path(path) / META_FILE
    if not meta.exists():
        raise CacheError(f"{path} is not a cache directory (no {META_FILE} file)")
    out = {}
    for line in meta.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise CacheError(f"malformed line in {meta}: {line!r}")
        out[k] = v
    if out.get("version") != META_VERSION or "kind" not in out:
        raise CacheError(f"unsupported cache meta in {path}: {out}")
    return out


def _write_meta(path: Path, fields: Mapping[str, str]) -> None:
    for k, v in fields.items():
        if "\n" in v or "=" in k:
            raise CacheError(f"meta field {k!r} cannot be stored")
    text = "".join(f"{k}={v}\n" for k, v in fields.items())
    (path / META_FILE).write_text(text, encoding="utf-8")


def _join(cols: Sequence[str]) -> str:
    for c in cols:
        if "," in c:
            raise CacheError(f"column name {c!r} contains a comma")
    return ",".join(cols)


def _split(text: str) -> list[str]:
    return text.split(",") if text else []


def _remove_tree(path: str) -> None:
    try:
        shutil.rmtree(path)
    except FileNotFoundError:
        pass
    except OSError as e:
        warnings.warn(f"could not remove temporary cache {path}: {e}", RuntimeWarning)


class _Cache(Transformer):
    """Directory lifecycle, meta checks and temporary mode shared by all caches."""

    kind = ""

    def __init__(
        self,
        path: str | Path | None,
        inner: Transformer | None,
        label: str | None,
        readonly: bool,
    ):
        self.inner = inner
        self.readonly = readonly
        self.temporary = path is None
        if path is None:
            path = tempfile.mkdtemp(prefix=f"pipecache-{self.kind}-")
            self._finalizer = weakref.finalize(self, _remove_tree, str(path))
        self.path = Path(path)
        self.label = label

    def _open_meta(
        self, fields: dict[str, str | None], defaults: Mapping[str, str] = {}
    ) -> dict[str, str]:
        """Check ``fields`` against an existing meta file, or write a new one.

        ``None`` fields are not checked; on creation they take ``defaults``.
        """
        if (self.path / META_FILE).exists():
            stored = read_meta(self.path)
            if stored["kind"] != self.kind:
                raise CacheError(f"{self.path} holds a {stored['kind']} cache, not {self.kind}")
            for k, v in fields.items():
                if v is not None and stored.get(k, "") != v:
                    raise CacheError(
                        f"{self.path}: {k} mismatch (stored {stored.get(k)!r}, given {v!r})"
                    )
            return stored
        if self.readonly:
            raise CacheError(f"{self.path} is not a cache directory")
        self.path.mkdir(parents=True, exist_ok=True)
        meta = {"version": META_VERSION, "kind": self.kind}
        meta.update({k: v if v is not None else defaults.get(k, "") for k, v in fields.items()})
        _write_meta(self.path, meta)
        return meta

    def _compute(self, frame: Frame, what: Callable[[], str]) -> Frame:
        if self.inner is None:
            raise CacheMissError(f"cache miss for {what()} and no transformer to compute it")
        return self.inner.transform(frame)

    @property
    def closed(self) -> bool:
        return True

    def close(self) -> None:
        if self.temporary:
            self._finalizer()

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class _LogCache(_Cache):
    def __init__(self, path, inner, label, readonly):
        super().__init__(path, inner, label, readonly)
        self._log: KvLog | None = None

    def _open_log(self) -> None:
        self._log = KvLog(self.path, readonly=self.readonly)

    @property
    def log(self) -> KvLog:
        if self._log is None or self._log.closed:
            raise CacheError(f"cache at {self.path} is closed")
        return self._log

    @property
    def closed(self) -> bool:
        return self._log is None or self._log.closed

    def __len__(self) -> int:
        return len(self.log)

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
        super().close()


def _describe_key(encoder_cols: Sequence[str], frame: Frame, i: int) -> str:
    row = frame.rows[i]
    return "{" + ", ".join(f"{c}={row[frame.index(c)]!r}" for c in encoder_cols) + "}"


class KeyValueCache(_LogCache):
    """Maps key columns to value columns, one row at a time."""

    kind = "keyvalue"

    def __init__(
        self,
        path: str | Path | None = None,
        inner: Transformer | None = None,
        key: str | Sequence[str] | None = None,
        value: str | Sequence[str] | None = None,
        *,
        label: str | None = None,
        readonly: bool = False,
    ):
        super().__init__(path, inner, label, readonly)
        key_cols, value_cols = _columns(key), _columns(value)
        meta = self._open_meta(
            {
                "key": _join(key_cols) if key_cols else None,
                "value": _join(value_cols) if value_cols else None,
                "label": label,
            },
            {"key": "text"},
        )
        self.key = _split(meta["key"])
        self.value = _split(meta["value"])
        if not self.value:
            raise CacheError("KeyValueCache needs at least one value column")
        self._value_kinds = _split(meta.get("value_kinds", ""))
        self._open_log()

    def _remember_kinds(self, kinds: list[str]) -> None:
        if self._value_kinds:
            if kinds != self._value_kinds:
                raise CacheError(f"value kinds changed from {self._value_kinds} to {kinds}")
            return
        self._value_kinds = kinds
        if not self.readonly:
            meta = read_meta(self.path)
            meta["value_kinds"] = _join(kinds)
            _write_meta(self.path, meta)

    def transform(self, frame: Frame) -> Frame:
        frame.require(*self.key)
        log = self.log
        enc = RowKeyEncoder(frame.columns, self.key)
        digests = [enc.digest(row) for row in frame.rows]
        values: list[tuple | None] = [None] * len(frame)
        missing = []
        for i, d in enumerate(digests):
            raw = log.get(d)
            if raw is None:
                missing.append(i)
            else:
                stored = decode_frame(raw)
                self._remember_kinds([k for _, k in stored.columns])
                values[i] = stored.rows[0]
        if missing:
            sub = frame.take(missing)
            out = self._compute(sub, lambda: _describe_key(self.key, frame, missing[0]))
            if len(out) != len(sub):
                raise CacheError(
                    f"inner transformer returned {len(out)} rows for {len(sub)}; "
                    "KeyValueCache needs a row-wise transformer"
                )
            out.require(*self.value)
            picked = out.select(self.value)
            self._remember_kinds([k for _, k in picked.columns])
            for pos, i in enumerate(missing):
                row = picked.rows[pos]
                values[i] = row
                if not self.readonly:
                    log.put(digests[i], encode_frame(Frame(picked.columns, (row,))))
            log.flush()
        result = frame
        if not self._value_kinds:
            return result
        for j, (name, kind) in enumerate(zip(self.value, self._value_kinds)):
            result = result.with_column(name, kind, [v[j] for v in values])
        return result


_F64 = struct.Struct("<d")


class ScorerCache(_LogCache):
    """Caches a pointwise scorer's ``score`` per key, then re-ranks."""

    kind = "scorer"

    def __init__(
        self,
        path: str | Path | None = None,
        inner: Transformer | None = None,
        key: str | Sequence[str] | None = None,
        value: str = "score",
        *,
        label: str | None = None,
        readonly: bool = False,
    ):
        super().__init__(path, inner, label, readonly)
        key_cols = _columns(key)
        meta = self._open_meta(
            {"key": _join(key_cols) if key_cols else None, "value": value, "label": label},
            {"key": "query,docno"},
        )
        self.key = _split(meta["key"])
        self.value = meta["value"]
        self._open_log()

    def transform(self, frame: Frame) -> Frame:
        frame.require("qid", "docno", *self.key)
        log = self.log
        enc = RowKeyEncoder(frame.columns, self.key)
        digests = [enc.digest(row) for row in frame.rows]
        scores: list[float | None] = [None] * len(frame)
        missing = []
        for i, d in enumerate(digests):
            raw = log.get(d)
            if raw is None:
                missing.append(i)
            else:
                scores[i] = _F64.unpack(raw)[0]
        if missing:
            out = self._compute(
                frame.take(missing), lambda: _describe_key(self.key, frame, missing[0])
            )
            out.require(self.value, *self.key)
            out_enc = RowKeyEncoder(out.columns, self.key)
            vi = out.index(self.value)
            computed = {out_enc.digest(row): row[vi] for row in out.rows}
            for i in missing:
                try:
                    s = computed[digests[i]]
                except KeyError:
                    raise CacheError(
                        f"scorer output lacks a row for {_describe_key(self.key, frame, i)}"
                    ) from None
                scores[i] = s
                if not self.readonly:
                    log.put(digests[i], _F64.pack(s))
            log.flush()
        return assign_ranks(frame.with_column(self.value, REAL, scores))


class DenseScorerCache(_Cache):
    """Scorer cache with one fixed-width score array per query.

    Each query's scores live in ``<hex digest>.f64``: ``len(docnos)``
    little-endian doubles addressed by document ordinal, NaN meaning
    "not scored yet".
    """

    kind = "dense_scorer"

    def __init__(
        self,
        path: str | Path | None = None,
        inner: Transformer | None = None,
        docnos: Sequence[str] | None = None,
        key: str | Sequence[str] | None = None,
        *,
        label: str | None = None,
        readonly: bool = False,
    ):
        super().__init__(path, inner, label, readonly)
        key_cols = _columns(key)
        fresh = not (self.path / META_FILE).exists()
        if fresh and docnos is None:
            raise CacheError("a new DenseScorerCache needs the corpus docnos")
        meta = self._open_meta(
            {"key": _join(key_cols) if key_cols else None, "label": label}, {"key": "query"}
        )
        self.key = _split(meta["key"])
        if fresh:
            (self.path / "docnos").write_text("".join(d + "\n" for d in docnos), encoding="utf-8")
        stored = (self.path / "docnos").read_text(encoding="utf-8").split("\n")[:-1]
        if docnos is not None and list(docnos) != stored:
            raise CacheError(f"{self.path}: docnos differ from the stored corpus snapshot")
        self.docnos = stored
        self._ordinal = {d: i for i, d in enumerate(stored)}
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        self._closed = True
        super().close()

    def _file(self, digest: bytes) -> Path:
        return self.path / f"{digest.hex()}.f64"

    def _load(self, digest: bytes) -> np.ndarray:
        f = self._file(digest)
        if f.exists():
            arr = np.fromfile(f, dtype="<f8")
            if len(arr) != len(self.docnos):
                raise CacheError(f"{f} has {len(arr)} entries, expected {len(self.docnos)}")
            return arr
        return np.full(len(self.docnos), np.nan, dtype="<f8")

    def __len__(self) -> int:
        return sum(
            int(np.count_nonzero(~np.isnan(np.fromfile(f, dtype="<f8"))))
            for f in self.path.glob("*.f64")
        )

    def transform(self, frame: Frame) -> Frame:
        if self._closed:
            raise CacheError(f"cache at {self.path} is closed")
        frame.require("qid", "docno", *self.key)
        enc = RowKeyEncoder(frame.columns, self.key)
        di = frame.index("docno")
        ordinals = []
        for row in frame.rows:
            o = self._ordinal.get(row[di])
            if o is None:
                raise CacheError(f"docno {row[di]!r} is not in the dense cache's corpus")
            ordinals.append(o)
        digests = [enc.digest(row) for row in frame.rows]
        arrays: dict[bytes, np.ndarray] = {}
        scores: list[float | None] = [None] * len(frame)
        missing = []
        for i, (d, o) in enumerate(zip(digests, ordinals)):
            if d not in arrays:
                arrays[d] = self._load(d)
            s = arrays[d][o]
            if math.isnan(s):
                missing.append(i)
            else:
                scores[i] = float(s)
        if missing:
            out = self._compute(
                frame.take(missing), lambda: _describe_key(self.key, frame, missing[0])
            )
            out.require("score", "docno", *self.key)
            out_enc = RowKeyEncoder(out.columns, self.key)
            odi, osi = out.index("docno"), out.index("score")
            computed = {(out_enc.digest(r), r[odi]): r[osi] for r in out.rows}
            dirty = set()
            for i in missing:
                try:
                    s = computed[(digests[i], frame.rows[i][di])]
                except KeyError:
                    raise CacheError(
                        f"scorer output lacks a row for {_describe_key(self.key, frame, i)}"
                    ) from None
                if math.isnan(s):
                    raise CacheError("scorer produced NaN, which the dense cache cannot store")
                scores[i] = s
                arrays[digests[i]][ordinals[i]] = s
                dirty.add(digests[i])
            if not self.readonly:
                for d in sorted(dirty):
                    arrays[d].tofile(self._file(d))
        return assign_ranks(frame.with_column("score", REAL, scores))


_RESULT_TAIL = (("docno", TEXT), ("score", REAL), ("rank", INTEGER))


class RetrieverCache(_LogCache):
    """Caches the whole result frame produced for each input row."""

    kind = "retriever"

    def __init__(
        self,
        path: str | Path | None = None,
        inner: Transformer | None = None,
        key: str | Sequence[str] | None = None,
        *,
        label: str | None = None,
        readonly: bool = False,
    ):
        super().__init__(path, inner, label, readonly)
        key_cols = _columns(key)
        meta = self._open_meta({"key": _join(key_cols) if key_cols else None, "label": label})
        # empty key means "every input column", decided per call
        self.key = _split(meta["key"])
        self._open_log()

    def transform(self, frame: Frame) -> Frame:
        key = self.key or sorted(frame.names, key=lambda n: n.encode("utf-8"))
        frame.require(*key)
        if not frame.rows:
            return Frame.empty(
                [c for c in frame.columns if c[0] not in ("docno", "score", "rank")]
                + list(_RESULT_TAIL)
            )
        log = self.log
        enc = RowKeyEncoder(frame.columns, key)
        parts = []
        wrote = False
        for i, row in enumerate(frame.rows):
            d = enc.digest(row)
            raw = log.get(d)
            if raw is not None:
                parts.append(decode_frame(raw))
                continue
            out = self._compute(frame.take([i]), lambda: _describe_key(key, frame, i))
            parts.append(out)
            if not self.readonly:
                log.put(d, encode_frame(out))
                wrote = True
        if wrote:
            log.flush()
        result = parts[0]
        for p in parts[1:]:
            result = concat_rows(result, p)
        return result


class IndexerCache(_Cache):
    """Records a stream of rows in arrival order.

    Use as the last stage of an indexing pipeline (``producer >> cache``)
    and later iterate it to feed any number of downstream indexers without
    re-running the producer. With a ``docno`` column it is also a forward
    index via :meth:`lookup`.
    """

    kind = "indexer"
    _LEN = struct.Struct("<I")

    def __init__(self, path: str | Path | None = None, *, label: str | None = None):
        super().__init__(path, None, label, readonly=False)
        self._open_meta({"label": label})
        self._offsets: list[int] | None = None
        self._docnos: dict[str, int] | None = None

    @property
    def built(self) -> bool:
        return (self.path / "records").exists()

    def transform(self, frame: Frame) -> Frame:
        raise TypeError("IndexerCache is a terminal stage; call .index() instead")

    def index(self, rows: Frame | Iterable[Mapping[str, Any]]) -> int:
        if self.built:
            raise CacheError(f"{self.path} already holds an indexed stream")
        records = (self.path / "records").with_suffix(".partial")
        count = 0
        docnos: list[str] | None = None
        with open(records, "wb") as fh:
            for row in _row_frames(rows):
                if count == 0 and "docno" in row:
                    docnos = []
                if docnos is not None:
                    if "docno" not in row:
                        raise CacheError("docno column appeared in only some records")
                    docno = row.rows[0][row.index("docno")]
                    if "\n" in docno:
                        raise CacheError(f"docno {docno!r} contains a newline")
                    docnos.append(docno)
                data = encode_frame(row)
                fh.write(self._LEN.pack(len(data)))
                fh.write(data)
                count += 1
        if docnos is not None:
            (self.path / "docnos").write_text("".join(d + "\n" for d in docnos), encoding="utf-8")
        os.replace(records, self.path / "records")
        return count

    def _frames(self) -> Iterator[Frame]:
        if not self.built:
            raise CacheError(f"{self.path} has not been indexed yet")
        with open(self.path / "records", "rb") as fh:
            while True:
                head = fh.read(4)
                if not head:
                    return
                if len(head) < 4:
                    raise CacheError("truncated records file")
                (n,) = self._LEN.unpack(head)
                data = fh.read(n)
                if len(data) < n:
                    raise CacheError("truncated records file")
                yield decode_frame(data)

    def __iter__(self) -> Iterator[dict[str, Any]]:
        for f in self._frames():
            yield f.records()[0]

    def __len__(self) -> int:
        return len(self._record_offsets())

    def to_frame(self) -> Frame:
        frames = list(self._frames())
        if not frames:
            raise CacheError("no records to build a frame from")
        out = frames[0]
        for f in frames[1:]:
            out = concat_rows(out, f)
        return out

    def _record_offsets(self) -> list[int]:
        if self._offsets is None:
            offsets = []
            with open(self.path / "records", "rb") as fh:
                pos = 0
                while head := fh.read(4):
                    (n,) = self._LEN.unpack(head)
                    offsets.append(pos)
                    pos += 4 + n
                    fh.seek(pos)
            self._offsets = offsets
        return self._offsets

    def lookup(self, docnos: Iterable[str]) -> list[dict[str, Any]]:
        if self._docnos is None:
            sidecar = self.path / "docnos"
            if not sidecar.exists():
                raise CacheError(f"{self.path} has no docno sidecar")
            names = sidecar.read_text(encoding="utf-8").split("\n")[:-1]
            self._docnos = {d: i for i, d in enumerate(names)}
        offsets = self._record_offsets()
        out = []
        with open(self.path / "records", "rb") as fh:
            for docno in docnos:
                i = self._docnos.get(docno)
                if i is None:
                    raise KeyError(f"docno {docno!r} is not in the indexer cache")
                fh.seek(offsets[i])
                (n,) = self._LEN.unpack(fh.read(4))
                out.append(decode_frame(fh.read(n)).records()[0])
        return out


def _row_frames(rows: Frame | Iterable[Mapping[str, Any]]) -> Iterator[Frame]:
    if isinstance(rows, Frame):
        for row in rows.rows:
            yield Frame(rows.columns, (row,))
    else:
        for rec in rows:
            yield Frame.from_records([rec])


class Lazy(Transformer):
    """Builds the wrapped transformer on first use, exactly once."""

    def __init__(self, factory: Callable[[], Transformer]):
        self.factory = factory
        self._instance: Transformer | None = None
        self._lock = threading.Lock()

    @property
    def constructed(self) -> bool:
        return self._instance is not None

    def get(self) -> Transformer:
        if self._instance is None:
            with self._lock:
                if self._instance is None:
                    self._instance = self.factory()
        return self._instance

    def transform(self, frame: Frame) -> Frame:
        return self.get().transform(frame)


# sharing ------------------------------------------------------------------------

CACHE_KINDS: dict[str, type[_Cache]] = {
    cls.kind: cls
    for cls in (KeyValueCache, ScorerCache, DenseScorerCache, RetrieverCache, IndexerCache)
}


def open_cache(
    path: str | Path, inner: Transformer | None = None, readonly: bool = False
) -> _Cache:
    """Open an existing cache directory of any kind."""
    kind = read_meta(path)["kind"]
    cls = CACHE_KINDS.get(kind)
    if cls is None:
        raise CacheError(f"unknown cache kind {kind!r} in {path}")
    if cls is IndexerCache:
        return IndexerCache(path)
    return cls(path, inner, readonly=readonly)


def _cache_files(path: Path) -> list[Path]:
    return sorted(
        (p for p in path.rglob("*") if p.is_file() and p.name != LOCK_FILE),
        key=lambda p: p.relative_to(path).as_posix(),
    )


def pack(cache: _Cache | str | Path, archive_path: str | Path) -> Path:
    """Write the cache directory to a single reproducible ustar archive."""
    if isinstance(cache, _Cache):
        if not cache.closed:
            raise CacheError("close the cache before packing it")
        path = cache.path
    else:
        path = Path(cache)
    read_meta(path)
    if is_locked(path):
        raise CacheError(f"{path} is open for writing")
    archive_path = Path(archive_path)
    with tarfile.open(archive_path, "w", format=tarfile.USTAR_FORMAT) as tar:
        for f in _cache_files(path):
            info = tarfile.TarInfo(f.relative_to(path).as_posix())
            info.size = f.stat().st_size
            info.mode = 0o644
            info.mtime = 0
            with open(f, "rb") as fh:
                tar.addfile(info, fh)
    return archive_path


def unpack(archive_path: str | Path, dest: str | Path, inner: Transformer | None = None) -> _Cache:
    dest = Path(dest)
    if dest.exists() and any(dest.iterdir()):
        raise CacheError(f"{dest} is not empty")
    try:
        with tarfile.open(archive_path, "r:") as tar:
            members = tar.getmembers()
            for m in members:
                name = Path(m.name)
                if not m.isfile() or name.is_absolute() or ".." in name.parts:
                    raise CacheError(f"refusing archive member {m.name!r}")
            dest.mkdir(parents=True, exist_ok=True)
            for m in members:
                target = dest / m.name
                target.parent.mkdir(parents=True, exist_ok=True)
                src = tar.extractfile(m)
                target.write_bytes(src.read())
    except (tarfile.TarError, EOFError, OSError) as e:
        raise CacheError(f"cannot unpack {archive_path}: {e}") from None
    return open_cache(dest, inner)


def cache_stats(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    kind = read_meta(path)["kind"]
    size = sum(f.stat().st_size for f in _cache_files(path))
    if kind in ("keyvalue", "scorer", "retriever"):
        if (path / LOG_FILE).exists():
            with KvLog(path, readonly=True) as log:
                entries = len(log)
        else:
            entries = 0
    elif kind == "dense_scorer":
        entries = sum(
            int(np.count_nonzero(~np.isnan(np.fromfile(f, dtype="<f8"))))
            for f in path.glob("*.f64")
        )
    else:
        cache = IndexerCache(path)
        entries = len(cache) if cache.built else 0
    return {"kind": kind, "entries": entries, "bytes": size}


def clear_cache(path: str | Path) -> None:
    """Delete every stored entry, keeping the cache's identity files."""
    path = Path(path)
    read_meta(path)
    if is_locked(path):
        raise CacheError(f"{path} is open for writing")
    keep = {META_FILE, LOCK_FILE}
    if read_meta(path)["kind"] == "dense_scorer":
        keep.add("docnos")
    for child in path.iterdir():
        if child.name in keep:
            continue
        if child.is_dir():
            shutil.rmtree(child)
        else:
            child.unlink()
