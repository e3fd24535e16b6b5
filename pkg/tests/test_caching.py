import hashlib
import tarfile
import threading
import warnings
from pathlib import Path

import pytest

from pipecache.caching import (
    CacheError,
    CacheMissError,
    DenseScorerCache,
    IndexerCache,
    KeyValueCache,
    Lazy,
    RetrieverCache,
    ScorerCache,
    cache_stats,
    clear_cache,
    open_cache,
    pack,
    read_meta,
    unpack,
)
from pipecache.frame import REAL, TEXT, Frame
from pipecache.retrieval import (
    BM25,
    Counted,
    OverlapScorer,
    SynonymRewrite,
    SyntheticCorpusSpec,
    build_index,
    synth_corpus,
)
from pipecache.storage import decode_frame

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def small():
    data = synth_corpus(SyntheticCorpusSpec(num_docs=200, vocab_size=30, num_queries=8))
    return data, build_index(data.corpus)


def topics(*queries):
    return Frame.from_rows(
        [("qid", TEXT), ("query", TEXT)], [(f"q{i}", q) for i, q in enumerate(queries)]
    )


def tree_digest(path):
    h = hashlib.sha256()
    for f in sorted(p for p in Path(path).rglob("*") if p.is_file() and p.name != "LOCK"):
        h.update(f.relative_to(path).as_posix().encode() + b"\0" + f.read_bytes())
    return h.hexdigest()


# key-value cache -----------------------------------------------------------------


def test_keyvalue_cold_warm_partial(tmp_path):
    inner = Counted(SynonymRewrite())
    q = topics("a b", "c", "d e")
    with KeyValueCache(tmp_path / "kv", inner, key="query", value="query") as cache:
        assert cache(q) == SynonymRewrite()(q)
        assert inner.invocations == 1 and inner.rows_in == 3
        assert len(cache) == 3
        assert cache(q) == SynonymRewrite()(q)
        assert inner.invocations == 1
        more = topics("a b", "c", "new")
        assert cache(more) == SynonymRewrite()(more)
        assert inner.invocations == 2 and inner.rows_in == 4


def test_keyvalue_output_order_follows_input(tmp_path):
    inner = SynonymRewrite()
    with KeyValueCache(None, inner, key="query", value="query") as cache:
        cache(topics("x", "y"))
        q = topics("y", "z", "x", "y")
        assert cache(q) == inner(q)


def test_miss_without_inner_names_the_key(tmp_path):
    with KeyValueCache(tmp_path / "kv", SynonymRewrite(), key="query", value="query") as c:
        c(topics("a"))
    with KeyValueCache(tmp_path / "kv") as cache:
        assert cache(topics("a")).column("query")[0] == "a a"
        with pytest.raises(CacheMissError, match="zzz"):
            cache(topics("zzz"))


def test_meta_records_configuration_and_label(tmp_path):
    KeyValueCache(tmp_path / "kv", key="query", value="query", label="rewrite-v1").close()
    meta = read_meta(tmp_path / "kv")
    assert meta["kind"] == "keyvalue" and meta["key"] == "query" and meta["label"] == "rewrite-v1"
    with pytest.raises(CacheError, match="label"):
        KeyValueCache(tmp_path / "kv", label="rewrite-v2")
    with pytest.raises(CacheError, match="key"):
        KeyValueCache(tmp_path / "kv", key="qid")
    with pytest.raises(CacheError, match="keyvalue"):
        ScorerCache(tmp_path / "kv")


# scorer caches ---------------------------------------------------------------------


def test_scorer_cache_second_run_computes_nothing(small):
    data, index = small
    mono = Counted(OverlapScorer(index))
    bm25 = BM25(index, 20)
    with ScorerCache(None, mono) as cache:
        first = (bm25 >> cache)(data.topics)
        assert first == (bm25 >> OverlapScorer(index))(data.topics)
        computed = mono.rows_in
        assert computed == len(first)
        assert (bm25 >> cache)(data.topics) == first
        assert mono.rows_in == computed


def test_scorer_cache_computes_only_unseen_pairs(small):
    data, index = small
    mono = Counted(OverlapScorer(index))
    with ScorerCache(None, mono) as cache:
        (BM25(index, 5) >> cache)(data.topics)
        mono.reset()
        deeper = (BM25(index, 12) >> cache)(data.topics)
        shallow = BM25(index, 5)(data.topics)
        assert mono.rows_in == len(deeper) - len(shallow)


def test_scorer_cache_reassigns_ranks():
    class Fixed(OverlapScorer):
        def transform(self, frame):
            return frame.with_column("score", REAL, [0.2, 0.9])

    f = Frame.from_rows(
        [("qid", TEXT), ("query", TEXT), ("docno", TEXT)], [("q", "x", "a"), ("q", "x", "b")]
    )
    with ScorerCache(None, Fixed()) as cache:
        out = cache(f)
    assert {r["docno"]: r["rank"] for r in out.records()} == {"a": 1, "b": 0}


def test_dense_matches_sparse(small):
    data, index = small
    bm25 = BM25(index, 10)
    res = bm25(data.topics)
    m1, m2 = Counted(OverlapScorer(index)), Counted(OverlapScorer(index))
    with ScorerCache(None, m1) as sparse, DenseScorerCache(None, m2, index.docnos) as dense:
        assert sparse(res) == dense(res)
        deeper = BM25(index, 15)(data.topics)
        assert sparse(deeper) == dense(deeper)
        assert (m1.invocations, m1.rows_in) == (m2.invocations, m2.rows_in)


def test_dense_layout_and_errors(tmp_path, small):
    data, index = small
    res = BM25(index, 3)(data.topics.take([0]))
    with DenseScorerCache(tmp_path / "d", OverlapScorer(index), index.docnos) as dense:
        dense(res)
        bad = res.with_column("docno", TEXT, ["nope"] * len(res))
        with pytest.raises(CacheError, match="nope"):
            dense(bad)
    files = list((tmp_path / "d").glob("*.f64"))
    assert len(files) == 1
    assert files[0].stat().st_size == 8 * index.num_docs
    assert (tmp_path / "d" / "docnos").read_text().split("\n")[:-1] == index.docnos
    assert cache_stats(tmp_path / "d")["entries"] == len(res)

    class NanScorer(OverlapScorer):
        def transform(self, frame):
            return frame.with_column("score", REAL, [float("nan")] * len(frame))

    with DenseScorerCache(None, NanScorer(index), index.docnos) as dense:
        with pytest.raises(CacheError, match="NaN"):
            dense(res)
    with pytest.raises(CacheError):
        DenseScorerCache(tmp_path / "fresh")


# retriever cache --------------------------------------------------------------------


def test_retriever_cache(tmp_path, small):
    _, index = small
    inner = Counted(BM25(index, 5))
    q = Frame.from_rows(
        [("qid", TEXT), ("query", TEXT)], [("q0", "w1 w2"), ("q1", "w3"), ("q0", "w1 w2")]
    )
    with RetrieverCache(tmp_path / "r", inner) as cache:
        assert cache(q) == BM25(index, 5)(q)
        assert inner.invocations == 2  # the repeated row hits the entry just written
        cache(q)
        assert inner.invocations == 2
        changed = Frame.from_rows([("qid", TEXT), ("query", TEXT)], [("q0", "w4")])
        cache(changed)
        assert inner.invocations == 3
        before = len(cache)
        empty = cache(q.with_rows([]))
        assert len(empty) == 0 and empty.columns == BM25(index, 5)(q.with_rows([])).columns
        assert len(cache) == before


# indexer cache -----------------------------------------------------------------------


def test_indexer_cache_golden_layout():
    import struct

    from pipecache.storage import encode_frame

    expected = b""
    for rec in [("d2", "second"), ("d1", "first"), ("d3", "")]:
        data = encode_frame(Frame.from_rows([("docno", TEXT), ("text", TEXT)], [rec]))
        expected += struct.pack("<I", len(data)) + data
    assert (GOLDEN / "indexer" / "records").read_bytes() == expected
    assert (GOLDEN / "indexer" / "docnos").read_bytes() == b"d2\nd1\nd3\n"
    cache = IndexerCache(GOLDEN / "indexer")
    assert [r["docno"] for r in cache] == ["d2", "d1", "d3"]
    assert cache.lookup(["d3", "d2"]) == [
        {"docno": "d3", "text": ""},
        {"docno": "d2", "text": "second"},
    ]


def test_indexer_cache_stream(tmp_path):
    rows = [{"docno": f"d{i}", "text": f"t{i}"} for i in range(100)]
    cache = IndexerCache(tmp_path / "ix")
    assert cache.index(iter(rows)) == 100
    assert list(cache) == rows
    assert len(cache) == 100
    with pytest.raises(CacheError):
        cache.index(rows)
    with pytest.raises(KeyError):
        cache.lookup(["missing"])
    empty = IndexerCache(tmp_path / "empty")
    assert empty.index([]) == 0
    assert list(empty) == []


def test_indexer_cache_as_terminal_stage(tmp_path):
    counted = Counted(SynonymRewrite())
    cache = IndexerCache(tmp_path / "ix")
    docs = [{"qid": str(i), "query": f"w{i} x"} for i in range(5)]
    assert (counted >> cache).index(docs) == 5
    assert counted.invocations == 1
    assert [r["query"] for r in cache] == [f"w{i} x w{i}" for i in range(5)]
    with pytest.raises(TypeError):
        cache(Frame.empty([("qid", TEXT)]))


# lazy and temporary ------------------------------------------------------------------


def test_lazy():
    calls = []

    def factory():
        calls.append(1)
        return SynonymRewrite()

    lazy = Lazy(factory)
    assert calls == []
    q = topics("a b")
    for _ in range(3):
        assert lazy(q) == SynonymRewrite()(q)
    assert calls == [1]


def test_lazy_retries_failures_and_builds_once_under_threads():
    attempts = []

    def broken():
        attempts.append(1)
        raise RuntimeError("no model")

    lazy = Lazy(broken)
    for _ in range(2):
        with pytest.raises(RuntimeError):
            lazy(topics("a"))
    assert len(attempts) == 2

    built = []
    barrier = threading.Barrier(8)

    def slow():
        built.append(1)
        return SynonymRewrite()

    shared = Lazy(slow)

    def hit():
        barrier.wait()
        shared(topics("a"))

    threads = [threading.Thread(target=hit) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert built == [1]


def test_temporary_caches():
    with ScorerCache() as a, ScorerCache() as b:
        assert a.path != b.path and a.path.exists() and b.temporary
        path = a.path
    assert not path.exists()


def test_temporary_cache_hits_like_a_persistent_one(tmp_path, small):
    data, index = small
    res = BM25(index, 5)(data.topics)
    results = []
    for path in (None, tmp_path / "p"):
        mono = Counted(OverlapScorer(index))
        with ScorerCache(path, mono) as c:
            results.append((c(res), c(res), mono.invocations))
    assert results[0] == results[1]


def test_temporary_cleanup_failure_only_warns(monkeypatch):
    import pipecache.caching as caching

    def boom(path, *a, **k):
        raise OSError("busy")

    cache = ScorerCache()
    monkeypatch.setattr(caching.shutil, "rmtree", boom)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cache.close()
    assert any("busy" in str(w.message) for w in caught)
    monkeypatch.undo()
    import shutil

    shutil.rmtree(cache.path, ignore_errors=True)


# sharing and maintenance ---------------------------------------------------------------


def test_pack_unpack_round_trip(tmp_path, small):
    data, index = small
    res = BM25(index, 5)(data.topics)
    cache = ScorerCache(tmp_path / "c", OverlapScorer(index), label="overlap")
    expected = cache(res)
    with pytest.raises(CacheError):
        pack(cache, tmp_path / "c.tar")
    cache.close()
    archive = pack(cache, tmp_path / "c.tar")
    assert pack(tmp_path / "c", tmp_path / "again.tar").read_bytes() == archive.read_bytes()
    with tarfile.open(archive) as tar:
        assert tar.getnames() == ["kv.log", "meta"]
    shared = unpack(archive, tmp_path / "u")
    assert tree_digest(tmp_path / "u") == tree_digest(tmp_path / "c")
    assert shared(res) == expected  # served from the archive without an inner scorer
    shared.close()
    assert cache_stats(tmp_path / "u") == cache_stats(tmp_path / "c")


def test_unpack_rejects_bad_archives(tmp_path):
    (tmp_path / "junk.tar").write_bytes(b"not a tar file at all" * 40)
    with pytest.raises(CacheError):
        unpack(tmp_path / "junk.tar", tmp_path / "out")
    import io

    evil = tmp_path / "evil.tar"
    with tarfile.open(evil, "w") as tar:
        info = tarfile.TarInfo("../escape")
        info.size = 1
        tar.addfile(info, io.BytesIO(b"x"))
    with pytest.raises(CacheError):
        unpack(evil, tmp_path / "out2")
    assert not (tmp_path / "escape").exists()


def test_stats_and_clear(tmp_path, small):
    data, index = small
    res = BM25(index, 5)(data.topics)
    with ScorerCache(tmp_path / "c", OverlapScorer(index)) as c:
        assert cache_stats(tmp_path / "c")["entries"] == 0
        c(res)
    stats = cache_stats(tmp_path / "c")
    assert stats["kind"] == "scorer" and stats["entries"] == len(res) and stats["bytes"] > 0
    clear_cache(tmp_path / "c")
    assert cache_stats(tmp_path / "c")["entries"] == 0
    with open_cache(tmp_path / "c", OverlapScorer(index)) as again:
        assert again(res) == OverlapScorer(index)(res)


def test_invalid_meta_is_an_error(tmp_path):
    (tmp_path / "meta").write_text("version=9\nkind=scorer\n")
    with pytest.raises(CacheError):
        cache_stats(tmp_path)
    with pytest.raises(CacheError):
        cache_stats(tmp_path / "nothing")


def test_keyvalue_values_are_single_row_frames(tmp_path):
    with KeyValueCache(tmp_path / "kv", SynonymRewrite(), key="query", value="query") as c:
        c(topics("a b"))
        (raw,) = [c.log.get(d) for d in c.log.keys()]
    f = decode_frame(raw)
    assert f.columns == (("query", TEXT),) and f.rows == (("a b a",),)
