"""Rewrite the golden files from the current implementation.

Only run this after a deliberate format change; the tests also check the
goldens against byte layouts assembled by hand, so a regenerated file that
drifts from the documented layout still fails.

    python3 tests/golden/regenerate.py
"""

import hashlib
import shutil
from pathlib import Path

from pipecache.caching import IndexerCache
from pipecache.frame import INTEGER, REAL, REAL_LIST, TEXT, Frame
from pipecache.retrieval import build_index, index_files
from pipecache.storage import KvLog, encode_frame

HERE = Path(__file__).parent

GOLDEN_FRAME = Frame.from_rows(
    [("qid", TEXT), ("score", REAL), ("rank", INTEGER), ("features", REAL_LIST)],
    [("q1", 1.5, 0, (0.25, -2.0)), ("é", -0.0, -1, ())],
)
TINY_CORPUS = Frame.from_rows(
    [("docno", TEXT), ("text", TEXT)], [("d1", "a b"), ("d2", "a a"), ("d3", "c")]
)
INDEXER_ROWS = [
    {"docno": "d2", "text": "second"},
    {"docno": "d1", "text": "first"},
    {"docno": "d3", "text": ""},
]
KV_WRITES = [(b"alpha", b"one"), (b"beta", b"two"), (b"alpha", b"three")]


def main() -> None:
    (HERE / "frame.bin").write_bytes(encode_frame(GOLDEN_FRAME))

    kv = HERE / "kvlog"
    shutil.rmtree(kv, ignore_errors=True)
    with KvLog(kv) as log:
        for key, value in KV_WRITES:
            log.put(hashlib.sha256(key).digest(), value)
    (kv / "LOCK").unlink()

    idx = HERE / "index"
    shutil.rmtree(idx, ignore_errors=True)
    idx.mkdir()
    for name, data in index_files(build_index(TINY_CORPUS)).items():
        (idx / name).write_bytes(data)

    ix = HERE / "indexer"
    shutil.rmtree(ix, ignore_errors=True)
    IndexerCache(ix).index(INDEXER_ROWS)


if __name__ == "__main__":
    main()
