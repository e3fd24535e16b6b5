"""Declarative retrieval pipelines with prefix precomputation and explicit caches."""

from .caching import (
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
    unpack,
)
from .dsl import DslSyntaxError, parse, to_text
from .experiment import ExperimentResult, ExperimentSpec, lcp, remainders, run, run_experiment
from .frame import Frame, FrameError, RelationKind, assign_ranks, validate
from .measures import average_precision, holm_correction, ndcg_at_k, paired_t_test, precision_at_k
from .pipeline import (
    Concat,
    FeatureUnion,
    Identity,
    Leaf,
    LinearCombine,
    PipelineError,
    RankCutoff,
    ScalarProduct,
    SetIntersect,
    SetUnion,
    Then,
    Transformer,
    apply,
    flatten,
    struct_eq,
    then,
)
from .retrieval import (
    BM25,
    InvertedIndex,
    OverlapScorer,
    PairwiseReranker,
    SyntheticCorpusSpec,
    build_index,
    synth_corpus,
    toy_registry,
    with_counter,
    with_latency,
)
from .storage import KvLog, decode_frame, encode_frame

__version__ = "0.1.0"


def cutoff(inner: Transformer, k: int) -> Transformer:
    """``inner % k``: keep the top ``k`` rows per query."""
    return inner % k


__all__ = [name for name in dir() if not name.startswith("_")]
