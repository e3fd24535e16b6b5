import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipecache.experiment import ExperimentSpec, lcp, remainders, run_experiment
from pipecache.frame import INTEGER, TEXT, Frame
from pipecache.pipeline import Identity, Leaf, PipelineError, RankCutoff
from pipecache.retrieval import (
    Counted,
    SyntheticCorpusSpec,
    build_index,
    synth_corpus,
    toy_registry,
)

from trees import random_system_set

A, B, C, D, X, Y = (Leaf(n) for n in "ABCDXY")


def test_lcp_examples():
    assert lcp([A >> B, A >> C]) == [A]
    assert lcp([A, A >> B, A >> B >> C]) == [A]
    assert lcp([A >> B, X >> Y]) == []
    assert lcp([A >> B >> C, A >> B >> D]) == [A, B]
    assert lcp([A >> B]) == [A, B]
    assert lcp([(A + B) >> C, (A + B) >> D]) == [A + B]
    assert lcp([A % 5 >> B, A % 10 >> B]) == [A]


def test_lcp_needs_a_pipeline():
    with pytest.raises(ValueError):
        lcp([])


def test_remainders():
    assert remainders([A >> B], [A]) == [B]
    assert remainders([A], [A]) == [Identity()]
    assert remainders([A >> B, X], []) == [A >> B, X]
    assert remainders([A >> B >> C], [A]) == [B >> C]
    with pytest.raises(PipelineError):
        remainders([X >> B], [A])


def brute_lcp(stage_lists):
    best = []
    first = stage_lists[0]
    for n in range(len(first) + 1):
        if all(len(s) >= n and s[:n] == first[:n] for s in stage_lists):
            best = first[:n]
    return best


@given(st.lists(st.lists(st.sampled_from([A, B, C]), min_size=1, max_size=4), min_size=1, max_size=4))
def test_lcp_is_a_maximal_common_prefix(stage_lists):
    cp = lcp(stage_lists)
    assert cp == brute_lcp(stage_lists)
    for s in stage_lists:
        assert s[: len(cp)] == cp
    if all(len(s) > len(cp) for s in stage_lists):
        assert len({s[len(cp)].key() for s in stage_lists}) > 1


# running experiments ----------------------------------------------------------------


@pytest.fixture(scope="module")
def world():
    data = synth_corpus(SyntheticCorpusSpec(num_docs=300, vocab_size=40, num_queries=6))
    index = build_index(data.corpus)
    return data, index


def test_bm25_runs_once_with_precompute(world):
    data, index = world
    reg = toy_registry(index)
    bm25 = Counted(reg["bm25"]())
    systems = [bm25 % k >> reg["mono"]() % 5 >> reg["duo"]() for k in (5, 10, 20, 40)]
    off = run_experiment(systems, data.topics, data.qrels, ["nDCG@10"], precompute_prefix=False)
    assert bm25.invocations == 4
    bm25.reset()
    on = run_experiment(systems, data.topics, data.qrels, ["nDCG@10"], precompute_prefix=True)
    assert bm25.invocations == 1
    assert on.prefix.applied and on.prefix.length == 1
    assert on.fingerprint() == off.fingerprint()
    assert on.to_tsv() == off.to_tsv()


def test_single_system_skips_precompute(world):
    data, index = world
    reg = toy_registry(index)
    bm25 = Counted(reg["bm25"](num_results=10))
    result = run_experiment([bm25 >> reg["mono"]()], data.topics, data.qrels, ["AP"], precompute_prefix=True)
    assert not result.prefix.applied and "fewer than two" in result.prefix.reason
    assert bm25.invocations == 1


def test_no_common_prefix_falls_back(world):
    data, index = world
    reg = toy_registry(index)
    systems = [reg["bm25"](num_results=5), reg["bm25"](num_results=6)]
    result = run_experiment(systems, data.topics, data.qrels, ["AP"], precompute_prefix=True)
    assert not result.prefix.applied and result.prefix.length == 0


def test_topics_without_qrels_score_zero(world):
    data, index = world
    reg = toy_registry(index)
    topics = Frame.from_rows([("qid", TEXT), ("query", TEXT)], [("known", "w1 w2"), ("orphan", "w1")])
    qrels = Frame.from_rows([("qid", TEXT), ("docno", TEXT), ("label", INTEGER)], [("known", "d1", 1)])
    result = run_experiment([reg["bm25"](num_results=400)], topics, qrels, ["nDCG@10", "AP", "P@10"])
    s = result.systems[0]
    for m in result.measures:
        assert s.per_query[m]["orphan"] == 0.0
        assert s.means[m] == pytest.approx(sum(s.per_query[m].values()) / 2)


def test_empty_results_score_zero(world):
    data, index = world
    reg = toy_registry(index)
    topics = Frame.from_rows([("qid", TEXT), ("query", TEXT)], [("q0", "nothing matches")])
    result = run_experiment([reg["bm25"]()], topics, data.qrels, ["AP"])
    assert result.systems[0].means["AP"] == 0.0


def test_baseline_significance(world):
    data, index = world
    reg = toy_registry(index)
    systems = [reg["bm25"](num_results=k) for k in (3, 10, 30)]
    result = run_experiment(
        systems, data.topics, data.qrels, ["AP"], names=["k3", "k10", "k30"], baseline=0
    )
    assert result.baseline == "k3"
    base, *others = result.systems
    assert base.p_values == {}
    for s in others:
        assert 0.0 <= s.p_values["AP"] <= s.corrected["AP"] <= 1.0
    header = result.to_tsv().splitlines()[0].split("\t")
    assert header == ["name", "AP", "AP p", "AP p-corr"]


def test_spec_validation(world):
    data, _ = world
    with pytest.raises(ValueError):
        ExperimentSpec([], data.topics, data.qrels, ["AP"])
    with pytest.raises(ValueError):
        ExperimentSpec([A], data.topics, data.qrels, [])
    with pytest.raises(ValueError):
        ExperimentSpec([A, B], data.topics, data.qrels, ["AP"], names=["same", "same"])
    with pytest.raises(ValueError):
        ExperimentSpec([A], data.topics, data.qrels, ["AP"], baseline=3)


def test_topics_must_conform(world):
    data, index = world
    with pytest.raises(Exception):
        run_experiment([toy_registry(index)["bm25"]()], data.qrels, data.qrels, ["AP"])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_precompute_equivalence(world, seed):
    data, index = world
    reg = toy_registry(index)
    systems = random_system_set(random.Random(seed), reg)
    kwargs = dict(topics=data.topics, qrels=data.qrels, measures=["nDCG@10", "AP", "P@10"])
    off = run_experiment(systems, precompute_prefix=False, **kwargs)
    on = run_experiment(systems, precompute_prefix=True, **kwargs)
    assert on.fingerprint() == off.fingerprint()


def test_work_saving_counts_one_call_per_prefix(world):
    data, index = world
    reg = toy_registry(index)
    leaf = Counted(reg["bm25"](num_results=20))
    systems = [leaf >> RankCutoff(k) for k in (1, 2, 3)]
    run_experiment(systems, data.topics, data.qrels, ["AP"], precompute_prefix=True)
    assert leaf.invocations == 1
