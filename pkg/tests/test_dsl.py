import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipecache.dsl import DslRenderError, DslSyntaxError, parse, to_text, tokenize
from pipecache.pipeline import (
    Concat,
    FeatureUnion,
    Identity,
    Leaf,
    LinearCombine,
    RankCutoff,
    ScalarProduct,
    SetIntersect,
    SetUnion,
    Then,
    struct_eq,
)

from trees import random_tree


def leaf_factory(kind):
    return lambda **params: Leaf(kind, params)


REG = {k: leaf_factory(k) for k in ("a", "b", "c", "d", "bm25", "mono", "duo")}
a, b, c = Leaf("a"), Leaf("b"), Leaf("c")


def P(text):
    return parse(text, REG)


def test_demo_pipeline():
    t = P("bm25 % 20 >> mono % 10 >> duo")
    bm25, mono, duo = Leaf("bm25"), Leaf("mono"), Leaf("duo")
    assert struct_eq(t, Then(bm25, RankCutoff(20), mono, RankCutoff(10), duo))
    assert struct_eq(t, bm25 % 20 >> mono % 10 >> duo)


def test_precedence_examples():
    assert struct_eq(P("a + b >> c"), Then(LinearCombine(a, b), c))
    assert struct_eq(P("a >> (b + c) % 5"), Then(a, LinearCombine(b, c), RankCutoff(5)))
    assert struct_eq(P("a ^ b >> c"), Then(Concat(a, b), c))
    assert struct_eq(P("a + b ** c"), LinearCombine(a, FeatureUnion(b, c)))
    assert struct_eq(P("a | b & c"), SetIntersect(SetUnion(a, b), c))
    assert struct_eq(P("a ** b * 2"), FeatureUnion(a, ScalarProduct(b, 2.0)))
    assert struct_eq(P("a * -1.5"), ScalarProduct(a, -1.5))
    assert struct_eq(P("a + b + c"), LinearCombine(LinearCombine(a, b), c))
    assert struct_eq(P("a * 2 % 3"), Then(ScalarProduct(a, 2.0), RankCutoff(3)))


def test_leaf_arguments():
    t = P("bm25(k=20, w=0.5, name='it\\'s', big=1e3)")
    assert t == Leaf("bm25", {"k": 20, "w": 0.5, "name": "it's", "big": 1000.0})
    assert isinstance(t.params["k"], int) and isinstance(t.params["big"], float)
    assert P("bm25()") == Leaf("bm25")


def test_identity():
    assert P("identity") == Identity()
    assert to_text(Identity(), REG) == "identity"
    assert P("identity % 3") == RankCutoff(3)


@pytest.mark.parametrize(
    "text, offset, expected",
    [
        ("nope", 0, "a"),
        ("a >> (b + c", 11, ")"),
        ("a % 2.5", 4, "integer"),
        ("a * b", 4, "number"),
        ("a(k=)", 4, "number"),
        ("a(k='open)", 4, None),
        ("a >> ", 5, "name"),
        ("a b", 2, "end of input"),
        ("a $ b", 2, None),
        ("a % 0", 4, None),
    ],
)
def test_syntax_errors_are_positioned(text, offset, expected):
    with pytest.raises(DslSyntaxError) as err:
        P(text)
    assert err.value.offset == offset
    if expected is not None:
        assert expected in err.value.expected
    assert f"offset {offset}" in str(err.value)


def test_factory_errors_become_syntax_errors():
    with pytest.raises(DslSyntaxError, match="cannot build"):
        parse("x(bad=1)", {"x": lambda: Leaf("x")})


def test_tokenize_numbers():
    kinds = [(t.kind, t.value) for t in tokenize("1 2.5 -3 1e2")][:-1]
    assert kinds == [("number", 1), ("number", 2.5), ("number", -3), ("number", 100.0)]


def test_render_minimal_parentheses():
    assert to_text(P("a + b >> c"), REG) == "a + b >> c"
    assert to_text(P("a + (b + c)"), REG) == "a + (b + c)"
    assert to_text(P("(a >> b) + c"), REG) == "(a >> b) + c"
    assert to_text(P("a >> (b + c) % 5"), REG) == "a >> (b + c) % 5"
    assert to_text(P("bm25 % 20 >> mono % 10 >> duo"), REG) == "bm25 % 20 >> mono % 10 >> duo"


def test_render_errors_in_strict_mode():
    with pytest.raises(DslRenderError):
        to_text(Leaf("unregistered"), REG)
    with pytest.raises(DslRenderError):
        to_text(Leaf("a", {"obj": object()}), REG)
    with pytest.raises(DslRenderError):
        to_text(ScalarProduct(a, float("inf")), REG)
    assert "unregistered" in to_text(Leaf("unregistered"), None)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 8))
def test_round_trip(seed, depth):
    t = random_tree(random.Random(seed), depth)
    text = to_text(t, REG)
    back = parse(text, REG)
    assert struct_eq(back, t), text
    assert to_text(back, REG) == text


def test_registry_leaves_round_trip(tiny_registry, tiny_index, tmp_path):
    t = parse("bm25(num_results=5) % 2 >> mono >> duo", tiny_registry)
    assert to_text(t, tiny_registry) == "bm25(num_results=5) % 2 >> mono >> duo"
    assert parse(to_text(t, tiny_registry), tiny_registry) == t
    tiny_index.save(tmp_path / "idx")
    explicit = parse(f"bm25(index='{tmp_path / 'idx'}')", tiny_registry)
    assert parse(to_text(explicit, tiny_registry), tiny_registry) == explicit
