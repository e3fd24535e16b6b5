"""Textual pipeline expressions.

Grammar (loosest to tightest binding, all binary operators left-associative)::

    expr    := level1
    level1  := level2 (('>>' | '^') level2)*
    level2  := level3 (('+' | '|' | '&') level3)*
    level3  := postfix ('**' postfix)*
    postfix := primary ('*' NUMBER | '%' INTEGER)*
    primary := '(' expr ')' | 'identity' | NAME ['(' [arg (',' arg)*] ')']
    arg     := NAME '=' (NUMBER | STRING)

Numbers are decimal literals (a '.' or exponent makes a real); strings are
single-quoted with ``\\'`` and ``\\\\`` escapes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Callable, Mapping

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
    _Binary,
)

Registry = Mapping[str, Callable[..., Transformer]]


class DslSyntaxError(ValueError):
    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset()):
        self.message = message
        self.offset = offset
        self.expected = expected
        detail = f" (expected one of: {', '.join(sorted(expected))})" if expected else ""
        super().__init__(f"at offset {offset}: {message}{detail}")


class DslRenderError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    kind: str  # op, name, number, string, end
    text: str
    offset: int
    value: Any = None


_SPEC = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>-?\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>'(?:[^'\\]|\\.)*')
  | (?P<op>>>|\*\*|[\^+|&*%(),=])
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _SPEC.match(text, pos)
        if m is None:
            if text[pos] == "'":
                raise DslSyntaxError("unterminated string literal", pos)
            raise DslSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        chunk = m.group()
        if kind == "number":
            is_real = any(c in chunk for c in ".eE")
            tokens.append(Token("number", chunk, pos, float(chunk) if is_real else int(chunk)))
        elif kind == "string":
            body = chunk[1:-1]
            value = re.sub(r"\\(.)", _unescape_char(pos), body)
            tokens.append(Token("string", chunk, pos, value))
        elif kind != "ws":
            tokens.append(Token(kind, chunk, pos))
        pos = m.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


def _unescape_char(pos: int):
    def repl(m: re.Match) -> str:
        if m.group(1) not in ("'", "\\"):
            raise DslSyntaxError(f"unknown escape \\{m.group(1)} in string", pos + m.start())
        return m.group(1)

    return repl


_LEVEL1 = {">>": Then, "^": Concat}
_LEVEL2 = {"+": LinearCombine, "|": SetUnion, "&": SetIntersect}


class _Parser:
    def __init__(self, text: str, registry: Registry):
        self.tokens = tokenize(text)
        self.pos = 0
        self.registry = registry

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind not in ("op",):
            raise DslSyntaxError(f"found {self.tok.text or 'end of input'!r}", self.tok.offset, frozenset({text}))
        return self.advance()

    def parse(self) -> Transformer:
        t = self.level1()
        if self.tok.kind != "end":
            raise DslSyntaxError(
                f"unexpected {self.tok.text!r}",
                self.tok.offset,
                frozenset({">>", "^", "+", "|", "&", "**", "*", "%", "end of input"}),
            )
        return t

    def level1(self) -> Transformer:
        left = self.level2()
        while self.tok.kind == "op" and self.tok.text in _LEVEL1:
            op = self.advance()
            left = self._build(_LEVEL1[op.text], op, left, self.level2())
        return left

    def level2(self) -> Transformer:
        left = self.level3()
        while self.tok.kind == "op" and self.tok.text in _LEVEL2:
            op = self.advance()
            left = self._build(_LEVEL2[op.text], op, left, self.level3())
        return left

    def level3(self) -> Transformer:
        left = self.postfix()
        while self.tok.kind == "op" and self.tok.text == "**":
            op = self.advance()
            left = self._build(FeatureUnion, op, left, self.postfix())
        return left

    def _build(self, cls, op: Token, *args) -> Transformer:
        try:
            return cls(*args)
        except (PipelineError, TypeError) as e:
            raise DslSyntaxError(str(e), op.offset) from None

    def postfix(self) -> Transformer:
        t = self.primary()
        while self.tok.kind == "op" and self.tok.text in ("*", "%"):
            op = self.advance()
            num = self.tok
            if num.kind != "number":
                raise DslSyntaxError(
                    f"{op.text!r} needs a number literal", num.offset, frozenset({"number"})
                )
            self.advance()
            if op.text == "%":
                if not isinstance(num.value, int):
                    raise DslSyntaxError("rank cutoff needs an integer literal", num.offset, frozenset({"integer"}))
                if num.value < 1:
                    raise DslSyntaxError("rank cutoff must be positive", num.offset)
                t = t % num.value
            else:
                t = ScalarProduct(t, float(num.value))
        return t

    def primary(self) -> Transformer:
        tok = self.tok
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            t = self.level1()
            if self.tok.text != ")":
                raise DslSyntaxError("unbalanced parenthesis", self.tok.offset, frozenset({")"}))
            self.advance()
            return t
        if tok.kind != "name":
            raise DslSyntaxError(
                f"found {tok.text or 'end of input'!r}", tok.offset, frozenset({"name", "("})
            )
        self.advance()
        if tok.text == "identity":
            return Identity()
        factory = self.registry.get(tok.text)
        if factory is None:
            raise DslSyntaxError(f"unknown transformer {tok.text!r}", tok.offset, frozenset(self.registry))
        args: dict[str, Any] = {}
        if self.tok.kind == "op" and self.tok.text == "(":
            self.advance()
            if self.tok.text != ")":
                while True:
                    name = self.tok
                    if name.kind != "name":
                        raise DslSyntaxError("expected an argument name", name.offset, frozenset({"name"}))
                    self.advance()
                    self.expect("=")
                    lit = self.tok
                    if lit.kind not in ("number", "string"):
                        raise DslSyntaxError(
                            f"malformed literal {lit.text!r}", lit.offset, frozenset({"number", "string"})
                        )
                    self.advance()
                    if name.text in args:
                        raise DslSyntaxError(f"duplicate argument {name.text!r}", name.offset)
                    args[name.text] = lit.value
                    if self.tok.text == ",":
                        self.advance()
                        continue
                    break
            if self.tok.text != ")":
                raise DslSyntaxError("unbalanced parenthesis", self.tok.offset, frozenset({")", ","}))
            self.advance()
        try:
            return factory(**args)
        except (TypeError, ValueError) as e:
            raise DslSyntaxError(f"cannot build {tok.text!r}: {e}", tok.offset) from None


def parse(text: str, registry: Registry) -> Transformer:
    return _Parser(text, registry).parse()


# rendering -------------------------------------------------------------------

_PREC = {Then: 1, Concat: 1, LinearCombine: 2, SetUnion: 2, SetIntersect: 2, FeatureUnion: 3}
_POSTFIX = 4
_ATOM = 5


def _literal(value: Any, strict: bool) -> str:
    if isinstance(value, bool) or value is None:
        pass
    elif isinstance(value, int):
        return str(value)
    elif isinstance(value, float):
        if math.isfinite(value):
            return repr(value)
    elif isinstance(value, str):
        return "'" + value.replace("\\", "\\\\").replace("'", "\\'") + "'"
    if strict:
        raise DslRenderError(f"value {value!r} has no literal form")
    return f"<{type(value).__name__}>"


def _number(c: float, strict: bool) -> str:
    if not math.isfinite(c):
        if strict:
            raise DslRenderError(f"scalar {c!r} has no literal form")
        return repr(c)
    return repr(c)


class _Renderer:
    def __init__(self, registry: Registry | None):
        self.registry = registry
        self.strict = registry is not None

    def wrap(self, t: Transformer, min_prec: int) -> str:
        text, prec = self.render(t)
        return text if prec >= min_prec else f"({text})"

    def render(self, t: Transformer) -> tuple[str, int]:
        if isinstance(t, Identity):
            return "identity", _ATOM
        if isinstance(t, Leaf):
            if self.strict and t.kind not in self.registry:
                raise DslRenderError(f"leaf kind {t.kind!r} is not registered")
            shown = {k: v for k, v in t.params.items() if k not in t.implicit}
            if not shown:
                return t.kind, _ATOM
            args = ", ".join(f"{k}={_literal(v, self.strict)}" for k, v in shown.items())
            return f"{t.kind}({args})", _ATOM
        if isinstance(t, RankCutoff):
            return f"identity % {t.k}", _POSTFIX
        if isinstance(t, ScalarProduct):
            return f"{self.wrap(t.inner, _POSTFIX)} * {_number(t.c, self.strict)}", _POSTFIX
        if isinstance(t, Then):
            return self.render_then(t.stages())
        if isinstance(t, _Binary):
            p = _PREC[type(t)]
            return f"{self.wrap(t.left, p)} {t.symbol} {self.wrap(t.right, p + 1)}", p
        if self.strict:
            raise DslRenderError(f"{type(t).__name__} has no textual form")
        inner = getattr(t, "inner", None)
        if isinstance(inner, Transformer):
            return f"{type(t).__name__}[{self.render(inner)[0]}]", _ATOM
        return f"<{type(t).__name__}>", _ATOM

    def render_then(self, stages: list[Transformer]) -> tuple[str, int]:
        pieces: list[tuple[str, int]] = []
        for s in stages:
            if isinstance(s, RankCutoff) and pieces and not pieces[-1][0] == "identity":
                text, prec = pieces[-1]
                text = text if prec >= _POSTFIX else f"({text})"
                pieces[-1] = (f"{text} % {s.k}", _POSTFIX)
            else:
                pieces.append(self.render(s))
        if len(pieces) == 1:
            return pieces[0]
        parts = [pieces[0][0] if pieces[0][1] >= 1 else f"({pieces[0][0]})"]
        parts += [text if prec > 1 else f"({text})" for text, prec in pieces[1:]]
        return " >> ".join(parts), 1


def to_text(t: Transformer, registry: Registry | None) -> str:
    """Render ``t`` with minimal parentheses.

    With a registry, every leaf kind must be registered and every value must
    have a literal form, so that ``parse(to_text(t, r), r) == t``. Without
    one the rendering is best-effort and meant for display.
    """
    return _Renderer(registry).render(t)[0]
