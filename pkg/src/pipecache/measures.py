"""Effectiveness measures and significance testing.

Rankings are lists of docnos in rank order; qrels for one query are a
``docno -> label`` mapping. A label > 0 counts as relevant.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .frame import Frame


@dataclass(frozen=True)
class Measure:
    name: str  # "nDCG", "AP" or "P"
    k: int | None = None

    def __post_init__(self) -> None:
        if self.name not in ("nDCG", "AP", "P"):
            raise ValueError(f"unknown measure {self.name!r}")
        if self.name == "P" and self.k is None:
            raise ValueError("P needs a cutoff, e.g. P@10")
        if self.k is not None and self.k < 1:
            raise ValueError(f"measure cutoff must be >= 1, got {self.k}")

    def __str__(self) -> str:
        return self.name if self.k is None else f"{self.name}@{self.k}"

    def __call__(self, ranking: Sequence[str], qrels: Mapping[str, int]) -> float:
        if self.name == "nDCG":
            return ndcg_at_k(ranking, qrels, self.k if self.k is not None else len(ranking) or 1)
        if self.name == "AP":
            return average_precision(ranking, qrels)
        return precision_at_k(ranking, qrels, self.k)


_MEASURE = re.compile(r"^(nDCG|AP|P)(?:@(\d+))?$")


def parse_measure(text: str) -> Measure:
    m = _MEASURE.match(text.strip())
    if not m:
        raise ValueError(f"cannot parse measure {text!r} (expected nDCG@k, AP or P@k)")
    return Measure(m.group(1), int(m.group(2)) if m.group(2) else None)


def ndcg_at_k(ranking: Sequence[str], qrels: Mapping[str, int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")

    def gain(label: int) -> float:
        return 2.0 ** max(label, 0) - 1.0

    dcg = sum(gain(qrels.get(d, 0)) / math.log2(i + 2) for i, d in enumerate(ranking[:k]))
    ideal = sorted(qrels.values(), reverse=True)[:k]
    idcg = sum(gain(label) / math.log2(i + 2) for i, label in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def average_precision(ranking: Sequence[str], qrels: Mapping[str, int]) -> float:
    total = sum(1 for label in qrels.values() if label > 0)
    if total == 0:
        return 0.0
    hits = 0
    acc = 0.0
    for i, d in enumerate(ranking):
        if qrels.get(d, 0) > 0:
            hits += 1
            acc += hits / (i + 1)
    return acc / total


def precision_at_k(ranking: Sequence[str], qrels: Mapping[str, int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(1 for d in ranking[:k] if qrels.get(d, 0) > 0) / k


def rankings(results: Frame) -> dict[str, list[str]]:
    """docnos per qid in rank order (by rank, else score, else row order)."""
    results.require("qid", "docno")
    qi, di = results.index("qid"), results.index("docno")
    if "rank" in results:
        ri = results.index("rank")
        order = sorted(range(len(results)), key=lambda r: results.rows[r][ri])
    elif "score" in results:
        si = results.index("score")
        order = sorted(
            range(len(results)), key=lambda r: (-results.rows[r][si], results.rows[r][di])
        )
    else:
        order = range(len(results))
    out: dict[str, list[str]] = {}
    for r in order:
        row = results.rows[r]
        out.setdefault(row[qi], []).append(row[di])
    return out


def qrels_by_qid(qrels: Frame) -> dict[str, dict[str, int]]:
    qrels.require("qid", "docno", "label")
    qi, di, li = qrels.index("qid"), qrels.index("docno"), qrels.index("label")
    out: dict[str, dict[str, int]] = {}
    for row in qrels.rows:
        out.setdefault(row[qi], {})[row[di]] = row[li]
    return out


# significance ------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    degenerate: bool = False


def paired_t_test(x: Sequence[float], y: Sequence[float]) -> TTest:
    """Two-sided paired Student t-test.

    Zero-variance differences are degenerate: all-zero differences give
    ``p = 1``; a constant non-zero difference gives ``t = ±inf`` and ``p = 0``.
    """
    if len(x) != len(y):
        raise ValueError("paired samples must have equal length")
    n = len(x)
    if n < 2:
        return TTest(math.nan, 1.0, True)
    diffs = [a - b for a, b in zip(x, y)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return TTest(math.nan, 1.0, True)
        return TTest(math.copysign(math.inf, mean), 0.0, True)
    t = mean / math.sqrt(var / n)
    df = n - 1
    p = betainc(df / 2.0, 0.5, df / (df + t * t))
    return TTest(t, min(1.0, p))


def holm_correction(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, in the input order."""
    m = len(p_values)
    for p in p_values:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p-value {p} outside [0, 1]")
    order = sorted(range(m), key=lambda i: p_values[i])
    adjusted = [0.0] * m
    running = 0.0
    for step, i in enumerate(order):
        running = max(running, min(1.0, (m - step) * p_values[i]))
        adjusted[i] = running
    return adjusted
