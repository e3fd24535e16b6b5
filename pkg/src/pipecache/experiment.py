"""Declarative experiments with optional shared-prefix precomputation.

When every compared pipeline starts with the same stages, those stages can
be run once on the topics and their output fed to the remainder of each
pipeline. This yields exactly the same results as running every pipeline
in full, provided the stages are deterministic.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from typing import Sequence

from .frame import Frame, RelationKind, require_kind
from .measures import Measure, holm_correction, paired_t_test, parse_measure, qrels_by_qid, rankings
from .pipeline import Identity, PipelineError, Transformer, then


def _stage_list(p: Transformer | Sequence[Transformer]) -> list[Transformer]:
    return p.stages() if isinstance(p, Transformer) else list(p)


def lcp(pipelines: Sequence[Transformer | Sequence[Transformer]]) -> list[Transformer]:
    """Longest run of leading stages that is structurally equal across all pipelines."""
    if not pipelines:
        raise ValueError("lcp needs at least one pipeline")
    stage_lists = [_stage_list(p) for p in pipelines]
    first, rest = stage_lists[0], stage_lists[1:]
    n = 0
    while n < len(first) and all(n < len(s) and s[n] == first[n] for s in rest):
        n += 1
    return first[:n]


def remainders(
    pipelines: Sequence[Transformer | Sequence[Transformer]], prefix: Sequence[Transformer]
) -> list[Transformer]:
    """Each pipeline with ``prefix`` removed; an empty remainder is Identity."""
    out = []
    n = len(prefix)
    for p in pipelines:
        stages = _stage_list(p)
        if len(stages) < n or any(a != b for a, b in zip(stages, prefix)):
            raise PipelineError(f"{p!r} does not start with the given prefix")
        rest = stages[n:]
        out.append(then(*rest) if rest else Identity())
    return out


@dataclass
class ExperimentSpec:
    systems: list[Transformer]
    topics: Frame
    qrels: Frame
    measures: list[Measure | str]
    names: list[str] | None = None
    precompute_prefix: bool = False
    baseline: int | None = None

    def __post_init__(self) -> None:
        if not self.systems:
            raise ValueError("an experiment needs at least one system")
        if not self.measures:
            raise ValueError("an experiment needs at least one measure")
        self.measures = [m if isinstance(m, Measure) else parse_measure(m) for m in self.measures]
        if self.names is not None:
            if len(self.names) != len(self.systems):
                raise ValueError(f"{len(self.names)} names for {len(self.systems)} systems")
            if len(set(self.names)) != len(self.names):
                raise ValueError("system names must be unique")
        if self.baseline is not None and not 0 <= self.baseline < len(self.systems):
            raise ValueError(f"baseline index {self.baseline} out of range")


@dataclass
class SystemResult:
    name: str
    means: dict[str, float]
    per_query: dict[str, dict[str, float]]  # measure -> qid -> value
    p_values: dict[str, float] = field(default_factory=dict)
    corrected: dict[str, float] = field(default_factory=dict)
    degenerate: dict[str, bool] = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class PrefixReport:
    stages: list[str]
    applied: bool
    reason: str
    seconds: float = 0.0

    @property
    def length(self) -> int:
        return len(self.stages)

    def text(self) -> str:
        lines = [f"common prefix: {self.length} stage(s)"]
        lines += [f"  [{i}] {s}" for i, s in enumerate(self.stages)]
        state = "yes" if self.applied else "no"
        lines.append(f"precomputed: {state} ({self.reason})")
        return "\n".join(lines)


@dataclass
class ExperimentResult:
    measures: list[str]
    systems: list[SystemResult]
    prefix: PrefixReport
    baseline: str | None = None

    def table(self) -> list[tuple]:
        """Names, means, per-query values and p-values; no timings or prefix info."""
        rows = []
        for s in self.systems:
            for m in self.measures:
                rows.append(
                    (
                        s.name,
                        m,
                        s.means[m],
                        tuple(s.per_query[m].items()),
                        s.p_values.get(m),
                        s.corrected.get(m),
                    )
                )
        return rows

    def fingerprint(self) -> bytes:
        """Bit-exact serialisation of :meth:`table`, for equivalence checks."""
        out = []

        def real(x: float | None) -> bytes:
            return b"-" if x is None else struct.pack("<d", x)

        for name, m, mean, per_query, p, pc in self.table():
            out.append(f"{name}\x00{m}\x00".encode())
            out.append(real(mean))
            for qid, v in per_query:
                out.append(qid.encode() + b"\x00" + real(v))
            out.append(real(p) + real(pc))
        return b"".join(out)

    def to_tsv(self) -> str:
        header = ["name"] + list(self.measures)
        with_p = self.baseline is not None
        if with_p:
            for m in self.measures:
                header += [f"{m} p", f"{m} p-corr"]
        lines = ["\t".join(header)]
        for s in self.systems:
            fields = [s.name] + [repr(s.means[m]) for m in self.measures]
            if with_p:
                for m in self.measures:
                    p, pc = s.p_values.get(m), s.corrected.get(m)
                    fields += ["" if p is None else repr(p), "" if pc is None else repr(pc)]
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"


def _default_names(systems: Sequence[Transformer]) -> list[str]:
    names = []
    seen: dict[str, int] = {}
    for s in systems:
        name = repr(s)
        if name in seen:
            seen[name] += 1
            name = f"{name} #{seen[name]}"
        else:
            seen[name] = 1
        names.append(name)
    return names


def evaluate(
    results: Frame, topics: Frame, qrels: Frame, measures: Sequence[Measure]
) -> dict[str, dict[str, float]]:
    """Per-query values for every topic; missing results or qrels score 0."""
    ranked = rankings(results)
    judged = qrels_by_qid(qrels)
    qids = list(dict.fromkeys(topics.column("qid")))
    return {
        str(m): {q: m(ranked.get(q, []), judged.get(q, {})) for q in qids} for m in measures
    }


def run(spec: ExperimentSpec) -> ExperimentResult:
    require_kind(spec.topics, RelationKind.Q)
    require_kind(spec.qrels, RelationKind.RA)
    names = spec.names or _default_names(spec.systems)
    measure_names = [str(m) for m in spec.measures]

    prefix = lcp(spec.systems)
    prefix_text = [repr(s) for s in prefix]
    if not spec.precompute_prefix:
        report = PrefixReport(prefix_text, False, "precompute_prefix is off")
    elif len(spec.systems) < 2:
        report = PrefixReport(prefix_text, False, "fewer than two systems")
    elif not prefix:
        report = PrefixReport(prefix_text, False, "no common prefix")
    else:
        report = PrefixReport(prefix_text, True, "shared by all systems")

    if report.applied:
        start = time.perf_counter()
        source = then(*prefix).transform(spec.topics)
        report.seconds = time.perf_counter() - start
        runnable = remainders(spec.systems, prefix)
    else:
        source = spec.topics
        runnable = list(spec.systems)

    systems = []
    for name, system in zip(names, runnable):
        start = time.perf_counter()
        results = system.transform(source)
        elapsed = time.perf_counter() - start
        per_query = evaluate(results, spec.topics, spec.qrels, spec.measures)
        means = {
            m: (sum(v.values()) / len(v) if v else 0.0) for m, v in per_query.items()
        }
        systems.append(SystemResult(name, means, per_query, seconds=elapsed))

    baseline_name = None
    if spec.baseline is not None:
        base = systems[spec.baseline]
        baseline_name = base.name
        others = [s for i, s in enumerate(systems) if i != spec.baseline]
        for m in measure_names:
            qids = list(base.per_query[m])
            tests = [
                paired_t_test(
                    [s.per_query[m][q] for q in qids], [base.per_query[m][q] for q in qids]
                )
                for s in others
            ]
            for s, test, adj in zip(others, tests, holm_correction([t.p for t in tests])):
                s.p_values[m] = test.p
                s.corrected[m] = adj
                s.degenerate[m] = test.degenerate
    return ExperimentResult(measure_names, systems, report, baseline_name)


def run_experiment(
    systems: Sequence[Transformer],
    topics: Frame,
    qrels: Frame,
    measures: Sequence[Measure | str],
    names: Sequence[str] | None = None,
    precompute_prefix: bool = False,
    baseline: int | None = None,
) -> ExperimentResult:
    """Keyword-style front end to :func:`run`."""
    return run(
        ExperimentSpec(
            list(systems),
            topics,
            qrels,
            list(measures),
            list(names) if names is not None else None,
            precompute_prefix,
            baseline,
        )
    )
