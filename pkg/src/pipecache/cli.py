"""Command-line entry point: ``pipecache index | run | cache``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
See ``docs/config.md`` for the configuration file format.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import caching
from .dsl import DslSyntaxError, parse
from .experiment import ExperimentResult, ExperimentSpec, run
from .frame import Frame, FrameError, read_tsv
from .measures import parse_measure
from .pipeline import Transformer
from .retrieval import (
    Counted,
    IndexFormatError,
    InvertedIndex,
    Latency,
    SyntheticCorpusSpec,
    build_index,
    synth_corpus,
    toy_registry,
)
from .storage import StorageError

log = logging.getLogger("pipecache")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# configuration -----------------------------------------------------------------


@dataclass
class CacheDecl:
    name: str
    kind: str
    wraps: str
    path: Path | None
    key: list[str] | None
    value: list[str] | None
    label: str | None


@dataclass
class Setting:
    name: str
    precompute_prefix: bool
    caches: list[str]


@dataclass
class ExperimentConfig:
    base: Path
    synthetic: SyntheticCorpusSpec | None
    corpus_path: Path | None
    index_path: Path
    topics_path: Path | None
    qrels_path: Path | None
    systems: list[tuple[str, str]]
    measures: list[str]
    precompute_prefix: bool
    baseline: str | None
    caches: dict[str, CacheDecl] = field(default_factory=dict)
    settings: list[Setting] = field(default_factory=list)
    latency: dict[str, tuple[float, float]] = field(default_factory=dict)


_SYNTH_FIELDS = (
    "seed", "num_docs", "vocab_size", "doc_len_min", "doc_len_max", "num_queries", "query_len"
)


def _list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _bool(section: configparser.SectionProxy, key: str, default: bool) -> bool:
    try:
        return section.getboolean(key, fallback=default)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key} must be yes/no") from None


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    corpus = parser["corpus"] if parser.has_section("corpus") else None
    if corpus is None:
        raise ConfigError("missing [corpus] section")
    synthetic = None
    corpus_path = None
    if _bool(corpus, "synthetic", False):
        kwargs = {}
        for name in _SYNTH_FIELDS:
            if name in corpus:
                try:
                    kwargs[name] = int(corpus[name])
                except ValueError:
                    raise ConfigError(f"[corpus] {name} must be an integer") from None
        if seed is not None:
            kwargs["seed"] = seed
        synthetic = SyntheticCorpusSpec(**kwargs)
        try:
            synthetic.check()
        except ValueError as e:
            raise ConfigError(f"[corpus] {e}") from None
    elif "path" in corpus:
        corpus_path = resolve(corpus["path"])
    else:
        raise ConfigError("[corpus] needs either synthetic = yes or a path")

    if not parser.has_section("index") or "path" not in parser["index"]:
        raise ConfigError("missing [index] path")
    index_path = resolve(parser["index"]["path"])

    def optional_path(section: str) -> Path | None:
        if parser.has_section(section) and "path" in parser[section]:
            return resolve(parser[section]["path"])
        if synthetic is None and parser.has_section("experiment"):
            raise ConfigError(f"[{section}] path is required for a non-synthetic corpus")
        return None

    exp = parser["experiment"] if parser.has_section("experiment") else None
    topics_path = optional_path("topics") if exp is not None else None
    qrels_path = optional_path("qrels") if exp is not None else None

    systems = []
    caches: dict[str, CacheDecl] = {}
    settings = []
    for section in parser.sections():
        kind, _, name = section.partition(" ")
        name = name.strip()
        if kind == "system":
            if not name:
                raise ConfigError("system sections need a name: [system NAME]")
            if "pipeline" not in parser[section]:
                raise ConfigError(f"[{section}] needs a pipeline")
            if any(n == name for n, _ in systems):
                raise ConfigError(f"duplicate system name {name!r}")
            systems.append((name, parser[section]["pipeline"]))
        elif kind == "cache":
            sec = parser[section]
            ckind = sec.get("kind", "")
            if ckind not in ("keyvalue", "scorer", "retriever"):
                raise ConfigError(f"[{section}] kind must be keyvalue, scorer or retriever")
            if "wraps" not in sec:
                raise ConfigError(f"[{section}] needs 'wraps' (a pipeline expression)")
            cache_root = os.environ.get("PIPECACHE_HOME")
            cpath = None
            if "path" in sec:
                p = Path(sec["path"])
                cpath = p if p.is_absolute() else (Path(cache_root) / p if cache_root else base / p)
            caches[name] = CacheDecl(
                name,
                ckind,
                sec["wraps"],
                cpath,
                _list(sec["key"]) if "key" in sec else None,
                _list(sec["value"]) if "value" in sec else None,
                sec.get("label"),
            )
        elif kind == "setting":
            sec = parser[section]
            settings.append(
                Setting(name or f"({len(settings) + 1})", _bool(sec, "precompute_prefix", False),
                        _list(sec.get("caches", "")))
            )
    latency = {}
    if parser.has_section("latency"):
        for leaf, spec in parser["latency"].items():
            parts = _list(spec)
            try:
                per_call, per_row = (float(x) for x in parts)
            except ValueError:
                raise ConfigError(f"[latency] {leaf} must be 'per_call_ms, per_row_ms'") from None
            latency[leaf] = (per_call, per_row)

    measures: list[str] = []
    precompute = False
    baseline = None
    if exp is not None:
        measures = _list(exp.get("measures", "nDCG@10"))
        for m in measures:
            try:
                parse_measure(m)
            except ValueError as e:
                raise ConfigError(f"[experiment] {e}") from None
        precompute = _bool(exp, "precompute_prefix", False)
        baseline = exp.get("baseline") or None
        if baseline is not None and baseline not in [n for n, _ in systems]:
            raise ConfigError(f"baseline {baseline!r} is not a declared system")
    for s in settings:
        for c in s.caches:
            if c not in caches:
                raise ConfigError(f"setting {s.name!r} enables undeclared cache {c!r}")
    return ExperimentConfig(
        base, synthetic, corpus_path, index_path, topics_path, qrels_path, systems,
        measures, precompute, baseline, caches, settings, latency,
    )


# data ---------------------------------------------------------------------------


def load_corpus(config: ExperimentConfig) -> Frame:
    if config.synthetic is not None:
        return synth_corpus(config.synthetic).corpus
    try:
        return read_tsv(config.corpus_path)
    except OSError as e:
        raise DataError(f"cannot read corpus: {e}") from None


def load_topics_qrels(config: ExperimentConfig) -> tuple[Frame, Frame]:
    synth = synth_corpus(config.synthetic) if config.synthetic is not None else None
    try:
        topics = read_tsv(config.topics_path) if config.topics_path else synth.topics
        qrels = read_tsv(config.qrels_path) if config.qrels_path else synth.qrels
    except OSError as e:
        raise DataError(f"cannot read topics/qrels: {e}") from None
    return topics, qrels


class CountingRegistry(dict):
    """Leaf factories that hand out one shared, counted instance per call signature.

    Sharing instances keeps identical leaves structurally equal across
    systems, which is what lets prefix precomputation find them.
    """

    def __init__(self, base: dict[str, Callable[..., Transformer]],
                 latency: dict[str, tuple[float, float]]):
        super().__init__()
        self.counters: dict[str, Counted] = {}
        for name, factory in base.items():
            self[name] = self._wrap(name, factory, latency.get(name))

    def _wrap(self, name, factory, latency):
        def make(**kwargs):
            args = ", ".join(f"{k}={v!r}" for k, v in sorted(kwargs.items()))
            sig = f"{name}({args})" if args else name
            if sig not in self.counters:
                leaf = factory(**kwargs)
                if latency is not None:
                    leaf = Latency(leaf, *latency)
                self.counters[sig] = Counted(leaf)
            return self.counters[sig]
        return make

    def reset(self) -> None:
        for c in self.counters.values():
            c.reset()


def _open_caches(config: ExperimentConfig, registry: CountingRegistry) -> dict[str, Any]:
    out = {}
    for decl in config.caches.values():
        inner = parse(decl.wraps, registry)
        if decl.kind == "scorer":
            cache = caching.ScorerCache(decl.path, inner, key=decl.key, label=decl.label)
        elif decl.kind == "retriever":
            cache = caching.RetrieverCache(decl.path, inner, key=decl.key, label=decl.label)
        else:
            cache = caching.KeyValueCache(decl.path, inner, key=decl.key, value=decl.value,
                                          label=decl.label)
        out[decl.name] = (cache, inner)
    return out


@dataclass
class SettingOutcome:
    setting: Setting
    result: ExperimentResult
    seconds: float
    counters: dict[str, dict[str, int]]


def run_settings(config: ExperimentConfig, precompute: bool | None = None) -> list[SettingOutcome]:
    if not config.systems:
        raise ConfigError("no [system NAME] sections declared")
    if not (config.index_path / "meta").exists():
        raise DataError(f"no index at {config.index_path}; run 'pipecache index' first")
    try:
        index = InvertedIndex.load(config.index_path)
    except IndexFormatError as e:
        raise DataError(str(e)) from None
    topics, qrels = load_topics_qrels(config)
    registry = CountingRegistry(toy_registry(index), config.latency)
    caches = _open_caches(config, registry)
    settings = config.settings or [Setting("(1)", config.precompute_prefix, list(caches))]
    names = [n for n, _ in config.systems]
    baseline = names.index(config.baseline) if config.baseline else None
    outcomes = []
    try:
        for setting in settings:
            scope = dict(registry)
            for cname, (cache, inner) in caches.items():
                active = cache if cname in setting.caches else inner
                scope[cname] = lambda t=active: t
            systems = [parse(expr, scope) for _, expr in config.systems]
            registry.reset()
            pre = setting.precompute_prefix if precompute is None else precompute
            start = time.perf_counter()
            result = run(ExperimentSpec(systems, topics, qrels, config.measures, names, pre, baseline))
            elapsed = time.perf_counter() - start
            counters = {sig: c.counts() for sig, c in registry.counters.items()}
            outcomes.append(SettingOutcome(setting, result, elapsed, counters))
    finally:
        for cache, _ in caches.values():
            cache.close()
    return outcomes


# output -------------------------------------------------------------------------


def format_tsv(outcomes: Sequence[SettingOutcome], timings: bool) -> str:
    """One table: the setting name, then each result row as in ``ExperimentResult.to_tsv``."""
    first = outcomes[0].seconds
    lines = []
    for o in outcomes:
        header, *rows = o.result.to_tsv().rstrip("\n").split("\n")
        extra = []
        if timings:
            delta = f"{o.seconds / first:.0%}" if first else "-"
            extra = [f"{o.seconds:.3f}", delta]
        if not lines:
            names = ["setting"] + header.split("\t") + (["seconds", "delta"] if timings else [])
            lines.append("\t".join(names))
        lines.extend("\t".join([o.setting.name, row] + extra) for row in rows)
    return "\n".join(lines) + "\n"


def format_report(outcomes: Sequence[SettingOutcome], timings: bool) -> str:
    out = []
    first = outcomes[0].seconds
    out.append("# settings")
    head = f"{'setting':<24} {'precompute':<11} {'caches':<20} {'time':>9}"
    out.append(head + ("  delta" if timings else ""))
    for i, o in enumerate(outcomes):
        line = (
            f"{o.setting.name:<24} {('yes' if o.result.prefix.applied else 'no'):<11} "
            f"{(','.join(o.setting.caches) or '-'):<20} {o.seconds:>8.2f}s"
        )
        if timings:
            line += "  -" if i == 0 else f"  {o.seconds / first:.0%}"
        out.append(line)
    for o in outcomes:
        out.append("")
        out.append(f"# setting {o.setting.name}: measures")
        out.append(o.result.to_tsv().rstrip("\n"))
        out.append(f"# setting {o.setting.name}: invocations")
        for sig, c in o.counters.items():
            out.append(f"{sig}\tcalls={c['invocations']}\trows_in={c['rows_in']}\trows_out={c['rows_out']}")
        out.append(f"# setting {o.setting.name}: prefix")
        out.append(o.result.prefix.text())
    return "\n".join(out) + "\n"


# commands -----------------------------------------------------------------------


def cmd_index(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.seed)
    corpus = load_corpus(config)
    target = config.index_path
    if target.exists() and any(target.iterdir()) and not args.force:
        raise DataError(f"{target} already exists; pass --force to overwrite")
    index = build_index(corpus)
    index.save(target, force=True)
    print(f"indexed {index.num_docs} documents into {target}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.seed)
    outcomes = run_settings(config, args.precompute)
    if args.tsv:
        sys.stdout.write(format_tsv(outcomes, args.timings))
        sys.stderr.write(format_report(outcomes, args.timings))
    else:
        sys.stdout.write(format_report(outcomes, args.timings))
    return EXIT_OK


def cmd_cache(args: argparse.Namespace) -> int:
    if args.action == "stats":
        stats = caching.cache_stats(args.path)
        print(f"kind\t{stats['kind']}\nentries\t{stats['entries']}\nbytes\t{stats['bytes']}")
    elif args.action == "clear":
        if not args.yes:
            print(f"refusing to clear {args.path} without --yes", file=sys.stderr)
            return EXIT_CONFIG
        caching.clear_cache(args.path)
        print(f"cleared {args.path}")
    elif args.action == "pack":
        caching.pack(args.path, args.archive)
        print(f"packed {args.path} into {args.archive}")
    elif args.action == "unpack":
        cache = caching.unpack(args.archive, args.path)
        cache.close()
        print(f"unpacked {args.archive} into {args.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipecache", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build the index declared in a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("run", help="run the experiment declared in a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--precompute", dest="precompute", action="store_true", default=None)
    group.add_argument("--no-precompute", dest="precompute", action="store_false")
    p.add_argument("--timings", action="store_true", help="add time deltas vs the first setting")
    p.add_argument("--tsv", action="store_true", help="machine-readable table on stdout")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cache", help="inspect and share cache directories")
    csub = p.add_subparsers(dest="action", required=True)
    c = csub.add_parser("stats")
    c.add_argument("path")
    c = csub.add_parser("clear")
    c.add_argument("path")
    c.add_argument("--yes", action="store_true")
    c = csub.add_parser("pack")
    c.add_argument("path")
    c.add_argument("archive")
    c = csub.add_parser("unpack")
    c.add_argument("archive")
    c.add_argument("path")
    p.set_defaults(func=cmd_cache)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, DslSyntaxError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FrameError, IndexFormatError, caching.CacheError, StorageError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
