"""Timestamped facts and per-(subject, relation) chains."""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator

INF = float("inf")

_YEAR_RE = re.compile(r"^(-?\d{1,4})(?:-\d{2}(?:-\d{2})?)?(?:T.*)?$")


@dataclass(frozen=True, order=True)
class TemporalFact:
    subject: str
    relation: str
    object: str
    t_start: int
    t_end: int | None = None

    def __post_init__(self):
        for name in ("subject", "relation", "object"):
            if not getattr(self, name):
                raise ValueError(f"empty {name} in fact")
        if self.t_end is not None and self.t_start > self.t_end:
            raise ValueError(f"t_start {self.t_start} > t_end {self.t_end}")

    def effective_end(self, horizon: int) -> int:
        """End year with an open interval read as running to ``horizon``."""
        return self.t_end if self.t_end is not None else max(horizon, self.t_start)

    def _end_key(self) -> float:
        return INF if self.t_end is None else self.t_end


@dataclass(frozen=True)
class FactChain:
    subject: str
    relation: str
    facts: tuple[TemporalFact, ...]

    @property
    def chain_id(self) -> str:
        return f"{self.subject}|{self.relation}"

    def __len__(self) -> int:
        return len(self.facts)

    def objects(self) -> list[str]:
        return [f.object for f in self.facts]


@dataclass
class ParseError:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


@dataclass
class ParseResult:
    facts: list[TemporalFact] = field(default_factory=list)
    errors: list[ParseError] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def parse_year(text: str) -> int:
    """Parse a year; ISO dates are truncated to their year."""
    m = _YEAR_RE.match(text.strip())
    if m is None:
        raise ValueError(f"not a year: {text!r}")
    return int(m.group(1))


def parse_facts(source: IO[str] | Iterable[str]) -> ParseResult:
    """Read tab-separated ``subject relation object t_start [t_end]`` lines.

    Bad lines are collected as :class:`ParseError` entries and skipped; blank
    lines and ``#`` comments are ignored.
    """
    result = ParseResult()
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (4, 5):
            result.errors.append(ParseError(lineno, f"expected 4 or 5 fields, got {len(parts)}"))
            continue
        s, r, o = (p.strip() for p in parts[:3])
        try:
            ts = parse_year(parts[3])
            te = parse_year(parts[4]) if len(parts) == 5 and parts[4].strip() else None
            result.facts.append(TemporalFact(s, r, o, ts, te))
        except ValueError as exc:
            result.errors.append(ParseError(lineno, str(exc)))
    return result


@dataclass
class ChainLog:
    """What build_chains did to one (subject, relation) group."""

    chain_id: str
    merged: list[str] = field(default_factory=list)
    clipped: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.merged or self.clipped or self.dropped)


def _fmt(f: TemporalFact) -> str:
    return f"{f.object} {f.t_start}-{'' if f.t_end is None else f.t_end}"


def _merge_same_object(facts: list[TemporalFact], log: ChainLog) -> list[TemporalFact]:
    by_obj: dict[str, list[TemporalFact]] = defaultdict(list)
    for f in facts:
        by_obj[f.object].append(f)
    out = []
    for obj in sorted(by_obj):
        group = sorted(by_obj[obj], key=lambda f: (f.t_start, f._end_key()))
        cur = group[0]
        for f in group[1:]:
            if f.t_start <= cur._end_key():
                end = None if INF in (cur._end_key(), f._end_key()) else max(cur.t_end, f.t_end)
                log.merged.append(f"{_fmt(cur)} + {_fmt(f)}")
                cur = replace(cur, t_end=end)
            else:
                out.append(cur)
                cur = f
        out.append(cur)
    return out


def _clip_to_range(f: TemporalFact, year_range: tuple[int, int] | None) -> TemporalFact | None:
    if year_range is None:
        return f
    lo, hi = year_range
    if f.t_start > hi or (f.t_end is not None and f.t_end < lo):
        return None
    ts = max(f.t_start, lo)
    te = f.t_end if f.t_end is None else min(f.t_end, hi)
    return replace(f, t_start=ts, t_end=te)


def _build_one(
    subject: str,
    relation: str,
    facts: list[TemporalFact],
    year_range: tuple[int, int] | None,
) -> tuple[FactChain | None, ChainLog]:
    log = ChainLog(f"{subject}|{relation}")
    kept = []
    for f in facts:
        g = _clip_to_range(f, year_range)
        if g is None:
            log.dropped.append(f"{_fmt(f)} (outside year range)")
        else:
            if g != f:
                log.clipped.append(f"{_fmt(f)} -> {_fmt(g)} (year range)")
            kept.append(g)
    merged = _merge_same_object(kept, log)
    merged.sort(key=lambda f: (f.t_start, f.object, f._end_key()))

    out: list[TemporalFact] = []
    for f in merged:
        if out:
            prev_end = out[-1]._end_key()
            if f.t_start < prev_end:
                if prev_end >= f._end_key():
                    log.dropped.append(f"{_fmt(f)} (contained)")
                    continue
                clipped = replace(f, t_start=int(prev_end))
                log.clipped.append(f"{_fmt(f)} -> {_fmt(clipped)}")
                f = clipped
        out.append(f)
    if not out:
        return None, log
    return FactChain(subject, relation, tuple(out)), log


def build_chains(
    facts: Iterable[TemporalFact],
    year_range: tuple[int, int] | None = None,
) -> tuple[list[FactChain], list[ChainLog]]:
    """Group facts by (subject, relation) into non-overlapping chains.

    Same-object facts that touch or overlap are merged first. Then, in
    ``(t_start, object)`` order, a fact overlapping its predecessor has its
    start clipped to the predecessor's end, and is dropped when nothing is
    left of it. An open interval therefore swallows every later fact.

    Returns the chains sorted by (subject, relation) and the non-empty logs.
    """
    groups: dict[tuple[str, str], list[TemporalFact]] = defaultdict(list)
    for f in facts:
        groups[(f.subject, f.relation)].append(f)
    chains, logs = [], []
    for (s, r) in sorted(groups):
        chain, log = _build_one(s, r, groups[(s, r)], year_range)
        if chain is not None:
            chains.append(chain)
        if not log.empty:
            logs.append(log)
    return chains, logs


def flatten(chains: Iterable[FactChain]) -> Iterator[TemporalFact]:
    for c in chains:
        yield from c.facts


def validate_chain(chain: FactChain) -> list[str]:
    """Return every violated chain invariant; an empty list means ok."""
    problems = []
    if not chain.facts:
        problems.append("empty chain")
    for f in chain.facts:
        if (f.subject, f.relation) != (chain.subject, chain.relation):
            problems.append(f"fact {_fmt(f)} has subject/relation {f.subject}/{f.relation}")
        if not (f.subject and f.relation and f.object):
            problems.append(f"fact {_fmt(f)} has an empty field")
        if f.t_end is not None and f.t_start > f.t_end:
            problems.append(f"fact {_fmt(f)} ends before it starts")
    pairs = list(zip(chain.facts, chain.facts[1:]))
    if any(a.t_start > b.t_start for a, b in pairs):
        problems.append("not sorted")
    for i, (a, b) in enumerate(pairs):
        if a.t_end is None:
            problems.append(f"open interval not last (position {i})")
        elif a.t_end > b.t_start:
            problems.append(f"overlap between positions {i} and {i + 1}")
    return problems


def chains_to_json(chains: Iterable[FactChain]) -> list[dict]:
    return [
        {
            "subject": c.subject,
            "relation": c.relation,
            "facts": [{"object": f.object, "t_start": f.t_start, "t_end": f.t_end} for f in c.facts],
        }
        for c in chains
    ]


def chains_from_json(doc: list[dict]) -> list[FactChain]:
    out = []
    for entry in doc:
        s, r = entry["subject"], entry["relation"]
        facts = tuple(TemporalFact(s, r, f["object"], f["t_start"], f.get("t_end")) for f in entry["facts"])
        out.append(FactChain(s, r, facts))
    return out


def dump_chains(chains: Iterable[FactChain], fp: IO[str], **meta) -> None:
    doc = chains_to_json(chains)
    if meta:
        json.dump({"meta": meta, "chains": doc}, fp, indent=1, sort_keys=True)
    else:
        json.dump(doc, fp, indent=1, sort_keys=True)
    fp.write("\n")


def load_chains(fp: IO[str]) -> list[FactChain]:
    doc = json.load(fp)
    if isinstance(doc, dict):
        doc = doc["chains"]
    return chains_from_json(doc)
