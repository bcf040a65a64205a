"""Seeded synthetic corpus of temporal fact chains."""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Sequence

from .seeding import substream
from .temporal_kb import TemporalFact

DEFAULT_RELATIONS = (
    "head_of_government",
    "plays_for",
    "is_married_to",
    "works_at",
    "is_affiliated_to",
    "lives_in",
    "is_leader_of",
    "holds_political_position",
    "owns",
    "has_capital",
    "manages",
    "is_member_of",
    "head_coach",
)


@dataclass(frozen=True)
class CorpusConfig:
    n_chains: int = 500
    min_length: int = 2
    max_length: int = 5
    first_year: int = 1950
    last_year: int = 2022
    min_span: int = 1
    max_span: int = 8
    pool_size: int = 120
    open_last_prob: float = 0.3
    relations: tuple[str, ...] = DEFAULT_RELATIONS


def generate_corpus(seed: int, config: CorpusConfig = CorpusConfig()) -> list[TemporalFact]:
    """Chains with unique subjects; objects drawn from per-relation pools.

    Spans follow each other without gaps or overlaps and never end after
    ``last_year``; the last fact of a chain is left open with probability
    ``open_last_prob``.
    """
    rng = substream(seed, "corpus")
    rels = config.relations
    facts: list[TemporalFact] = []
    for c in range(config.n_chains):
        rel = rels[c % len(rels)]
        subject = f"subj_{c:05d}"
        length = int(rng.integers(config.min_length, config.max_length + 1))
        objs = rng.choice(config.pool_size, size=length, replace=False)
        spans = rng.integers(config.min_span, config.max_span + 1, size=length)
        latest_start = config.last_year - int(spans.sum())
        t = int(rng.integers(config.first_year, max(config.first_year, latest_start) + 1))
        open_last = rng.random() < config.open_last_prob
        for i, (o, span) in enumerate(zip(objs, spans)):
            end = min(t + int(span), config.last_year)
            last = i == length - 1
            facts.append(
                TemporalFact(subject, rel, f"{rel}_obj_{int(o):04d}", t, None if (last and open_last) else end)
            )
            t = end
    return facts


def write_tsv(facts: Sequence[TemporalFact], fp: IO[str]) -> None:
    for f in facts:
        row = [f.subject, f.relation, f.object, str(f.t_start)]
        if f.t_end is not None:
            row.append(str(f.t_end))
        fp.write("\t".join(row) + "\n")
