"""Benchmark construction: model-time location, fake facts, SE/ME/EE records."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .questions import (
    DEFAULT_HORIZON,
    AliasTable,
    QAItem,
    StructuredQuery,
    TemplatePack,
    current_questions,
    historical_explicit_question,
    make_question_set,
    match_answer,
    midpoint_year,
)
from .seeding import substream
from .temporal_kb import FactChain, TemporalFact

log = logging.getLogger(__name__)

KINDS = ("SE", "ME", "EE")

# top-answer score below which a probe counts as not recalled; a model that
# stores nothing for (s, r) scores near zero on every candidate
RECALL_MIN_SCORE = 0.5


class LocateError(RuntimeError):
    pass


class FakeFactError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FactSpan:
    object: str
    t_start: int
    t_end: int | None

    def to_json(self) -> dict:
        return {"o": self.object, "ts": self.t_start, "tu": self.t_end}

    @classmethod
    def from_json(cls, d: dict) -> "FactSpan":
        return cls(d["o"], d["ts"], d["tu"])


@dataclass(frozen=True)
class EditOp:
    subject: str
    relation: str
    old: FactSpan
    new: FactSpan

    def __post_init__(self):
        if not (self.is_extending or self.is_chronological):
            raise ValueError(f"invalid edit {self}")

    @property
    def is_extending(self) -> bool:
        o, n = self.old, self.new
        return (
            o.object == n.object
            and o.t_start == n.t_start
            and o.t_end is not None
            and n.t_end is not None
            and n.t_end > o.t_end
        )

    @property
    def is_chronological(self) -> bool:
        return self.old.t_end is not None and self.old.t_end <= self.new.t_start

    def old_fact(self) -> TemporalFact:
        return TemporalFact(self.subject, self.relation, self.old.object, self.old.t_start, self.old.t_end)

    def new_fact(self) -> TemporalFact:
        return TemporalFact(self.subject, self.relation, self.new.object, self.new.t_start, self.new.t_end)

    @classmethod
    def between(cls, old: TemporalFact, new: TemporalFact) -> "EditOp":
        return cls(
            old.subject,
            old.relation,
            FactSpan(old.object, old.t_start, old.t_end),
            FactSpan(new.object, new.t_start, new.t_end),
        )

    def to_json(self) -> dict:
        return {"old": self.old.to_json(), "new": self.new.to_json()}


@dataclass
class BenchRecord:
    chain_id: str
    kind: str
    subject: str
    relation: str
    edits: list[EditOp]
    questions_per_edit: list[list[QAItem]]
    final_historical_questions: list[QAItem] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        n = len(self.edits)
        if self.kind in ("SE", "EE") and n != 1:
            raise ValueError(f"{self.kind} record needs exactly one edit, got {n}")
        if self.kind == "ME" and n < 2:
            raise ValueError(f"ME record needs at least two edits, got {n}")
        if len(self.questions_per_edit) != n:
            raise ValueError("one question list per edit required")
        for a, b in zip(self.edits, self.edits[1:]):
            if a.new != b.old:
                raise ValueError("ME edits must be consecutive chain steps")

    def to_json(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "kind": self.kind,
            "subject": self.subject,
            "relation": self.relation,
            "edits": [e.to_json() for e in self.edits],
            "questions_per_edit": [[q.to_json() for q in qs] for qs in self.questions_per_edit],
            "final_historical_questions": [q.to_json() for q in self.final_historical_questions],
        }

    @classmethod
    def from_json(cls, d: dict) -> "BenchRecord":
        s, r = d["subject"], d["relation"]
        edits = [EditOp(s, r, FactSpan.from_json(e["old"]), FactSpan.from_json(e["new"])) for e in d["edits"]]
        return cls(
            chain_id=d["chain_id"],
            kind=d["kind"],
            subject=s,
            relation=r,
            edits=edits,
            questions_per_edit=[[QAItem.from_json(q) for q in qs] for qs in d["questions_per_edit"]],
            final_historical_questions=[QAItem.from_json(q) for q in d.get("final_historical_questions", [])],
        )


# ---------------------------------------------------------------- model time


def locate_model_time(
    model,
    chain: FactChain,
    *,
    horizon: int = DEFAULT_HORIZON,
    aliases: AliasTable | None = None,
    min_score: float = RECALL_MIN_SCORE,
) -> int | None:
    """Index of the latest chain fact the model recalls, or None.

    Each fact is probed with an explicit-year query at its span midpoint and
    counts as recalled when the top answer matches with score >= min_score.
    """
    for i in range(len(chain) - 1, -1, -1):
        f = chain.facts[i]
        year = midpoint_year(f.t_start, f.effective_end(horizon))
        try:
            answer = model.query(StructuredQuery(f.subject, f.relation, year))
        except Exception as exc:
            raise LocateError(f"{chain.chain_id}: {exc}") from exc
        if answer.score >= min_score and match_answer(answer.object, f.object, aliases):
            return i
    return None


def reroot(chain: FactChain, index: int) -> FactChain:
    return FactChain(chain.subject, chain.relation, chain.facts[index:])


# ---------------------------------------------------------------- fake facts


def object_pools(chains: Iterable[FactChain]) -> dict[str, list[str]]:
    """All objects seen under each relation."""
    pools: dict[str, set[str]] = defaultdict(set)
    for c in chains:
        pools[c.relation].update(c.objects())
    return {r: sorted(objs) for r, objs in pools.items()}


def sample_fake_fact(
    chain: FactChain,
    pool: Sequence[str],
    rng: np.random.Generator,
    horizon: int = DEFAULT_HORIZON,
) -> TemporalFact:
    """Counterfactual successor: unseen pool object, 2-6 year span capped at horizon."""
    used = set(chain.objects())
    candidates = sorted(set(pool) - used)
    if not candidates:
        raise FakeFactError(f"{chain.chain_id}: pool exhausted")
    obj = candidates[int(rng.integers(len(candidates)))]
    t_start = chain.facts[-1].effective_end(horizon)
    length = int(rng.integers(2, 7))
    t_end = min(t_start + length, max(horizon, t_start))
    return TemporalFact(chain.subject, chain.relation, obj, t_start, t_end)


def augment_chain(
    chain: FactChain,
    pool: Sequence[str],
    rng: np.random.Generator,
    horizon: int = DEFAULT_HORIZON,
) -> FactChain:
    """Close the last fact at its effective end and append a fake successor."""
    fake = sample_fake_fact(chain, pool, rng, horizon)
    last = chain.facts[-1]
    closed = replace(last, t_end=last.effective_end(horizon))
    return FactChain(chain.subject, chain.relation, (*chain.facts[:-1], closed, fake))


# ---------------------------------------------------------------- records


def _closed(f: TemporalFact, horizon: int) -> TemporalFact:
    return f if f.t_end is not None else replace(f, t_end=f.effective_end(horizon))


def build_se(
    chain: FactChain, pack: TemplatePack, *, aliases: AliasTable | None = None, horizon: int = DEFAULT_HORIZON
) -> BenchRecord | None:
    if len(chain) < 2:
        log.debug("SE skip %s: chain too short", chain.chain_id)
        return None
    old, new = _closed(chain.facts[0], horizon), chain.facts[1]
    return BenchRecord(
        chain_id=chain.chain_id,
        kind="SE",
        subject=chain.subject,
        relation=chain.relation,
        edits=[EditOp.between(old, new)],
        questions_per_edit=[make_question_set(chain, 1, pack, aliases=aliases, horizon=horizon)],
    )


def build_me(
    chain: FactChain, pack: TemplatePack, *, aliases: AliasTable | None = None, horizon: int = DEFAULT_HORIZON
) -> BenchRecord | None:
    if len(chain) < 3:
        log.debug("ME skip %s: chain too short", chain.chain_id)
        return None
    facts = chain.facts
    edits = [EditOp.between(_closed(facts[k - 1], horizon), _closed(facts[k], horizon) if k < len(facts) - 1 else facts[k])
             for k in range(1, len(facts))]
    return BenchRecord(
        chain_id=chain.chain_id,
        kind="ME",
        subject=chain.subject,
        relation=chain.relation,
        edits=edits,
        questions_per_edit=[make_question_set(chain, k, pack, aliases=aliases, horizon=horizon) for k in range(1, len(facts))],
        final_historical_questions=[
            historical_explicit_question(f, pack, horizon=horizon, aliases=aliases) for f in facts[:-1]
        ],
    )


def build_ee(
    chain: FactChain,
    pack: TemplatePack,
    extension: int = 1,
    *,
    aliases: AliasTable | None = None,
    horizon: int = DEFAULT_HORIZON,
) -> BenchRecord | None:
    """Extend the first fact by ``extension`` years; current questions only.

    Explicit questions name the added years and query inside them.
    """
    if extension <= 0:
        raise ValueError(f"extension must be positive, got {extension}")
    if len(chain) < 1:
        return None
    first = chain.facts[0]
    old_end = first.effective_end(horizon)
    new_end = old_end + extension
    old = replace(first, t_end=old_end)
    new = replace(first, t_end=new_end)
    year = midpoint_year(old_end + 1, new_end)
    items = current_questions(new, pack, horizon=horizon, span=(old_end, new_end), year=year, aliases=aliases)
    return BenchRecord(
        chain_id=chain.chain_id,
        kind="EE",
        subject=chain.subject,
        relation=chain.relation,
        edits=[EditOp.between(old, new)],
        questions_per_edit=[items],
    )


@dataclass
class BuildResult:
    datasets: dict[str, list[BenchRecord]]
    chains: list[FactChain]
    skipped: dict[str, list[str]]

    def summary(self) -> dict:
        return {
            "chains": len(self.chains),
            **{f"{k}_records": len(v) for k, v in self.datasets.items()},
            **{f"skipped_{k}": len(v) for k, v in self.skipped.items()},
        }


def build_datasets(
    chains: Sequence[FactChain],
    pack: TemplatePack,
    *,
    model=None,
    seed: int = 0,
    horizon: int = DEFAULT_HORIZON,
    fake_facts: bool = True,
    extension: int = 1,
    aliases: AliasTable | None = None,
) -> BuildResult:
    """Build SE/ME/EE records for every usable chain.

    With a model, each chain is re-rooted at the latest fact the model
    recalls and chains it recalls nothing of are dropped; without one, the
    first fact is taken as model time. Fake successors are sampled per chain
    from a seed substream keyed by the chain id.
    """
    pools = object_pools(chains)
    skipped: dict[str, list[str]] = {"unlocated": [], "no_templates": [], "pool_exhausted": [], **{k: [] for k in KINDS}}
    prepared = []
    for chain in chains:
        if chain.relation not in pack:
            skipped["no_templates"].append(chain.chain_id)
            continue
        if model is not None:
            idx = locate_model_time(model, chain, horizon=horizon, aliases=aliases)
            if idx is None:
                skipped["unlocated"].append(chain.chain_id)
                continue
            chain = reroot(chain, idx)
        if fake_facts:
            rng = substream(seed, f"fake:{chain.chain_id}")
            try:
                chain = augment_chain(chain, pools[chain.relation], rng, horizon)
            except FakeFactError:
                skipped["pool_exhausted"].append(chain.chain_id)
        prepared.append(chain)

    datasets: dict[str, list[BenchRecord]] = {k: [] for k in KINDS}
    for chain in prepared:
        kw = dict(aliases=aliases, horizon=horizon)
        for kind, rec in (
            ("SE", build_se(chain, pack, **kw)),
            ("ME", build_me(chain, pack, **kw)),
            ("EE", build_ee(chain, pack, extension, **kw)),
        ):
            if rec is None:
                skipped[kind].append(chain.chain_id)
            else:
                datasets[kind].append(rec)
    return BuildResult(datasets, prepared, skipped)


# ---------------------------------------------------------------- io


def write_dataset(records: Iterable[BenchRecord], path: str | Path | IO[str], meta: Mapping | None = None) -> None:
    """One JSON record per line, preceded by a ``_meta`` line when given."""
    fp = open(path, "w", encoding="utf-8") if isinstance(path, (str, Path)) else path
    try:
        if meta is not None:
            fp.write(json.dumps({"_meta": dict(meta)}, sort_keys=True) + "\n")
        for rec in records:
            fp.write(json.dumps(rec.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
    finally:
        if fp is not path:
            fp.close()


def read_dataset(path: str | Path | IO[str]) -> list[BenchRecord]:
    fp = open(path, encoding="utf-8") if isinstance(path, (str, Path)) else path
    records = []
    try:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                if "_meta" in doc:
                    continue
                records.append(BenchRecord.from_json(doc))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
    finally:
        if fp is not path:
            fp.close()
    return records


def read_dataset_meta(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fp:
        first = fp.readline()
    try:
        return json.loads(first).get("_meta", {}) if first.strip() else {}
    except ValueError:
        return {}
