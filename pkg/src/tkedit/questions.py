"""Question templates, rendering, and per-edit question sets."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from importlib import resources
from typing import IO, Iterable, Union

from .temporal_kb import FactChain, TemporalFact

MODES = ("explicit", "relative_current", "relative_previous")
SLOTS = frozenset({"s", "o", "ts", "tu"})
DEFAULT_HORIZON = 2028

CURRENT = "current"
PREVIOUS = "previous"
TimeRef = Union[int, str]

QUESTION_CLASSES = ("CES", "CES-P", "CRS", "HES", "HRS")

# historical explicit questions use the first paraphrase (past-tense form);
# the canonical variant is reserved for the current fact
HISTORICAL_VARIANT = 1


class TemplateError(ValueError):
    pass


class RenderError(ValueError):
    pass


def _slots(pattern: str) -> set[str]:
    try:
        return {name for _, name, _, _ in string.Formatter().parse(pattern) if name is not None}
    except ValueError as exc:
        raise TemplateError(f"bad pattern {pattern!r}: {exc}") from None


@dataclass(frozen=True)
class QuestionTemplate:
    relation: str
    mode: str
    variant: int
    pattern: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise TemplateError(f"unknown mode {self.mode!r}")
        if self.variant < 0:
            raise TemplateError("variant must be >= 0")
        slots = _slots(self.pattern)
        if slots - SLOTS:
            raise TemplateError(f"unknown slots {sorted(slots - SLOTS)} in {self.pattern!r}")
        timed = bool(slots & {"ts", "tu"})
        if self.mode == "explicit" and not timed:
            raise TemplateError(f"explicit template without {{ts}}/{{tu}}: {self.pattern!r}")
        if self.mode != "explicit" and timed:
            raise TemplateError(f"relative template with a time slot: {self.pattern!r}")


@dataclass(frozen=True)
class StructuredQuery:
    subject: str
    relation: str
    time_ref: TimeRef

    def __post_init__(self):
        if isinstance(self.time_ref, bool) or not (
            isinstance(self.time_ref, int) or self.time_ref in (CURRENT, PREVIOUS)
        ):
            raise ValueError(f"bad time_ref {self.time_ref!r}")

    @property
    def is_explicit(self) -> bool:
        return isinstance(self.time_ref, int)

    def to_json(self) -> dict:
        return {"s": self.subject, "r": self.relation, "time_ref": self.time_ref}

    @classmethod
    def from_json(cls, d: dict) -> "StructuredQuery":
        return cls(d["s"], d["r"], d["time_ref"])


def classify(knowledge_tag: str, time_ref: TimeRef, variant: int) -> str:
    explicit = isinstance(time_ref, int)
    if knowledge_tag == "current":
        if explicit:
            return "CES" if variant == 0 else "CES-P"
        if time_ref == CURRENT:
            return "CRS"
    elif knowledge_tag == "historical":
        if explicit:
            return "HES"
        if time_ref == PREVIOUS:
            return "HRS"
    raise ValueError(f"no question class for ({knowledge_tag}, {time_ref!r})")


@dataclass(frozen=True)
class QAItem:
    text: str
    query: StructuredQuery
    gold: str
    aliases: tuple[str, ...]
    knowledge_tag: str
    question_class: str
    variant: int = 0

    def __post_init__(self):
        expected = classify(self.knowledge_tag, self.query.time_ref, self.variant)
        if expected != self.question_class:
            raise ValueError(f"question_class {self.question_class} should be {expected}")

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "query": self.query.to_json(),
            "gold": self.gold,
            "aliases": list(self.aliases),
            "knowledge_tag": self.knowledge_tag,
            "question_class": self.question_class,
            "variant": self.variant,
        }

    @classmethod
    def from_json(cls, d: dict) -> "QAItem":
        return cls(
            text=d["text"],
            query=StructuredQuery.from_json(d["query"]),
            gold=d["gold"],
            aliases=tuple(d["aliases"]),
            knowledge_tag=d["knowledge_tag"],
            question_class=d["question_class"],
            variant=d.get("variant", 0),
        )


# ---------------------------------------------------------------- aliases


def normalize(text: str) -> str:
    return " ".join(str(text).lower().split())


def default_aliases(entity: str) -> set[str]:
    return {normalize(entity), normalize(entity.replace("_", " "))}


@dataclass
class AliasTable:
    """Entity id -> extra normalized aliases (defaults are always added)."""

    table: dict[str, set[str]] = field(default_factory=dict)

    def add(self, entity: str, alias: str) -> None:
        self.table.setdefault(entity, set()).add(normalize(alias))

    def aliases(self, entity: str) -> set[str]:
        return default_aliases(entity) | self.table.get(entity, set())

    def __contains__(self, entity: str) -> bool:
        return entity in self.table


def match_answer(predicted: str, gold: str, aliases: AliasTable | Iterable[str] | None = None) -> bool:
    """Alias-aware exact match after lowercasing and whitespace collapsing."""
    if isinstance(aliases, AliasTable):
        accepted = aliases.aliases(gold)
    else:
        accepted = default_aliases(gold) | {normalize(a) for a in (aliases or ())}
    return normalize(predicted) in accepted


def load_alias_table(fp: IO[str] | Iterable[str]) -> AliasTable:
    """Two tab-separated columns: entity id, alias."""
    table = AliasTable()
    for lineno, line in enumerate(fp, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"alias table line {lineno}: expected 2 columns")
        table.add(parts[0].strip(), parts[1])
    return table


# ---------------------------------------------------------------- packs


class TemplatePack:
    """Immutable collection of templates indexed by (relation, mode)."""

    def __init__(self, templates: Iterable[QuestionTemplate]):
        index: dict[tuple[str, str], dict[int, QuestionTemplate]] = {}
        for t in templates:
            slot = index.setdefault((t.relation, t.mode), {})
            if t.variant in slot:
                raise TemplateError(f"duplicate variant {t.variant} for {t.relation}/{t.mode}")
            slot[t.variant] = t
        self._index = {k: tuple(v[i] for i in sorted(v)) for k, v in index.items()}
        self.relations = tuple(sorted({r for r, _ in self._index}))
        for r in self.relations:
            for mode in MODES:
                if (r, mode) not in self._index:
                    raise TemplateError(f"relation {r!r}: missing mode {mode}")
            if len(self._index[(r, "explicit")]) < 2:
                raise TemplateError(f"relation {r!r}: explicit mode needs a paraphrase variant")
            if self._index[(r, "explicit")][0].variant != 0:
                raise TemplateError(f"relation {r!r}: explicit mode has no variant 0")

    def __len__(self) -> int:
        return sum(len(v) for v in self._index.values())

    def __iter__(self):
        for k in sorted(self._index):
            yield from self._index[k]

    def __contains__(self, relation: str) -> bool:
        return relation in self.relations

    def get(self, relation: str, mode: str) -> tuple[QuestionTemplate, ...]:
        try:
            return self._index[(relation, mode)]
        except KeyError:
            raise TemplateError(f"no {mode} templates for relation {relation!r}") from None

    def canonical(self, relation: str, mode: str) -> QuestionTemplate:
        return self.get(relation, mode)[0]

    def historical_explicit(self, relation: str) -> QuestionTemplate:
        ts = self.get(relation, "explicit")
        return next((t for t in ts if t.variant == HISTORICAL_VARIANT), ts[0])


def load_template_pack(source: IO[str] | Iterable[str]) -> TemplatePack:
    """Parse ``relation<TAB>mode<TAB>variant<TAB>pattern`` records."""
    templates = []
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise TemplateError(f"line {lineno}: expected 4 tab-separated fields")
        relation, mode, variant, pattern = parts
        try:
            templates.append(QuestionTemplate(relation.strip(), mode.strip(), int(variant), pattern))
        except (TemplateError, ValueError) as exc:
            raise TemplateError(f"line {lineno}: {exc}") from None
    return TemplatePack(templates)


def builtin_pack(name: str = "default") -> TemplatePack:
    """Load a shipped pack: ``default`` or ``synthetic``."""
    ref = resources.files("tkedit") / "data" / f"templates_{name}.tsv"
    with ref.open("r", encoding="utf-8") as fp:
        return load_template_pack(fp)


# ---------------------------------------------------------------- rendering


def display(entity: str) -> str:
    return entity.replace("_", " ")


def midpoint_year(t_start: int, t_end: int) -> int:
    return (t_start + t_end) // 2


def render_question(
    template: QuestionTemplate,
    fact: TemporalFact,
    *,
    knowledge_tag: str | None = None,
    horizon: int = DEFAULT_HORIZON,
    span: tuple[int, int] | None = None,
    year: int | None = None,
    aliases: AliasTable | None = None,
) -> QAItem:
    """Fill a template from a fact.

    Explicit templates render ``span`` (default: the fact's span, open ends
    read as ``horizon``) and query the year ``year`` (default: the span
    midpoint). The gold answer is always ``fact.object``; for previous-term
    questions pass the predecessor fact.
    """
    if template.relation != fact.relation:
        raise RenderError(f"template relation {template.relation} != fact relation {fact.relation}")
    if knowledge_tag is None:
        knowledge_tag = "historical" if template.mode == "relative_previous" else "current"
    ts, tu = span if span is not None else (fact.t_start, fact.effective_end(horizon))
    values = {"s": display(fact.subject), "o": display(fact.object) if fact.object else None, "ts": ts, "tu": tu}
    needed = _slots(template.pattern)
    missing = [k for k in needed if values.get(k) is None]
    if missing:
        raise RenderError(f"unfilled slots {missing} for {template.pattern!r}")
    text = template.pattern.format(**{k: values[k] for k in needed})

    if template.mode == "explicit":
        time_ref: TimeRef = year if year is not None else midpoint_year(ts, tu)
    elif template.mode == "relative_current":
        time_ref = CURRENT
    else:
        time_ref = PREVIOUS
    query = StructuredQuery(fact.subject, fact.relation, time_ref)
    alias_set = (aliases or AliasTable()).aliases(fact.object)
    return QAItem(
        text=text,
        query=query,
        gold=fact.object,
        aliases=tuple(sorted(alias_set)),
        knowledge_tag=knowledge_tag,
        question_class=classify(knowledge_tag, time_ref, template.variant),
        variant=template.variant,
    )


def current_questions(
    fact: TemporalFact,
    pack: TemplatePack,
    *,
    horizon: int = DEFAULT_HORIZON,
    span: tuple[int, int] | None = None,
    year: int | None = None,
    aliases: AliasTable | None = None,
) -> list[QAItem]:
    """CES (variant 0), CES-P (variants >= 1) and CRS items about ``fact``."""
    kw = dict(horizon=horizon, aliases=aliases)
    items = [
        render_question(t, fact, knowledge_tag="current", span=span, year=year, **kw)
        for t in pack.get(fact.relation, "explicit")
    ]
    items += [render_question(t, fact, knowledge_tag="current", **kw) for t in pack.get(fact.relation, "relative_current")]
    return items


def historical_explicit_question(
    fact: TemporalFact, pack: TemplatePack, *, horizon: int = DEFAULT_HORIZON, aliases: AliasTable | None = None
) -> QAItem:
    return render_question(
        pack.historical_explicit(fact.relation), fact, knowledge_tag="historical", horizon=horizon, aliases=aliases
    )


def make_question_set(
    chain: FactChain,
    edit_index: int,
    pack: TemplatePack,
    *,
    aliases: AliasTable | None = None,
    horizon: int = DEFAULT_HORIZON,
    current_only: bool = False,
) -> list[QAItem]:
    """Questions for the edit that installs ``chain.facts[edit_index]``.

    Current items target that fact; historical items (HES, HRS) target the
    fact right before it.
    """
    lo = 0 if current_only else 1
    if not lo <= edit_index < len(chain):
        raise IndexError(f"edit_index {edit_index} out of range for chain of length {len(chain)}")
    cur = chain.facts[edit_index]
    items = current_questions(cur, pack, horizon=horizon, aliases=aliases)
    if current_only:
        return items
    prev = chain.facts[edit_index - 1]
    items.append(historical_explicit_question(prev, pack, horizon=horizon, aliases=aliases))
    items += [
        render_question(t, prev, knowledge_tag="historical", horizon=horizon, aliases=aliases)
        for t in pack.get(cur.relation, "relative_previous")
    ]
    return items
