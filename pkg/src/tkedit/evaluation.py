"""Scoring edited models on benchmark records."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .bench_builder import BenchRecord, EditOp
from .questions import QUESTION_CLASSES, AliasTable, QAItem, match_answer

log = logging.getLogger(__name__)

METRICS = ("CES", "CES-P", "CRS", "HES", "HRS", "HES*")
EE_METRICS = ("CES", "CES-P", "CRS")

__all__ = [
    "METRICS",
    "MetricsReport",
    "RecordCounts",
    "aggregate",
    "compare_reports",
    "eval_record",
    "match_answer",
    "score_items",
]


@dataclass
class RecordCounts:
    kind: str
    asked: Counter = field(default_factory=Counter)
    correct: Counter = field(default_factory=Counter)
    per_edit: list[tuple[Counter, Counter]] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def add(self, cls: str, ok: bool) -> None:
        self.asked[cls] += 1
        self.correct[cls] += int(ok)


def score_items(model, items: Iterable[QAItem], aliases: AliasTable | None = None) -> tuple[Counter, Counter, list[str]]:
    """Answer each item; a failing query counts as wrong."""
    items = list(items)
    asked, correct, errors = Counter(), Counter(), []
    answers = None
    if hasattr(model, "query_batch"):
        try:
            answers = model.query_batch([item.query for item in items])
        except Exception:
            answers = None  # fall back to one at a time to isolate the failure
    for i, item in enumerate(items):
        try:
            pred = answers[i] if answers is not None else model.query(item.query)
            ok = match_answer(pred.object, item.gold, aliases if aliases is not None else item.aliases)
        except Exception as exc:
            errors.append(f"{item.text!r}: {exc}")
            log.warning("query failed for %r: %s", item.text, exc)
            ok = False
        asked[item.question_class] += 1
        correct[item.question_class] += int(ok)
    return asked, correct, errors


def eval_record(
    model,
    record: BenchRecord,
    aliases: AliasTable | None = None,
    edit_fn: Callable[[object, EditOp], object] | None = None,
) -> RecordCounts:
    """Count correct answers per question class for one record.

    Without ``edit_fn`` the model must already carry the record's edits.
    With it, ``edit_fn(model, edit)`` runs before each edit's questions,
    which is how multi-edit records are scored after every step. Multi-edit
    records additionally score every superseded fact after the last edit
    (HES*).
    """
    counts = RecordCounts(record.kind)
    for edit, items in zip(record.edits, record.questions_per_edit):
        if edit_fn is not None:
            edit_fn(model, edit)
        asked, correct, errors = score_items(model, items, aliases)
        counts.asked.update(asked)
        counts.correct.update(correct)
        counts.errors += errors
        if record.kind == "ME":
            counts.per_edit.append((asked, correct))
    if record.kind == "ME":
        asked, correct, errors = score_items(model, record.final_historical_questions, aliases)
        counts.asked["HES*"] += sum(asked.values())
        counts.correct["HES*"] += sum(correct.values())
        counts.errors += errors
    return counts


def _pct(correct: int, asked: int) -> float | None:
    return round(100.0 * correct / asked, 2) if asked else None


@dataclass
class MetricsReport:
    dataset_kind: str
    metrics: dict[str, float | None]
    counts: dict[str, tuple[int, int]]
    per_edit_breakdown: list[dict[str, float | None]] = field(default_factory=list)
    config_fingerprint: dict = field(default_factory=dict)

    def __getitem__(self, metric: str) -> float | None:
        return self.metrics.get(metric)

    def to_json(self) -> dict:
        return {
            "dataset_kind": self.dataset_kind,
            "metrics": self.metrics,
            "counts": {k: {"asked": a, "correct": c} for k, (a, c) in self.counts.items()},
            "per_edit_breakdown": self.per_edit_breakdown,
            "config_fingerprint": self.config_fingerprint,
        }

    def columns(self) -> tuple[str, ...]:
        if self.dataset_kind == "EE":
            return EE_METRICS
        if self.dataset_kind == "ME":
            return METRICS
        return METRICS[:5]

    def to_markdown(self, label: str = "") -> str:
        cols = self.columns()
        head = "| Method | " + " | ".join(cols) + " |"
        sep = "|---" * (len(cols) + 1) + "|"
        row = f"| {label or self.dataset_kind} | " + " | ".join(_fmt(self.metrics.get(c)) for c in cols) + " |"
        return "\n".join([head, sep, row])


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.2f}"


def aggregate(records: Sequence[RecordCounts], kind: str | None = None, fingerprint: dict | None = None) -> MetricsReport:
    """Micro-average each class over all question instances."""
    if not records:
        raise ValueError("nothing to aggregate")
    kind = kind or records[0].kind
    asked, correct = Counter(), Counter()
    for r in records:
        if r.kind != kind:
            raise ValueError(f"mixed dataset kinds {r.kind} / {kind}")
        asked.update(r.asked)
        correct.update(r.correct)
    allowed = EE_METRICS if kind == "EE" else (METRICS if kind == "ME" else METRICS[:5])
    metrics = {m: (_pct(correct[m], asked[m]) if m in allowed else None) for m in METRICS}
    counts = {m: (asked[m], correct[m]) for m in METRICS if m in allowed and asked[m]}

    breakdown = []
    if kind == "ME":
        depth = max(len(r.per_edit) for r in records)
        for k in range(depth):
            a, c = Counter(), Counter()
            for r in records:
                if k < len(r.per_edit):
                    a.update(r.per_edit[k][0])
                    c.update(r.per_edit[k][1])
            breakdown.append({"edit": k + 1, **{m: _pct(c[m], a[m]) for m in QUESTION_CLASSES}})
    return MetricsReport(kind, metrics, counts, breakdown, dict(fingerprint or {}))


@dataclass
class DeltaTable:
    dataset_kind: str
    baseline: MetricsReport
    enhanced: MetricsReport
    deltas: dict[str, float | None]

    def to_json(self) -> dict:
        return {
            "dataset_kind": self.dataset_kind,
            "baseline": self.baseline.metrics,
            "enhanced": self.enhanced.metrics,
            "deltas": self.deltas,
        }

    def to_markdown(self, label: str = "") -> str:
        cols = self.baseline.columns()
        cells = []
        for c in cols:
            v, dv = self.enhanced.metrics.get(c), self.deltas.get(c)
            if v is None or dv is None:
                cells.append("-")
            else:
                arrow = "↑" if dv > 0 else ("↓" if dv < 0 else "=")
                cells.append(f"{v:.2f}{arrow}{abs(dv):.2f}")
        head = "| Method | " + " | ".join(cols) + " |"
        sep = "|---" * (len(cols) + 1) + "|"
        return "\n".join([head, sep, f"| {label or self.dataset_kind} | " + " | ".join(cells) + " |"])


def compare_reports(baseline: MetricsReport, enhanced: MetricsReport) -> DeltaTable:
    """Signed per-metric change from ``baseline`` to ``enhanced``."""
    if baseline.dataset_kind != enhanced.dataset_kind:
        raise ValueError(f"cannot compare {baseline.dataset_kind} with {enhanced.dataset_kind}")
    deltas = {}
    for m in METRICS:
        a, b = baseline.metrics.get(m), enhanced.metrics.get(m)
        deltas[m] = None if a is None or b is None else round(b - a, 2)
    return DeltaTable(baseline.dataset_kind, baseline, enhanced, deltas)


def dumps_report(report: MetricsReport | DeltaTable) -> str:
    return json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n"
