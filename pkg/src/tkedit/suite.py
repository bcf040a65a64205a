"""End-to-end suite: corpus -> benchmark -> edit -> evaluate -> compare."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .bench_builder import KINDS, BenchRecord, BuildResult, build_datasets
from .corpus import CorpusConfig, generate_corpus
from .editors import METHODS, EditLog, EditorConfig, apply_edit
from .evaluation import MetricsReport, aggregate, compare_reports, eval_record
from .model import LamModel, ModelConfig, new_model
from .questions import DEFAULT_HORIZON, TemplatePack, builtin_pack
from .temporal_kb import FactChain, build_chains

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    d: int = 256
    lam: float = 0.1
    alpha: float = 0.25
    horizon: int = DEFAULT_HORIZON
    extension: int = 1
    fake_facts: bool = True
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    editor: EditorConfig = field(default_factory=EditorConfig)
    methods: tuple[str, ...] = METHODS
    pack: str = "default"
    shard_size: int = 100

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, seed=self.seed, lam=self.lam, alpha=self.alpha)

    def to_json(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["corpus"]["relations"] = list(self.corpus.relations)
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        if "corpus" in doc:
            c = dict(doc["corpus"])
            if "relations" in c:
                c["relations"] = tuple(c["relations"])
            doc["corpus"] = CorpusConfig(**c)
        if "editor" in doc:
            doc["editor"] = EditorConfig(**doc["editor"])
        if "methods" in doc:
            doc["methods"] = tuple(doc["methods"])
        return cls(**doc)


def run_meta(config: RunConfig) -> dict:
    return {"seed": config.seed, "config_fingerprint": config.fingerprint(), "tool_version": __version__}


def model_for_chains(chains: list[FactChain], config: RunConfig) -> LamModel:
    """Fresh model whose codebooks cover the chains; nothing stored yet."""
    entities = {c.subject for c in chains} | {o for c in chains for o in c.objects()}
    relations = {c.relation for c in chains}
    lo = min(f.t_start for c in chains for f in c.facts)
    return new_model(config.model_config(), entities, relations, (min(lo, config.horizon), config.horizon + config.extension))


def initialize_model_time(model: LamModel, chains: list[FactChain], horizon: int) -> LamModel:
    """Store the first fact of every chain as the model's current knowledge."""
    return model.initialize_from_facts([(c.facts[0], None) for c in chains], horizon)


@dataclass
class ShardedModel:
    """Initialized models over consecutive groups of chains.

    A d-dimensional memory holds on the order of d*4 associations reliably,
    so a large corpus is split into shards and every record is edited on a
    copy of the model that knows its own chain's shard.
    """

    shards: list[LamModel]
    index: dict[str, int]

    def for_chain(self, chain_id: str) -> LamModel:
        return self.shards[self.index[chain_id]]

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for m in self.shards:
            h.update(m.state_hash().encode())
        return h.hexdigest()


def initialize_sharded(model: LamModel, chains: list[FactChain], horizon: int, shard_size: int) -> ShardedModel:
    if shard_size < 1:
        raise ValueError("shard_size must be positive")
    shards, index = [], {}
    for start in range(0, len(chains), shard_size):
        group = chains[start : start + shard_size]
        shards.append(initialize_model_time(model.copy(), group, horizon))
        for c in group:
            index[c.chain_id] = len(shards) - 1
    return ShardedModel(shards, index)


def prepare(config: RunConfig, pack: TemplatePack | None = None) -> tuple[BuildResult, ShardedModel]:
    pack = pack or builtin_pack(config.pack)
    facts = generate_corpus(config.seed, config.corpus)
    chains, _ = build_chains(facts)
    built = build_datasets(
        chains, pack, seed=config.seed, horizon=config.horizon, fake_facts=config.fake_facts, extension=config.extension
    )
    model = initialize_sharded(model_for_chains(built.chains, config), built.chains, config.horizon, config.shard_size)
    return built, model


def evaluate_cell(
    base: LamModel | ShardedModel,
    records: list[BenchRecord],
    editor: EditorConfig,
    horizon: int,
    fingerprint: dict | None = None,
) -> tuple[MetricsReport, EditLog]:
    """Edit a private copy of the base model per record and score it."""
    counts = []
    elog = EditLog()
    shards = base.shards if isinstance(base, ShardedModel) else [base]
    # computed once here and shared by the per-record copies
    for m in shards:
        if editor.method == "r1":
            m.cov_inverse()
        elif editor.method == "batch":
            m.cov_inverse(editor.cov_weight, editor.ridge)

    def edit_fn(model, op):
        elog.extend(apply_edit(model, op, editor, horizon=horizon))

    for rec in records:
        model = base.for_chain(rec.chain_id) if isinstance(base, ShardedModel) else base
        counts.append(eval_record(model.copy(), rec, edit_fn=edit_fn))
    fp = dict(fingerprint or {})
    fp["edit_log_sha256"] = elog.digest()
    return aggregate(counts, records[0].kind, fp), elog


@dataclass
class SuiteResult:
    reports: dict[tuple[str, bool, str], MetricsReport]
    deltas: dict[tuple[str, str], object]
    summary: dict
    seconds: float

    def report(self, method: str, meto: bool, kind: str) -> MetricsReport:
        return self.reports[(method, meto, kind)]

    def to_json(self) -> dict:
        return {
            "summary": self.summary,
            "reports": {f"{m}{'+meto' if meto else ''}/{k}": r.to_json() for (m, meto, k), r in sorted(self.reports.items())},
            "deltas": {f"{m}/{k}": d.to_json() for (m, k), d in sorted(self.deltas.items())},
        }

    def to_markdown(self) -> str:
        out = []
        for kind in KINDS:
            rows = [(m, meto) for m in sorted({k[0] for k in self.reports}) for meto in (False, True)]
            rows = [(m, meto) for m, meto in rows if (m, meto, kind) in self.reports]
            if not rows:
                continue
            out.append(f"### {kind}\n")
            first = self.reports[(rows[0][0], rows[0][1], kind)]
            lines = first.to_markdown(rows[0][0]).splitlines()[:2]
            for m, meto in rows:
                if meto and (m, kind) in self.deltas:
                    lines.append(self.deltas[(m, kind)].to_markdown(m + "+").splitlines()[2])
                else:
                    lines.append(self.reports[(m, meto, kind)].to_markdown(m + ("+" if meto else "")).splitlines()[2])
            out.append("\n".join(lines) + "\n")
        return "\n".join(out)


def run_suite(config: RunConfig, *, kinds=KINDS, out_dir: str | Path | None = None) -> SuiteResult:
    """Every method with and without the multi-edit wrapper on every dataset.

    A failing cell is recorded under ``summary["errors"]`` and the remaining
    cells still run, so partial results are written.
    """
    t0 = time.perf_counter()
    built, base = prepare(config)
    meta = run_meta(config)
    model_hash = base.state_hash()
    reports, deltas, errors = {}, {}, []
    for method in config.methods:
        for meto in (False, True):
            editor = replace(config.editor, method=method, meto=meto)
            for kind in kinds:
                records = built.datasets[kind]
                if not records:
                    continue
                fp = {**meta, "editor": editor.fingerprint(), "model_init_sha256": model_hash}
                try:
                    reports[(method, meto, kind)], _ = evaluate_cell(base, records, editor, config.horizon, fp)
                except Exception as exc:
                    log.exception("%s%s %s failed", method, "+meto" if meto else "", kind)
                    errors.append(f"{method}{'+meto' if meto else ''}/{kind}: {exc}")
                    continue
                log.info("%s%s %s: %s", method, "+meto" if meto else "", kind, reports[(method, meto, kind)].metrics)
        for kind in kinds:
            if (method, False, kind) in reports and (method, True, kind) in reports:
                deltas[(method, kind)] = compare_reports(reports[(method, False, kind)], reports[(method, True, kind)])
    summary = {**meta, "config": config.to_json(), **built.summary()}
    if errors:
        summary["errors"] = errors
    result = SuiteResult(reports, deltas, summary, time.perf_counter() - t0)
    if out_dir is not None:
        write_suite(result, out_dir)
    return result


def write_suite(result: SuiteResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "suite.json").write_text(json.dumps(result.to_json(), indent=1, sort_keys=True) + "\n")
    (out / "suite.md").write_text(result.to_markdown())
