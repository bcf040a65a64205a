"""Knowledge editors over the linear associative memory.

Edits are compiled into (key, value) targets and written by one of three
methods: norm-constrained fine-tuning (``cft``), sequential rank-one
insertion (``r1``) or a joint closed-form batch solve (``batch``). The
multi-edit + time-objective wrapper (``meto``) re-asserts the superseded
fact next to the new one and adds span-prediction targets.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bench_builder import EditOp, locate_model_time
from .model import SPAN_END, SPAN_START, LamModel
from .questions import CURRENT, DEFAULT_HORIZON, PREVIOUS, AliasTable
from .temporal_kb import FactChain, TemporalFact

log = logging.getLogger(__name__)

METHODS = ("cft", "r1", "batch")
TAGS = ("current_object", "historical_object", "current_relative", "previous_relative", "span_start", "span_end")


class EditError(RuntimeError):
    pass


class CapacityError(EditError):
    pass


class ExtractionError(EditError):
    pass


@dataclass(frozen=True)
class EditTarget:
    key: np.ndarray
    value: np.ndarray
    tag: str
    provenance: tuple
    step: int = 0

    def describe(self) -> dict:
        return {"target_tag": self.tag, "provenance": list(self.provenance), "step": self.step}


@dataclass
class MetoTargets:
    c_m: list[TemporalFact]
    c_m_plus: list[TemporalFact]
    c_t: list[EditTarget] = field(default_factory=list)

    def steps(self) -> list[list[EditTarget]]:
        out: dict[int, list[EditTarget]] = {}
        for t in self.c_t:
            out.setdefault(t.step, []).append(t)
        return [out[k] for k in sorted(out)]


@dataclass(frozen=True)
class EditorConfig:
    method: str = "r1"
    steps: int = 50
    learning_rate: float = 0.05
    norm_budget: float = 1.0
    ridge: float = 1e-3
    cov_weight: float = 0.001
    meto: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.norm_budget > 0:
            raise ValueError("norm_budget must be > 0")
        if self.ridge < 0 or not self.cov_weight > 0:
            raise ValueError("ridge must be >= 0 and cov_weight > 0")

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- compilation


def _object_targets(model, fact: TemporalFact, years: Iterable[int], tag: str, step: int) -> list[EditTarget]:
    s, r, o = fact.subject, fact.relation, fact.object
    value = model.object_vector(o)
    return [EditTarget(model.encode_obj_key(s, r, y), value, tag, (s, r, o, y), step) for y in years]


def _relative_target(model, fact: TemporalFact, token: str, step: int) -> EditTarget:
    s, r, o = fact.subject, fact.relation, fact.object
    tag = "current_relative" if token == CURRENT else "previous_relative"
    return EditTarget(model.encode_obj_key(s, r, token), model.object_vector(o), tag, (s, r, o, token), step)


def _span_targets(model, fact: TemporalFact, start: int, end: int, step: int, which=("start", "end")) -> list[EditTarget]:
    s, r, o = fact.subject, fact.relation, fact.object
    out = []
    if "start" in which:
        out.append(EditTarget(model.encode_span_key(s, r, o, SPAN_START), model.year_vector(start), "span_start", (s, r, o, "start", start), step))
    if "end" in which:
        out.append(EditTarget(model.encode_span_key(s, r, o, SPAN_END), model.year_vector(end), "span_end", (s, r, o, "end", end), step))
    return out


def _years(model, a: int, b: int) -> range:
    return range(model.clip_year(a), model.clip_year(b) + 1)


def compile_targets(
    edit: EditOp, model: LamModel, mode: str = "baseline", *, horizon: int = DEFAULT_HORIZON, step: int = 0
) -> list[EditTarget]:
    """New-knowledge targets for one edit.

    Nothing is emitted for the superseded fact. An extending edit writes
    only the added years, the CURRENT pointer and the new span end.
    """
    if mode not in ("baseline", "meto_current_part"):
        raise ValueError(f"unknown compile mode {mode!r}")
    new = edit.new_fact()
    end = model.clip_year(new.effective_end(horizon))
    if edit.is_extending:
        targets = _object_targets(model, new, _years(model, edit.old.t_end + 1, end), "current_object", step)
        targets.append(_relative_target(model, new, CURRENT, step))
        targets += _span_targets(model, new, new.t_start, end, step, which=("end",))
        return targets
    targets = _object_targets(model, new, _years(model, new.t_start, end), "current_object", step)
    targets.append(_relative_target(model, new, CURRENT, step))
    targets += _span_targets(model, new, model.clip_year(new.t_start), end, step)
    return targets


def meto_extract(
    model: LamModel,
    chain: FactChain,
    *,
    horizon: int = DEFAULT_HORIZON,
    aliases: AliasTable | None = None,
) -> MetoTargets:
    """Split a chain into the model-time fact and everything after it."""
    idx = locate_model_time(model, chain, horizon=horizon, aliases=aliases)
    if idx is None:
        raise ExtractionError(f"{chain.chain_id}: model recalls no fact of the chain")
    return MetoTargets(c_m=[chain.facts[idx]], c_m_plus=list(chain.facts[idx + 1 :]))


def _step_targets(model, old: TemporalFact, new: TemporalFact, step: int, horizon: int) -> list[EditTarget]:
    o_start = model.clip_year(old.t_start)
    o_end = model.clip_year(old.effective_end(horizon))
    # years shared with the successor's start belong to the successor
    hist_last = min(o_end, new.t_start - 1)
    hist_years = _years(model, o_start, hist_last) if hist_last >= o_start else range(o_start, o_start + 1)
    n_start = model.clip_year(new.t_start)
    n_end = model.clip_year(new.effective_end(horizon))

    targets = _object_targets(model, old, hist_years, "historical_object", step)
    targets.append(_relative_target(model, old, PREVIOUS, step))
    targets += _object_targets(model, new, _years(model, n_start, n_end), "current_object", step)
    targets.append(_relative_target(model, new, CURRENT, step))
    # time objective: span targets for both facts, same editor
    targets += _span_targets(model, old, o_start, o_end, step)
    targets += _span_targets(model, new, n_start, n_end, step)
    return targets


def meto_compile(targets: MetoTargets, model: LamModel, *, horizon: int = DEFAULT_HORIZON) -> MetoTargets:
    """Fill ``c_t`` one chain step at a time.

    Step k re-asserts fact k-1 as history (its years, PREVIOUS, its span)
    and installs fact k (its years, CURRENT, its span).
    """
    if not targets.c_m:
        raise ExtractionError("no model-time fact to compile")
    c_t: list[EditTarget] = []
    if not targets.c_m_plus:
        for f in targets.c_m:
            end = model.clip_year(f.effective_end(horizon))
            start = model.clip_year(f.t_start)
            c_t += _object_targets(model, f, _years(model, start, end), "historical_object", 0)
            c_t.append(_relative_target(model, f, CURRENT, 0))
            c_t += _span_targets(model, f, start, end, 0)
        return MetoTargets(targets.c_m, targets.c_m_plus, c_t)
    seq = [targets.c_m[-1], *targets.c_m_plus]
    for k in range(1, len(seq)):
        c_t += _step_targets(model, seq[k - 1], seq[k], k - 1, horizon)
    return MetoTargets(targets.c_m, targets.c_m_plus, c_t)


# ---------------------------------------------------------------- editors


def _stack(targets: Sequence[EditTarget]) -> tuple[np.ndarray, np.ndarray]:
    K = np.stack([t.key for t in targets], axis=1)
    V = np.stack([t.value for t in targets], axis=1)
    return K, V


def edit_cft(model: LamModel, targets: Sequence[EditTarget], config: EditorConfig) -> dict:
    """Gradient descent on sum ||Wk - v||^2, projecting W - W0 onto a Frobenius ball.

    Starting from W0, every iterate has the form W0 + R0 P K^T with R0 the
    initial residual and P an m x m matrix, so the descent runs on P alone.
    """
    if not targets:
        raise EditError("no targets")
    K, V = _stack(targets)
    m = K.shape[1]
    G = K.T @ K
    R0 = model.W @ K - V
    H = R0.T @ R0
    eye = np.eye(m)
    P = np.zeros((m, m))
    eps = config.norm_budget
    step = 2.0 * config.learning_rate
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught below
        for _ in range(config.steps):
            P = P - step * (eye + P @ G)  # gradient residual R = R0 (I + P G)
            # ||R0 P K^T||_F^2 = tr(P G P^T H) = sum((P G) * (H P))
            norm = float(np.sqrt(max(np.sum((P @ G) * (H @ P)), 0.0)))
            if norm > eps:
                P *= eps / norm
            elif not np.isfinite(norm):
                raise EditError("non-finite loss during fine-tuning; edit aborted")
    model.update_W(R0 @ P @ K.T)
    return {}


def edit_r1(model: LamModel, targets: Sequence[EditTarget], config: EditorConfig) -> dict:
    """Insert targets one at a time with covariance-preconditioned rank-one updates.

    Working covariance starts at ``cov_weight * C`` and absorbs each inserted
    key (Sherman-Morrison on its inverse), so later targets in the same edit
    avoid overwriting earlier ones. ``C`` itself gains all keys at the end.

    Both the working inverse and W are kept as low-rank corrections of their
    starting values, so each target costs O(d * i) rather than O(d^2).
    """
    if not targets:
        raise EditError("no targets")
    A0 = model.cov_inverse() / config.cov_weight
    W0 = model.W
    d = model.d
    n = len(targets)
    U = np.zeros((d, n))  # inserted u vectors; A_inv = A0 - U diag(c) U^T
    c = np.zeros(n)
    R = np.zeros((d, n))  # W = W0 + R (U / denom)^T
    P = np.zeros((d, n))  # u / denom
    skipped = []
    inserted = []
    j = 0
    for i, t in enumerate(targets):
        k, v = t.key, t.value
        u = A0 @ k
        if j:
            u -= U[:, :j] @ (c[:j] * (U[:, :j].T @ k))
        denom = float(u @ k)
        if abs(denom) < 1e-12:
            log.warning("r1: singular direction for target %s, skipped", t.provenance)
            skipped.append(i)
            continue
        wk = W0 @ k
        if j:
            wk += R[:, :j] @ (P[:, :j].T @ k)
        R[:, j] = v - wk
        P[:, j] = u / denom
        U[:, j] = u
        c[j] = 1.0 / (1.0 + denom)
        inserted.append(k)
        j += 1
    model.update_W(R[:, :j] @ P[:, :j].T)
    if inserted:
        model.add_keys(np.stack(inserted, axis=1))
    return {"skipped": skipped}


def edit_batch(model: LamModel, targets: Sequence[EditTarget], config: EditorConfig) -> dict:
    """Joint closed form: dW = R K^T (cov_weight*C + K K^T + ridge*I)^-1.

    Uses the cached inverse of ``cov_weight*C + ridge*I`` and Woodbury, which
    reduces the solve to an m x m system.
    """
    if not targets:
        raise EditError("no targets")
    K, V = _stack(targets)
    d, m = K.shape
    if m > d:
        raise CapacityError(f"{m} targets exceed dimension {d}")
    R = V - model.W @ K
    M_inv = model.cov_inverse(config.cov_weight, config.ridge)
    G = M_inv @ K
    S = np.eye(m) + K.T @ G
    # K^T (M + K K^T)^-1 = S^-1 G^T
    Xt = np.linalg.solve(S, G.T)
    info = {}
    X = Xt.T
    AX = config.cov_weight * model.cov_apply(X) + K @ (K.T @ X) + config.ridge * X
    rel = np.linalg.norm(AX - K) / max(np.linalg.norm(K), 1e-300)
    if not np.isfinite(rel) or rel > 1e-6:
        info["warning"] = f"solve relative residual {rel:.2e}"
        log.warning("batch: %s", info["warning"])
    model.update_W(R @ Xt)
    model.add_keys(K)
    return info


EDITORS = {"cft": edit_cft, "r1": edit_r1, "batch": edit_batch}


# ---------------------------------------------------------------- driver


@dataclass
class EditLog:
    entries: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def extend(self, other: "EditLog") -> None:
        self.entries += other.entries
        self.warnings += other.warnings

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def _residuals(model: LamModel, targets: Sequence[EditTarget]) -> np.ndarray:
    K, V = _stack(targets)
    return np.linalg.norm(model.W @ K - V, axis=0)


def run_editor(model: LamModel, targets: Sequence[EditTarget], config: EditorConfig) -> EditLog:
    """Apply one target list with the configured method and log residuals."""
    elog = EditLog()
    if not targets:
        return elog
    pre = _residuals(model, targets)
    info = EDITORS[config.method](model, targets, config)
    post = _residuals(model, targets)
    skipped = set(info.get("skipped", ()))
    if "warning" in info:
        elog.warnings.append(info["warning"])
    for i, t in enumerate(targets):
        entry = t.describe()
        entry.update(pre_residual=round(float(pre[i]), 12), post_residual=round(float(post[i]), 12), skipped=i in skipped)
        elog.entries.append(entry)
    return elog


def targets_for_edit(edit: EditOp, model: LamModel, config: EditorConfig, *, horizon: int = DEFAULT_HORIZON) -> list[EditTarget]:
    if not config.meto or edit.is_extending:
        return compile_targets(edit, model, "baseline", horizon=horizon)
    mt = MetoTargets(c_m=[edit.old_fact()], c_m_plus=[edit.new_fact()])
    return meto_compile(mt, model, horizon=horizon).c_t


def apply_edit(
    model: LamModel,
    edit_or_chain: EditOp | FactChain | Sequence[EditOp],
    config: EditorConfig,
    *,
    horizon: int = DEFAULT_HORIZON,
    aliases: AliasTable | None = None,
) -> EditLog:
    """Edit ``model`` in place; on any failure W and C are restored.

    An :class:`EditOp` states its own model-time fact. A chain is located
    against the model first (METO) or edited step by step from its first
    fact (baseline). A sequence of edits is applied in order.
    """
    saved = model.snapshot()
    elog = EditLog()
    try:
        if isinstance(edit_or_chain, EditOp):
            elog.extend(run_editor(model, targets_for_edit(edit_or_chain, model, config, horizon=horizon), config))
        elif isinstance(edit_or_chain, FactChain):
            chain = edit_or_chain
            if config.meto:
                mt = meto_compile(meto_extract(model, chain, horizon=horizon, aliases=aliases), model, horizon=horizon)
                for step in mt.steps():
                    elog.extend(run_editor(model, step, config))
            else:
                for a, b in zip(chain.facts, chain.facts[1:]):
                    closed = a if a.t_end is not None else TemporalFact(a.subject, a.relation, a.object, a.t_start, b.t_start)
                    op = EditOp.between(closed, b)
                    elog.extend(run_editor(model, compile_targets(op, model, horizon=horizon), config))
        else:
            for op in edit_or_chain:
                elog.extend(run_editor(model, targets_for_edit(op, model, config, horizon=horizon), config))
    except Exception:
        model.restore(saved)
        raise
    return elog
