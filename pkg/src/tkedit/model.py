"""Linear associative memory used as the editable knowledge model.

Keys are normalized sums of codebook vectors, values are codebook vectors,
and ``W`` maps one to the other. ``C`` is the key second moment
``sum(k k^T) + lam*I`` that the editors use as a preconditioner.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .questions import CURRENT, PREVIOUS, StructuredQuery
from .temporal_kb import TemporalFact

FORMAT_VERSION = 1
MAGIC = b"TKLAM\x00"

TOKEN_CURRENT = "CURRENT"
TOKEN_PREVIOUS = "PREVIOUS"
SPAN_START = "SPAN_START"
SPAN_END = "SPAN_END"
SPECIAL_TOKENS = (TOKEN_CURRENT, TOKEN_PREVIOUS, SPAN_START, SPAN_END)

LOW_CONFIDENCE = 0.3


class ConfigError(ValueError):
    pass


class EncodingError(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 256
    seed: int = 0
    lam: float = 0.1
    alpha: float = 0.25

    def __post_init__(self):
        if self.d < 32:
            raise ConfigError(f"d={self.d} is below 32; retrieval is unreliable")
        if not self.lam > 0:
            raise ConfigError("lam must be > 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")


def _unit_vector(d: int, seed: int, namespace: str, key: str) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x1f{namespace}\x1f{key}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


class Codebook:
    """Deterministic unit vectors, one per id, as rows of ``matrix``."""

    def __init__(self, d: int, seed: int, namespace: str, ids: Iterable):
        self.d, self.seed, self.namespace = d, seed, namespace
        self.ids: list = list(dict.fromkeys(ids))
        self.index = {k: i for i, k in enumerate(self.ids)}
        self.matrix = np.array([_unit_vector(d, seed, namespace, str(k)) for k in self.ids]).reshape(len(self.ids), d)
        self.matrix.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key) -> bool:
        return key in self.index

    def __getitem__(self, key) -> np.ndarray:
        try:
            return self.matrix[self.index[key]]
        except KeyError:
            raise EncodingError(f"unknown {self.namespace} id {key!r}") from None

    def rows(self, keys: Sequence) -> np.ndarray:
        try:
            return self.matrix[[self.index[k] for k in keys]]
        except KeyError as exc:
            raise EncodingError(f"unknown {self.namespace} id {exc.args[0]!r}") from None


@dataclass(frozen=True)
class Answer:
    object: str
    score: float
    runner_up_margin: float


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    start_score: float
    end_score: float

    @property
    def low_confidence(self) -> bool:
        return min(self.start_score, self.end_score) < LOW_CONFIDENCE

    def __contains__(self, year: int) -> bool:
        return self.start <= year <= self.end


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _frozen(a: np.ndarray, d: int, owned: bool = False) -> np.ndarray:
    """Read-only float64 matrix; copied unless the caller hands over ``a``."""
    if not (owned and a.dtype == np.float64 and a.flags.owndata):
        a = np.array(a, dtype=np.float64)
    if a.shape != (d, d):
        raise ValueError(f"expected a {d}x{d} matrix, got {a.shape}")
    a.setflags(write=False)
    return a


class LamModel:
    def __init__(
        self,
        config: ModelConfig,
        entities: Iterable[str],
        relations: Iterable[str],
        horizon_range: tuple[int, int],
    ):
        lo, hi = horizon_range
        if lo > hi:
            raise ConfigError(f"empty horizon range {horizon_range}")
        self.config = config
        self.horizon_range = (int(lo), int(hi))
        d, seed = config.d, config.seed
        self.entities = Codebook(d, seed, "entity", sorted(set(entities)))
        self.relations = Codebook(d, seed, "relation", sorted(set(relations)))
        self.years = list(range(lo, hi + 1))
        self.time = Codebook(d, seed, "time", [*self.years, *SPECIAL_TOKENS])
        self._year_matrix = self.time.rows(self.years)
        self.W = np.zeros((d, d))
        self.C = config.lam * np.eye(d)
        self._inv: dict[tuple[float, float], np.ndarray] = {}
        self.meta: dict = {}  # provenance written into saved files

    # -- state

    @property
    def d(self) -> int:
        return self.config.d

    # W and C are replaced on every write, never modified in place, so
    # copies can share them. Assigned arrays are frozen to keep it that way.

    @property
    def W(self) -> np.ndarray:
        return self._W

    @W.setter
    def W(self, value: np.ndarray) -> None:
        self._W = _frozen(value, self.d)

    @property
    def C(self) -> np.ndarray:
        if self._pending:
            K = np.hstack(self._pending)
            self._C = _frozen(self._C + K @ K.T, self.d, owned=True)
            self._pending = ()
        return self._C

    @C.setter
    def C(self, value: np.ndarray) -> None:
        self._C = _frozen(value, self.d)
        self._pending: tuple[np.ndarray, ...] = ()
        self._inv = {}

    def cov_apply(self, X: np.ndarray) -> np.ndarray:
        """``C @ X`` without folding pending keys into ``C``."""
        out = self._C @ X
        for K in self._pending:
            out += K @ (K.T @ X)
        return out

    def cov_inverse(self, scale: float = 1.0, shift: float = 0.0) -> np.ndarray:
        """Cached ``(scale * C + shift * I)^-1``; dropped whenever ``C`` is reassigned."""
        key = (float(scale), float(shift))
        if key not in self._inv:
            A = scale * self.C
            if shift:
                A = A + shift * np.eye(self.d)
            self._inv[key] = _frozen(np.linalg.inv(A), self.d, owned=True)
        return self._inv[key]

    def update_W(self, delta: np.ndarray) -> None:
        """W += delta, producing a new array."""
        self._W = _frozen(self._W + delta, self.d, owned=True)

    def add_keys(self, K: np.ndarray) -> None:
        """C += K K^T; cached inverses follow by Woodbury when that is cheaper.

        The keys are kept aside and only folded into ``C`` when it is read.
        """
        cached = self._inv
        self._pending = (*self._pending, np.array(K, dtype=np.float64))
        self._inv = {}
        m = K.shape[1]
        if m >= self.d // 4:
            return
        for (scale, shift), inv in cached.items():
            G = inv @ K
            S = np.eye(m) / scale + K.T @ G
            self._inv[(scale, shift)] = _frozen(inv - G @ np.linalg.solve(S, G.T), self.d, owned=True)

    def snapshot(self) -> tuple:
        """Opaque state for :meth:`restore`; cheap because arrays are shared."""
        return (self._W, self._C, self._pending, dict(self._inv))

    def restore(self, state: tuple) -> None:
        self._W, self._C, self._pending, inv = state
        self._inv = dict(inv)

    def copy(self) -> "LamModel":
        new = object.__new__(LamModel)
        new.__dict__.update(self.__dict__)
        new._inv = dict(self._inv)
        return new

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.W).tobytes())
        h.update(np.ascontiguousarray(self.C).tobytes())
        return h.hexdigest()

    # -- encoders

    def time_vector(self, token) -> np.ndarray:
        if token == CURRENT:
            token = TOKEN_CURRENT
        elif token == PREVIOUS:
            token = TOKEN_PREVIOUS
        return self.time[token]

    def encode_obj_key(self, subject: str, relation: str, time_token) -> np.ndarray:
        v = self.entities[subject] + self.relations[relation] + self.time_vector(time_token)
        return v / np.linalg.norm(v)

    def encode_span_key(self, subject: str, relation: str, obj: str, boundary: str) -> np.ndarray:
        if boundary not in (SPAN_START, SPAN_END):
            raise EncodingError(f"boundary must be {SPAN_START} or {SPAN_END}, got {boundary!r}")
        v = self.entities[subject] + self.relations[relation] + self.entities[obj] + self.time[boundary]
        return v / np.linalg.norm(v)

    def year_vector(self, year: int) -> np.ndarray:
        return self.time[year]

    def object_vector(self, obj: str) -> np.ndarray:
        return self.entities[obj]

    def clip_year(self, year: int) -> int:
        lo, hi = self.horizon_range
        return min(max(year, lo), hi)

    # -- initialization

    def associations(
        self, facts: Iterable[tuple[TemporalFact, str | None]], horizon: int | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Key and value matrices (d x n) for model-time facts."""
        horizon = self.horizon_range[1] if horizon is None else horizon
        facts = list(facts)
        # a year shared by consecutive facts of one (s, r) belongs to the later fact
        handover = {(f.subject, f.relation, self.clip_year(f.t_start)) for f, _ in facts}
        keys, values = [], []
        for fact, previous in facts:
            s, r, o = fact.subject, fact.relation, fact.object
            e_o = self.entities[o]
            ts = self.clip_year(fact.t_start)
            te = self.clip_year(fact.effective_end(horizon))
            for y in range(ts, te + 1):
                if y == te and y > ts and (s, r, y) in handover:
                    continue
                keys.append(self.encode_obj_key(s, r, y))
                values.append(e_o)
            keys.append(self.encode_obj_key(s, r, CURRENT))
            values.append(e_o)
            if previous is not None:
                keys.append(self.encode_obj_key(s, r, PREVIOUS))
                values.append(self.entities[previous])
            keys.append(self.encode_span_key(s, r, o, SPAN_START))
            values.append(self.time[ts])
            keys.append(self.encode_span_key(s, r, o, SPAN_END))
            values.append(self.time[te])
        d = self.d
        K = np.array(keys).T.reshape(d, len(keys))
        V = np.array(values).T.reshape(d, len(values))
        return K, V

    def initialize_from_facts(
        self, facts: Iterable[tuple[TemporalFact, str | None]], horizon: int | None = None
    ) -> "LamModel":
        """Ridge-solve ``W`` over the association set and reset ``C``.

        Each fact contributes one key per year of its span, a CURRENT key,
        an optional PREVIOUS key and the two span keys.
        """
        K, V = self.associations(facts, horizon)
        C = K @ K.T + self.config.lam * np.eye(self.d)
        # W C = V K^T, C symmetric
        self.W = np.linalg.solve(C, K @ V.T).T if K.shape[1] else np.zeros((self.d, self.d))
        self.C = C
        return self

    # -- reads

    def _decode_years(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.W @ keys
        n = np.linalg.norm(out, axis=0)
        n[n == 0.0] = 1.0
        sims = self._year_matrix @ (out / n)
        best = sims.argmax(axis=0)
        return best, sims[best, np.arange(keys.shape[1])]

    def predict_span(self, subject: str, relation: str, obj: str) -> Span:
        keys = np.stack(
            [self.encode_span_key(subject, relation, obj, SPAN_START), self.encode_span_key(subject, relation, obj, SPAN_END)],
            axis=1,
        )
        idx, score = self._decode_years(keys)
        (a, b), (sa, sb) = (self.years[i] for i in idx), score
        if a > b:
            a, b, sa, sb = b, a, sb, sa
        return Span(a, b, float(sa), float(sb))

    def _span_contains(self, pairs: list[tuple[str, str, str]], years: np.ndarray) -> np.ndarray:
        """For each (subject, relation, object), whether its decoded span holds the year."""
        n = len(pairs)
        base = self.entities.rows([p[0] for p in pairs]) + self.relations.rows([p[1] for p in pairs])
        base = base + self.entities.rows([p[2] for p in pairs])
        starts = _normalize(base + self.time[SPAN_START]).T
        ends = _normalize(base + self.time[SPAN_END]).T
        idx, _ = self._decode_years(np.hstack([starts, ends]))
        all_years = np.asarray(self.years)
        a, b = all_years[idx[:n]], all_years[idx[n:]]
        return (np.minimum(a, b) <= years) & (years <= np.maximum(a, b))

    def query(self, q: StructuredQuery) -> Answer:
        """Decode the object for a structured query.

        Explicit-year queries add ``alpha`` to every candidate whose decoded
        span contains the year. Only candidates within ``alpha`` of the best
        raw score can change the winner, so only those are decoded.
        """
        return self.query_batch([q])[0]

    def query_batch(self, queries: Sequence[StructuredQuery]) -> list[Answer]:
        """:meth:`query` for several queries against the same weights."""
        if not queries:
            return []
        keys = np.stack([self.encode_obj_key(q.subject, q.relation, q.time_ref) for q in queries], axis=1)
        out = self.W @ keys
        n = np.linalg.norm(out, axis=0)
        n[n == 0.0] = 1.0
        raw = self.entities.matrix @ (out / n)  # entities x queries
        final = raw.copy()
        alpha = self.config.alpha
        if alpha > 0:
            rows, cols, pairs, years = [], [], [], []
            for j, q in enumerate(queries):
                if not q.is_explicit:
                    continue
                cand = np.flatnonzero(raw[:, j] >= raw[:, j].max() - alpha)
                rows.append(cand)
                cols.append(np.full(len(cand), j))
                pairs += [(q.subject, q.relation, self.entities.ids[i]) for i in cand]
                years.append(np.full(len(cand), q.time_ref))
            if pairs:
                rows, cols = np.concatenate(rows), np.concatenate(cols)
                inside = self._span_contains(pairs, np.concatenate(years))
                final[rows[inside], cols[inside]] += alpha
        answers = []
        for j in range(len(queries)):
            col = final[:, j]
            best = int(np.argmax(col))
            if len(col) > 1:
                top = col[best]
                col[best] = -np.inf
                margin = float(top - col.max())
            else:
                margin = 0.0
            answers.append(Answer(self.entities.ids[best], float(raw[best, j]), margin))
        return answers

    # -- persistence

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            **asdict(self.config),
            "horizon_range": list(self.horizon_range),
            "entities": self.entities.ids,
            "relations": self.relations.ids,
            "meta": self.meta,
        }

    def save(self, path: str | Path) -> None:
        """Write header JSON, then W and C as little-endian float64 row-major."""
        head = json.dumps(self.header(), sort_keys=True).encode()
        with open(path, "wb") as fp:
            fp.write(MAGIC)
            fp.write(struct.pack("<Q", len(head)))
            fp.write(head)
            fp.write(np.ascontiguousarray(self.W, dtype="<f8").tobytes())
            fp.write(np.ascontiguousarray(self.C, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "LamModel":
        with open(path, "rb") as fp:
            if fp.read(len(MAGIC)) != MAGIC:
                raise ValueError(f"{path}: not a model file")
            (n,) = struct.unpack("<Q", fp.read(8))
            head = json.loads(fp.read(n))
            if head["format_version"] != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported format version {head['format_version']}")
            d = head["d"]
            config = ModelConfig(d=d, seed=head["seed"], lam=head["lam"], alpha=head["alpha"])
            model = cls(config, head["entities"], head["relations"], tuple(head["horizon_range"]))
            model.meta = dict(head.get("meta", {}))
            raw = fp.read(16 * d * d)
            if len(raw) != 16 * d * d:
                raise ValueError(f"{path}: truncated matrix data")
        model.W = np.frombuffer(raw[: 8 * d * d], dtype="<f8").reshape(d, d).astype(np.float64)
        model.C = np.frombuffer(raw[8 * d * d :], dtype="<f8").reshape(d, d).astype(np.float64)
        return model


def new_model(
    config: ModelConfig,
    known_entities: Iterable[str],
    known_relations: Iterable[str],
    horizon_range: tuple[int, int],
) -> LamModel:
    return LamModel(config, known_entities, known_relations, horizon_range)
