import numpy as np
import pytest

from tkedit.corpus import CorpusConfig, generate_corpus
from tkedit.model import (
    SPAN_END,
    SPAN_START,
    Codebook,
    ConfigError,
    EncodingError,
    LamModel,
    ModelConfig,
    new_model,
)
from tkedit.questions import CURRENT, PREVIOUS, StructuredQuery
from tkedit.temporal_kb import TemporalFact, build_chains

from .conftest import HOG, US

OBAMA = TemporalFact(US, HOG, "Barack_Obama", 2009, 2017)
TRUMP = TemporalFact(US, HOG, "Donald_Trump", 2017, 2021)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=16)
    with pytest.raises(ConfigError):
        ModelConfig(lam=0)
    with pytest.raises(ConfigError):
        ModelConfig(alpha=-1)


def test_fresh_model(presidency_model):
    assert not presidency_model.W.any()
    np.testing.assert_array_equal(presidency_model.C, 0.1 * np.eye(256))
    ans = presidency_model.query(StructuredQuery(US, HOG, 2013))
    assert abs(ans.score) < 1e-12


def test_codebooks_deterministic():
    a = new_model(ModelConfig(d=64, seed=42), ["x", "y"], ["r"], (2000, 2005))
    b = new_model(ModelConfig(d=64, seed=42), ["y", "x"], ["r"], (2000, 2005))
    c = new_model(ModelConfig(d=64, seed=43), ["x", "y"], ["r"], (2000, 2005))
    np.testing.assert_array_equal(a.entities.matrix, b.entities.matrix)
    np.testing.assert_array_equal(a.time.matrix, b.time.matrix)
    assert not np.allclose(a.entities["x"], c.entities["x"])
    # a vector depends on (seed, id) only, not on the other ids present
    np.testing.assert_array_equal(Codebook(64, 42, "entity", ["x"])["x"], a.entities["x"])


def test_codebook_unit_norm():
    cb = Codebook(256, 0, "entity", [f"e{i}" for i in range(500)])
    np.testing.assert_allclose(np.linalg.norm(cb.matrix, axis=1), 1.0, atol=1e-9)


def test_codebook_near_orthogonality():
    d = 256
    cb = Codebook(d, 0, "entity", [f"e{i}" for i in range(300)])
    rng = np.random.default_rng(0)
    i = rng.integers(300, size=10_000)
    j = (i + rng.integers(1, 300, size=10_000)) % 300
    cos = np.einsum("ij,ij->i", cb.matrix[i], cb.matrix[j])
    assert np.abs(cos).max() <= 4 / np.sqrt(d)


def test_obj_key_cosine_two_thirds(presidency_model):
    # three near-orthogonal unit terms, two shared: (2 + small) / (sqrt(3) * sqrt(3))
    m = presidency_model
    cos = [m.encode_obj_key(US, HOG, a) @ m.encode_obj_key(US, HOG, b) for a, b in [(2010, 2015), (2001, 2029), (2003, 2004)]]
    for c in cos:
        assert abs(c - 2 / 3) <= 0.05
    np.testing.assert_array_equal(m.encode_obj_key(US, HOG, 2010), m.encode_obj_key(US, HOG, 2010))
    assert np.linalg.norm(m.encode_obj_key(US, HOG, 2010)) == pytest.approx(1.0)


def test_span_keys(presidency_model):
    m = presidency_model
    a = m.encode_span_key(US, HOG, "Donald_Trump", SPAN_START)
    np.testing.assert_array_equal(a, m.encode_span_key(US, HOG, "Donald_Trump", SPAN_START))
    assert not np.allclose(a, m.encode_span_key(US, HOG, "Donald_Trump", SPAN_END))


def test_unknown_ids(presidency_model):
    with pytest.raises(EncodingError):
        presidency_model.encode_obj_key("Canada", HOG, 2010)
    with pytest.raises(EncodingError):
        presidency_model.encode_span_key(US, HOG, "Nobody", SPAN_START)
    with pytest.raises(EncodingError):
        presidency_model.query(StructuredQuery(US, HOG, 1900))


def test_initialize_obama(presidency_model):
    m = presidency_model.initialize_from_facts([(OBAMA, None)])
    assert m.query(StructuredQuery(US, HOG, 2013)).object == "Barack_Obama"
    assert m.query(StructuredQuery(US, HOG, CURRENT)).object == "Barack_Obama"
    assert (m.predict_span(US, HOG, "Barack_Obama").start, m.predict_span(US, HOG, "Barack_Obama").end) == (2009, 2017)
    C = m.C
    np.testing.assert_allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() >= 0.1 - 1e-9


def test_initialize_matches_ridge_oracle(presidency_model):
    m = presidency_model.initialize_from_facts([(TRUMP, "Barack_Obama")])
    K, V = m.associations([(TRUMP, "Barack_Obama")])
    # independent normal-equation solve: W = V K^T (K K^T + lam I)^-1
    W = V @ K.T @ np.linalg.inv(K @ K.T + 0.1 * np.eye(256))
    np.testing.assert_allclose(m.W, W, atol=1e-9)
    assert K.shape[1] == (2021 - 2017 + 1) + 1 + 1 + 2
    assert m.query(StructuredQuery(US, HOG, PREVIOUS)).object == "Barack_Obama"


def test_initialize_empty(presidency_model):
    m = presidency_model.initialize_from_facts([])
    assert not m.W.any()
    np.testing.assert_array_equal(m.C, 0.1 * np.eye(256))


def test_previous_without_association_echoes_stored_object(presidency_model):
    # an unstored PREVIOUS key shares (s, r) with every stored key, so it echoes
    # the only object stored for the pair rather than scoring low
    m = presidency_model.initialize_from_facts([(OBAMA, None)])
    prev = m.query(StructuredQuery(US, HOG, PREVIOUS))
    assert prev.object == "Barack_Obama"
    assert np.linalg.norm(m.W @ m.encode_obj_key(US, HOG, PREVIOUS)) < np.linalg.norm(m.W @ m.encode_obj_key(US, HOG, CURRENT))


def test_retrieval_exact_for_suite_shard():
    chains, _ = build_chains(generate_corpus(0, CorpusConfig(n_chains=100)))
    entities = {c.subject for c in chains} | {o for c in chains for o in c.objects()}
    m = new_model(ModelConfig(d=256), entities, {c.relation for c in chains}, (1950, 2029))
    pairs = [(c.facts[0], None) for c in chains]
    K, _ = m.associations(pairs, 2028)
    assert K.shape[1] <= 1000
    m.initialize_from_facts(pairs, 2028)
    queries, gold = [], []
    for c in chains:
        f = c.facts[0]
        for y in range(f.t_start, f.effective_end(2028) + 1):
            queries.append(StructuredQuery(f.subject, f.relation, y))
            gold.append(f.object)
        queries.append(StructuredQuery(f.subject, f.relation, CURRENT))
        gold.append(f.object)
    answers = m.query_batch(queries)
    assert [a.object for a in answers] == gold


def test_retrieval_exact_near_orthogonal_keys():
    # n <= d/4 random unit keys: a ridge solve decodes every stored value
    d = 256
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 65))
        K = rng.standard_normal((d, n))
        K /= np.linalg.norm(K, axis=0)
        book = Codebook(d, seed, "entity", range(200))
        idx = rng.integers(200, size=n)
        V = book.matrix[idx].T
        W = np.linalg.solve(K @ K.T + 0.1 * np.eye(d), K @ V.T).T
        assert ((book.matrix @ (W @ K)).argmax(axis=0) == idx).all()


def test_uninitialized_queries_score_low():
    chains, _ = build_chains(generate_corpus(1, CorpusConfig(n_chains=200)))
    entities = {c.subject for c in chains} | {o for c in chains for o in c.objects()}
    m = new_model(ModelConfig(d=256), entities, {c.relation for c in chains}, (1950, 2029))
    m.initialize_from_facts([(c.facts[0], None) for c in chains[:100]], 2028)
    rng = np.random.default_rng(0)
    scores = [
        m.query(StructuredQuery(c.subject, c.relation, int(rng.integers(1950, 2029)))).score for c in chains[100:]
    ]
    assert len(scores) == 100
    assert max(scores) < 0.5


def test_alpha_zero_disables_blend():
    cfg = ModelConfig(d=256, alpha=0.0)
    m = new_model(cfg, [US, "Barack_Obama", "Donald_Trump"], [HOG], (2000, 2030))
    m.initialize_from_facts([(OBAMA, None)])
    q = StructuredQuery(US, HOG, 2013)
    ans = m.query(q)
    raw = m.entities.matrix @ (m.W @ m.encode_obj_key(US, HOG, 2013))
    raw /= np.linalg.norm(m.W @ m.encode_obj_key(US, HOG, 2013))
    assert ans.score == pytest.approx(raw.max())
    assert ans.runner_up_margin == pytest.approx(raw.max() - np.sort(raw)[-2])


def test_span_bonus_decides_close_scores(presidency_model):
    m = presidency_model
    k = m.encode_obj_key(US, HOG, 2019)
    keys = [k]
    values = [0.55 * m.entities["Barack_Obama"] + 0.45 * m.entities["Donald_Trump"]]
    for obj, (a, b) in (("Donald_Trump", (2017, 2021)), ("Barack_Obama", (2009, 2017))):
        keys += [m.encode_span_key(US, HOG, obj, SPAN_START), m.encode_span_key(US, HOG, obj, SPAN_END)]
        values += [m.year_vector(a), m.year_vector(b)]
    K, V = np.stack(keys, axis=1), np.stack(values, axis=1)
    W = np.linalg.solve(K @ K.T + 1e-3 * np.eye(256), K @ V.T).T
    out = W @ k
    raw = dict(zip(m.entities.ids, m.entities.matrix @ (out / np.linalg.norm(out))))
    # Obama leads on raw score by less than alpha; only Trump's decoded span holds 2019
    assert 0 < raw["Barack_Obama"] - raw["Donald_Trump"] < 0.25
    m.W = W
    assert 2019 in m.predict_span(US, HOG, "Donald_Trump")
    assert 2019 not in m.predict_span(US, HOG, "Barack_Obama")
    assert m.query(StructuredQuery(US, HOG, 2019)).object == "Donald_Trump"
    m2 = LamModel(ModelConfig(d=256, alpha=0.0), m.entities.ids, m.relations.ids, m.horizon_range)
    m2.W = W
    assert m2.query(StructuredQuery(US, HOG, 2019)).object == "Barack_Obama"


def test_query_batch_matches_query(presidency_model):
    m = presidency_model.initialize_from_facts([(OBAMA, None), (TRUMP, "Barack_Obama")])
    qs = [StructuredQuery(US, HOG, t) for t in (2005, 2010, 2017, 2019, CURRENT, PREVIOUS)]
    for a, b in zip(m.query_batch(qs), [m.query(q) for q in qs]):
        assert a.object == b.object
        assert a.score == pytest.approx(b.score, abs=1e-12)
        assert a.runner_up_margin == pytest.approx(b.runner_up_margin, abs=1e-12)


def test_query_is_read_only(presidency_model):
    m = presidency_model.initialize_from_facts([(OBAMA, None)])
    before = m.state_hash()
    for t in (2010, 2013, CURRENT, PREVIOUS):
        m.query(StructuredQuery(US, HOG, t))
    m.predict_span(US, HOG, "Barack_Obama")
    assert m.state_hash() == before
    with pytest.raises(ValueError):
        m.W[0, 0] = 1.0


def test_predict_span_fresh_is_low_confidence():
    m = new_model(ModelConfig(d=256), [f"e{i}" for i in range(100)], ["r"], (1950, 2030))
    for i in range(100):
        assert m.predict_span("e0", "r", f"e{i}").low_confidence


def test_predict_span_swaps_inverted(presidency_model):
    m = presidency_model
    m.W = np.outer(m.year_vector(2025), m.encode_span_key(US, HOG, "Donald_Trump", SPAN_START)) + np.outer(
        m.year_vector(2010), m.encode_span_key(US, HOG, "Donald_Trump", SPAN_END)
    )
    span = m.predict_span(US, HOG, "Donald_Trump")
    assert (span.start, span.end) == (2010, 2025)
    assert 2015 in span


def test_interference_from_current_overwrite(presidency_model):
    m = presidency_model.initialize_from_facts([(OBAMA, None)])
    e_old = m.entities["Barack_Obama"]
    hist = [m.encode_obj_key(US, HOG, y) for y in range(2009, 2018)]

    def cosines():
        return np.array([(m.W @ k) @ e_old / np.linalg.norm(m.W @ k) for k in hist])

    before = cosines()
    k = m.encode_obj_key(US, HOG, CURRENT)
    v = m.entities["Donald_Trump"]
    u = np.linalg.solve(m.C, k)
    m.update_W(np.outer(v - m.W @ k, u) / (u @ k))
    assert (cosines() < before).all()


def test_copy_on_write(presidency_model):
    m = presidency_model.initialize_from_facts([(OBAMA, None)])
    c = m.copy()
    h = m.state_hash()
    c.update_W(np.ones((256, 256)))
    c.add_keys(np.ones((256, 1)))
    assert m.state_hash() == h
    assert c.state_hash() != h


def test_cov_inverse_tracks_added_keys(presidency_model):
    m = presidency_model.initialize_from_facts([(OBAMA, None)])
    inv = m.cov_inverse(0.5, 0.01)
    np.testing.assert_allclose(inv, np.linalg.inv(0.5 * m.C + 0.01 * np.eye(256)), atol=1e-8)
    rng = np.random.default_rng(0)
    K = rng.standard_normal((256, 5))
    m.add_keys(K)
    np.testing.assert_allclose(m.cov_inverse(0.5, 0.01), np.linalg.inv(0.5 * m.C + 0.01 * np.eye(256)), atol=1e-8)
    X = rng.standard_normal((256, 3))
    np.testing.assert_allclose(m.cov_apply(X), m.C @ X, atol=1e-10)


def test_save_load_bit_exact(tmp_path, presidency_model):
    m = presidency_model.initialize_from_facts([(OBAMA, None), (TRUMP, "Barack_Obama")])
    m.add_keys(np.random.default_rng(0).standard_normal((256, 3)))
    m.meta = {"seed": 0}
    path = tmp_path / "m.lam"
    m.save(path)
    back = LamModel.load(path)
    assert back.W.tobytes() == m.W.tobytes()
    assert back.C.tobytes() == m.C.tobytes()
    assert back.state_hash() == m.state_hash()
    assert back.meta == {"seed": 0}
    assert back.config == m.config and back.horizon_range == m.horizon_range
    path2 = tmp_path / "m2.lam"
    back.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_bad_files(tmp_path, presidency_model):
    bad = tmp_path / "bad.lam"
    bad.write_bytes(b"nope")
    with pytest.raises(ValueError):
        LamModel.load(bad)
    good = tmp_path / "good.lam"
    presidency_model.save(good)
    trunc = tmp_path / "trunc.lam"
    trunc.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(ValueError, match="truncated"):
        LamModel.load(trunc)
