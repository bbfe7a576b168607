import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mean_cosines, reference_lda, two_group_corpus
from tshape.embedding import (
    EmbeddingError, LdaEmbedder, TopicModel, Vocabulary, embed, embed_documents, fit_lda, load_model, read_embeddings,
    save_model, stopwords, tokenize, write_embeddings,
)


def test_tokenize_examples():
    assert tokenize("") == []
    assert tokenize("<p>Use Spring MVC</p>") == ["spring", "mvc"]
    assert tokenize("a b") == []
    assert tokenize("<p>Rebuild <code>x = foo()</code> then &amp; restart JVM</p>") == ["rebuild", "restart", "jvm"]
    assert tokenize("<pre>int x;\nreturn y;</pre>hashmap") == ["hashmap"]


def test_stopword_list_size():
    assert 300 <= len(stopwords()) <= 450
    assert {"the", "use", "and"} <= stopwords()


@given(st.text(max_size=200))
def test_tokens_are_clean(text):
    for tok in tokenize(text):
        assert len(tok) >= 2 and tok.isalnum() and tok == tok.lower() and tok not in stopwords()


@pytest.fixture(scope="module")
def two_groups():
    docs, groups = two_group_corpus()
    model = fit_lda(docs, 2, iterations=500, seed=1)
    return docs, groups, model


def test_fit_is_deterministic(two_groups):
    docs, _, model = two_groups
    again = fit_lda(docs, 2, iterations=500, seed=1)
    assert np.array_equal(again.topic_word, model.topic_word)
    other = fit_lda(docs, 2, iterations=500, seed=2)
    assert other.topic_word.sum() == model.topic_word.sum()


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 1000))
def test_counts_are_conserved(m_d, iterations, seed):
    docs, _ = two_group_corpus(docs_per_group=4, words_per_doc=12, seed=seed)
    model, z, ndk = fit_lda(docs, m_d, iterations=iterations, seed=seed, return_state=True)
    n_tokens = sum(len(d) for d in docs)
    assert model.topic_word.sum() == n_tokens == ndk.sum() == z.size
    assert np.array_equal(ndk.sum(axis=0), model.topic_word.sum(axis=1))
    assert (model.topic_word >= 0).all()


def test_fit_errors():
    with pytest.raises(EmbeddingError):
        fit_lda([["a", "b"]], 1)
    with pytest.raises(EmbeddingError):
        fit_lda([], 2)
    with pytest.raises(EmbeddingError, match="vocabulary"):
        fit_lda([[], []], 2)
    with pytest.raises(EmbeddingError):
        fit_lda([["a"]], 2, iterations=0)


def test_default_priors(two_groups):
    model = two_groups[2]
    assert model.alpha == 25.0 and model.beta == 0.01


def test_two_groups_separate_like_reference_sampler(two_groups):
    docs, groups, model = two_groups
    ours = np.array([embed(model, d, key=i) for i, d in enumerate(docs)])
    within, cross = mean_cosines(ours, groups)
    vocab = Vocabulary.build(docs)
    ref = reference_lda([vocab.encode(d).tolist() for d in docs], len(vocab), 2, model.alpha, model.beta, 200, 1)
    ref_within, ref_cross = mean_cosines(ref, groups)
    assert within > cross
    assert ref_within > ref_cross
    assert within - cross == pytest.approx(ref_within - ref_cross, abs=0.05)


def test_fold_in_of_exclusive_words():
    docs, groups = two_group_corpus(words_per_doc=30)
    model = fit_lda(docs, 2, alpha=1.0, iterations=300, seed=3)
    a_topic = int(np.argmax(model.topic_word[:, model.vocab.index["aword0"]]))
    probe = [f"aword{i % 10}" for i in range(30)]
    vec = embed(model, probe, key=99)
    assert vec[a_topic] > 0.8
    vocab = Vocabulary.build(docs + [probe])
    enc = [vocab.encode(d).tolist() for d in docs + [probe]]
    theta = reference_lda(enc, len(vocab), 2, 1.0, 0.01, 100, 3)
    a_ref = int(np.argmax(theta[0]))  # document 0 belongs to group a
    assert theta[-1][a_ref] > 0.8


def test_embed_uniform_and_normalized(two_groups):
    docs, _, model = two_groups
    assert np.array_equal(embed(model, []), np.full(2, 0.5))
    assert np.array_equal(embed(model, ["never", "seen"]), np.full(2, 0.5))
    for i, d in enumerate(docs[:5]):
        v = embed(model, d, key=i)
        assert abs(v.sum() - 1.0) < 1e-9 and (v >= 0).all()


def test_embedding_is_order_independent(two_groups):
    docs, _, model = two_groups
    emb = LdaEmbedder(model, sweeps=20)
    keyed = {i: d for i, d in enumerate(docs[:10])}
    forward = embed_documents(emb, keyed)
    backward = {k: emb.embed(keyed[k], k) for k in reversed(sorted(keyed))}
    for k in keyed:
        assert np.array_equal(forward[k], backward[k])


def test_untrained_model_rejected(two_groups):
    model = two_groups[2]
    raw = TopicModel(2, 1.0, 0.01, model.vocab, model.topic_word, 0, 0, trained=False)
    with pytest.raises(EmbeddingError, match="not trained"):
        embed(raw, ["aword1"])


def test_persistence(tmp_path, two_groups):
    docs, _, model = two_groups
    save_model(model, tmp_path / "m.esm")
    back = load_model(tmp_path / "m.esm")
    assert np.array_equal(back.topic_word, model.topic_word) and back.vocab == model.vocab
    assert np.array_equal(embed(back, docs[0], 5), embed(model, docs[0], 5))
    blob = (tmp_path / "m.esm").read_bytes()
    (tmp_path / "t.esm").write_bytes(blob[:-8])
    with pytest.raises(EmbeddingError, match="truncated"):
        load_model(tmp_path / "t.esm")
    (tmp_path / "v.esm").write_bytes(b"ESM-LDA-v0" + blob[10:])
    with pytest.raises(EmbeddingError, match="ESM-LDA-v1"):
        load_model(tmp_path / "v.esm")
    vecs = {3: embed(model, docs[0], 3), 1: embed(model, docs[1], 1)}
    write_embeddings(vecs, tmp_path / "e.csv")
    got = read_embeddings(tmp_path / "e.csv")
    assert list(got) == [1, 3] and all(np.array_equal(got[k], vecs[k]) for k in vecs)
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "doc_id,v1,v2"
