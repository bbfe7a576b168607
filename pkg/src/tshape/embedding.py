"""Document embeddings from an LDA topic model trained by collapsed Gibbs sampling.

A document is mapped to its topic proportions. Training keeps full count matrices
(document-topic, topic-word); unseen documents are embedded by fold-in, i.e. Gibbs
sweeps over the document's own topic assignments with the topic-word counts frozen.
"""

from __future__ import annotations

import csv
import html
import json
import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - pure-python fallback, same arithmetic
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

LDA_MAGIC = b"ESM-LDA-v1"

DEFAULT_ALPHA_MASS = 50.0
DEFAULT_BETA = 0.01
DEFAULT_ITERATIONS = 1000
DEFAULT_FOLD_IN_SWEEPS = 50


class EmbeddingError(ValueError):
    pass


# --- tokenization -------------------------------------------------------------

_CODE_BLOCK = re.compile(r"<(pre|code)\b[^>]*>.*?</\1\s*>", re.IGNORECASE | re.DOTALL)
_TAG = re.compile(r"<[^>]+>")
_SPLIT = re.compile(r"[^0-9a-z]+")


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = resources.files(__package__).joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def tokenize(text: str) -> list[str]:
    if not text:
        return []
    text = _CODE_BLOCK.sub(" ", text)
    text = html.unescape(_TAG.sub(" ", text)).lower()
    stop = stopwords()
    return [t for t in _SPLIT.split(text) if len(t) >= 2 and t not in stop]


# --- vocabulary and model -----------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    doc_freq: tuple[int, ...]

    @classmethod
    def build(cls, docs: Iterable[Sequence[str]]) -> "Vocabulary":
        df: dict[str, int] = {}
        for doc in docs:
            for tok in set(doc):
                df[tok] = df.get(tok, 0) + 1
        tokens = tuple(sorted(df))
        return cls(tokens, tuple(df[t] for t in tokens))

    @property
    def index(self) -> dict[str, int]:
        return _index_of(self.tokens)

    def encode(self, doc: Sequence[str]) -> np.ndarray:
        idx = self.index
        return np.fromiter((idx[t] for t in doc if t in idx), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.tokens)


@lru_cache(maxsize=8)
def _index_of(tokens: tuple[str, ...]) -> dict[str, int]:
    return {t: i for i, t in enumerate(tokens)}


@dataclass(frozen=True)
class TopicModel:
    num_topics: int
    alpha: float
    beta: float
    vocab: Vocabulary
    topic_word: np.ndarray  # (num_topics, V) int64 counts
    seed: int
    iterations: int
    trained: bool = True

    @property
    def topic_totals(self) -> np.ndarray:
        return self.topic_word.sum(axis=1)

    def topic_word_distribution(self) -> np.ndarray:
        phi = self.topic_word + self.beta
        return phi / phi.sum(axis=1, keepdims=True)


@njit(cache=True)
def _gibbs_sweep(words, doc_of, z, ndk, nkw, nk, alpha, beta, vbeta, u, p):
    n_topics = nk.shape[0]
    for i in range(words.shape[0]):
        w = words[i]
        d = doc_of[i]
        k = z[i]
        ndk[d, k] -= 1
        nkw[k, w] -= 1
        nk[k] -= 1
        total = 0.0
        for t in range(n_topics):
            total += (ndk[d, t] + alpha) * (nkw[t, w] + beta) / (nk[t] + vbeta)
            p[t] = total
        r = u[i] * total
        k = 0
        while k < n_topics - 1 and p[k] <= r:
            k += 1
        z[i] = k
        ndk[d, k] += 1
        nkw[k, w] += 1
        nk[k] += 1


@njit(cache=True)
def _fold_in(words, z, nkw, nk, alpha, beta, vbeta, u, burn_in):
    n_topics = nk.shape[0]
    n_words = words.shape[0]
    ndk = np.zeros(n_topics)
    for i in range(n_words):
        ndk[z[i]] += 1.0
    acc = np.zeros(n_topics)
    p = np.zeros(n_topics)
    sweeps = u.shape[0]
    for s in range(sweeps):
        for i in range(n_words):
            w = words[i]
            ndk[z[i]] -= 1.0
            total = 0.0
            for t in range(n_topics):
                total += (ndk[t] + alpha) * (nkw[t, w] + beta) / (nk[t] + vbeta)
                p[t] = total
            r = u[s, i] * total
            k = 0
            while k < n_topics - 1 and p[k] <= r:
                k += 1
            z[i] = k
            ndk[k] += 1.0
        if s >= burn_in:
            for t in range(n_topics):
                acc[t] += ndk[t] + alpha
    return acc


def fit_lda(
    docs: Sequence[Sequence[str]],
    num_topics: int,
    alpha: float | None = None,
    beta: float = DEFAULT_BETA,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
    return_state: bool = False,
):
    """Train LDA with collapsed Gibbs sampling.

    ``alpha`` defaults to 50 / num_topics. All randomness comes from one generator
    seeded with ``seed``, so identical inputs give bit-identical counts. With
    ``return_state`` the per-token assignments and document-topic counts are
    returned too: ``(model, z, doc_topic)``.
    """
    if num_topics < 2:
        raise EmbeddingError(f"num_topics must be >= 2, got {num_topics}")
    if iterations < 1:
        raise EmbeddingError("iterations must be >= 1")
    if not docs:
        raise EmbeddingError("cannot fit a topic model on zero documents")
    alpha = DEFAULT_ALPHA_MASS / num_topics if alpha is None else float(alpha)
    vocab = Vocabulary.build(docs)
    if len(vocab) == 0:
        raise EmbeddingError("empty vocabulary")

    encoded = [vocab.encode(d) for d in docs]
    words = np.concatenate(encoded) if encoded else np.zeros(0, np.int64)
    doc_of = np.repeat(np.arange(len(docs), dtype=np.int64), [len(e) for e in encoded])
    rng = np.random.default_rng(seed)
    z = rng.integers(0, num_topics, size=words.size).astype(np.int64)
    ndk = np.zeros((len(docs), num_topics), dtype=np.int64)
    nkw = np.zeros((num_topics, len(vocab)), dtype=np.int64)
    np.add.at(ndk, (doc_of, z), 1)
    np.add.at(nkw, (z, words), 1)
    nk = nkw.sum(axis=1)
    p = np.zeros(num_topics)
    vbeta = len(vocab) * beta
    for _ in range(iterations):
        _gibbs_sweep(words, doc_of, z, ndk, nkw, nk, alpha, beta, vbeta, rng.random(words.size), p)

    model = TopicModel(num_topics, alpha, beta, vocab, nkw, seed, iterations)
    if return_state:
        return model, z, ndk
    return model


def embed(model: TopicModel, doc: Sequence[str], key: int = 0,
          sweeps: int = DEFAULT_FOLD_IN_SWEEPS) -> np.ndarray:
    """Topic proportions of one tokenized document by fold-in.

    The generator is seeded from ``(model.seed, key)`` so a document's vector does not
    depend on which other documents are embedded or in what order. Proportions are
    averaged over the second half of the sweeps. Documents with no in-vocabulary
    tokens get the uniform vector.
    """
    if not model.trained:
        raise EmbeddingError("model is not trained")
    k = model.num_topics
    words = model.vocab.encode(doc)
    if words.size == 0:
        return np.full(k, 1.0 / k)
    rng = np.random.default_rng([model.seed, int(key)])
    z = rng.integers(0, k, size=words.size).astype(np.int64)
    u = rng.random((sweeps, words.size))
    nkw = model.topic_word
    acc = _fold_in(words, z, nkw, nkw.sum(axis=1), model.alpha, model.beta,
                   len(model.vocab) * model.beta, u, sweeps // 2)
    return acc / acc.sum()


class Embedder(Protocol):
    """Anything that maps a tokenized document to a fixed-length vector."""

    dim: int

    def embed(self, tokens: Sequence[str], key: int = 0) -> np.ndarray: ...


@dataclass(frozen=True)
class LdaEmbedder:
    model: TopicModel
    sweeps: int = DEFAULT_FOLD_IN_SWEEPS

    @property
    def dim(self) -> int:
        return self.model.num_topics

    def embed(self, tokens: Sequence[str], key: int = 0) -> np.ndarray:
        return embed(self.model, tokens, key, self.sweeps)


def embed_documents(embedder: Embedder, docs: Mapping[int, Sequence[str]]) -> dict[int, np.ndarray]:
    return {key: embedder.embed(docs[key], key) for key in sorted(docs)}


# --- persistence --------------------------------------------------------------


def save_model(model: TopicModel, path: str | Path) -> None:
    header = json.dumps({
        "num_topics": model.num_topics,
        "alpha": model.alpha,
        "beta": model.beta,
        "seed": model.seed,
        "iterations": model.iterations,
        "tokens": list(model.vocab.tokens),
        "doc_freq": list(model.vocab.doc_freq),
    }, sort_keys=True).encode("utf-8")
    counts = np.ascontiguousarray(model.topic_word, dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(LDA_MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(counts.tobytes())


def load_model(path: str | Path) -> TopicModel:
    data = Path(path).read_bytes()
    magic, _, rest = data.partition(b"\n")
    if magic != LDA_MAGIC:
        raise EmbeddingError(f"{path}: expected {LDA_MAGIC.decode()}, found {magic[:32]!r}")
    if len(rest) < 8:
        raise EmbeddingError(f"{path}: truncated topic model file")
    (hlen,) = struct.unpack("<Q", rest[:8])
    if len(rest) < 8 + hlen:
        raise EmbeddingError(f"{path}: truncated topic model file")
    meta = json.loads(rest[8:8 + hlen])
    k, v = meta["num_topics"], len(meta["tokens"])
    body = rest[8 + hlen:]
    if len(body) != 8 * k * v:
        raise EmbeddingError(f"{path}: truncated topic model file ({len(body)} of {8 * k * v} count bytes)")
    counts = np.frombuffer(body, dtype="<i8").reshape(k, v).astype(np.int64)
    vocab = Vocabulary(tuple(meta["tokens"]), tuple(meta["doc_freq"]))
    return TopicModel(k, meta["alpha"], meta["beta"], vocab, counts, meta["seed"], meta["iterations"])


def write_embeddings(vectors: Mapping[int, np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = len(next(iter(vectors.values()))) if vectors else 0
        w.writerow(["doc_id"] + [f"v{i + 1}" for i in range(dim)])
        for key in sorted(vectors):
            w.writerow([key] + [repr(float(x)) for x in vectors[key]])


def read_embeddings(path: str | Path) -> dict[int, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return {int(row[0]): np.array([float(x) for x in row[1:]]) for row in reader}
