"""Glue between the corpus, the document embedder and the matching model."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus
from .dualcnn import PairData, build_embedding_matrix
from .embedding import Embedder, tokenize
from .labels import GoldenPair, SkillArea


def tokenized_answers(corpus: Corpus) -> dict[int, list[str]]:
    return {a.post_id: tokenize(a.body) for a in corpus.answers}


def document_vectors(corpus: Corpus, embedder: Embedder,
                     tokens: Mapping[int, Sequence[str]] | None = None) -> dict[int, np.ndarray]:
    tokens = tokenized_answers(corpus) if tokens is None else tokens
    return {pid: embedder.embed(tokens[pid], pid) for pid in sorted(tokens)}


def user_matrix(corpus: Corpus, user: int, vectors: Mapping[int, np.ndarray], n: int, m_d: int) -> np.ndarray:
    ids = corpus.answers_by_user.get(user, ())[:n]
    return build_embedding_matrix([vectors[i] for i in ids], n, m_d)


def query_matrix(skill: SkillArea, vectors: Mapping[int, np.ndarray], n: int, m_d: int) -> np.ndarray:
    return build_embedding_matrix([vectors[i] for i in skill.documents[:n]], n, m_d)


def pair_data(pairs: Sequence[GoldenPair], corpus: Corpus, skills: Sequence[SkillArea],
              vectors: Mapping[int, np.ndarray], n: int, m_d: int) -> PairData:
    users = sorted({p.user for p in pairs})
    skill_names = sorted({p.skill for p in pairs})
    by_name = {s.name: s for s in skills}
    u_pos = {u: i for i, u in enumerate(users)}
    q_pos = {s: i for i, s in enumerate(skill_names)}
    user_mats = np.stack([user_matrix(corpus, u, vectors, n, m_d) for u in users]) if users \
        else np.zeros((0, n, m_d))
    query_mats = np.stack([query_matrix(by_name[s], vectors, n, m_d) for s in skill_names]) if skill_names \
        else np.zeros((0, n, m_d))
    return PairData(
        user_mats, query_mats,
        np.array([u_pos[p.user] for p in pairs], dtype=np.int64),
        np.array([q_pos[p.skill] for p in pairs], dtype=np.int64),
        np.array([float(p.target) for p in pairs]),
    )
