"""Seeded synthetic CQA corpora with planted T-shaped, C-shaped and non-expert users.

Each skill area owns a few tags and a private vocabulary. Users answer questions in
the skills their shape dictates, and their answers are accepted at shape- and
role-dependent rates, so the precision/recall labelling can recover the planted
shapes. Experts are also more active than non-experts, as on real CQA sites.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .corpus import ANSWER, QUESTION, Post, write_jsonl

MAX_USERS = 100_000
MAX_SKILLS = 50
ASKER_ID_OFFSET = 1_000_000

_SYLLABLES = ("ka", "lo", "mi", "ne", "tor", "va", "zu", "ri", "pel", "dan", "qui", "sor", "bex", "ul",
              "gam", "fen", "hi", "jor", "wik", "yel", "cro", "tes", "nup", "dri")
_COMMON = ("function", "value", "error", "return", "method", "class", "object", "string", "variable",
           "file", "data", "list", "output", "input", "result", "problem", "solution", "call", "check",
           "loop", "default", "option", "version", "update", "project", "library", "install", "run")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    num_skills: int = 3
    tags_per_skill: int = 3
    num_t_shaped: int = 20
    num_c_shaped: int = 10
    num_non_expert: int = 170
    answers_per_user: dict = field(default_factory=lambda: {"t_shaped": 40, "c_shaped": 40, "non_expert": 10})
    # accepted-answer probability for the user's main / secondary / other skills
    accepted_rates: dict = field(default_factory=lambda: {
        "t_shaped": [0.6, 0.4, 0.1],
        "c_shaped": [0.6, 0.6, 0.1],
        "non_expert": [0.1, 0.1, 0.1],
    })
    # share of a user's answers going to main / secondary skills (rest spread over others)
    focus: dict = field(default_factory=lambda: {
        "t_shaped": [0.75, 0.25],
        "c_shaped": [0.5, 0.5],
        "non_expert": [0.7, 0.0],
    })
    vocab_per_skill: int = 60
    words_per_answer: int = 30
    common_word_share: float = 0.2
    questions_per_skill: int = 400
    seed: int = 42

    def __post_init__(self):
        counts = (self.num_skills, self.tags_per_skill, self.num_t_shaped, self.num_c_shaped,
                  self.num_non_expert, self.vocab_per_skill, self.words_per_answer, self.questions_per_skill)
        if min(counts) < 0:
            raise SynthError("counts must be >= 0")
        if self.num_skills < 1 or self.tags_per_skill < 1:
            raise SynthError("need at least one skill with one tag")
        if self.num_skills > MAX_SKILLS:
            raise SynthError(f"num_skills exceeds maximum {MAX_SKILLS}")
        if self.num_t_shaped + self.num_c_shaped + self.num_non_expert > MAX_USERS:
            raise SynthError(f"total users exceed maximum {MAX_USERS}")
        if (self.num_t_shaped or self.num_c_shaped) and self.num_skills < 2:
            raise SynthError("T- and C-shaped users need at least two skills")
        for profile in (self.accepted_rates, self.focus):
            for shape in ("t_shaped", "c_shaped", "non_expert"):
                if shape not in profile or not all(0.0 <= x <= 1.0 for x in profile[shape]):
                    raise SynthError(f"profile for {shape} must hold rates in [0, 1]")
        for shape, share in self.focus.items():
            if sum(share) > 1.0 + 1e-12:
                raise SynthError(f"focus shares for {shape} exceed 1")
        if not 0.0 <= self.common_word_share <= 1.0:
            raise SynthError("common_word_share must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PlantedUser:
    user: int
    shape: str
    main_skills: tuple[int, ...]
    secondary_skill: int | None


@dataclass(frozen=True)
class SyntheticCorpus:
    posts: list[Post]
    truth: list[PlantedUser]
    skill_tags: list[list[str]]


def _pseudo_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=n_syl))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def generate_synthetic(spec: SynthSpec) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    taken = set(_COMMON)
    vocab = [_pseudo_words(rng, max(spec.vocab_per_skill, spec.tags_per_skill), taken)
             for _ in range(spec.num_skills)]
    skill_tags = [[vocab[s][0]] + [f"{vocab[s][0]}-{w}" for w in vocab[s][1:spec.tags_per_skill]]
                  for s in range(spec.num_skills)]
    # Zipf-like word weights inside each skill
    weights = 1.0 / np.arange(1, spec.vocab_per_skill + 1) if spec.vocab_per_skill else np.zeros(0)
    weights = weights / weights.sum() if weights.size else weights

    epoch = datetime(2010, 1, 1, tzinfo=timezone.utc)
    span = 5 * 365 * 24 * 3600
    posts: list[Post] = []
    questions: list[list[tuple[int, datetime]]] = []
    next_id = 1
    for s in range(spec.num_skills):
        qs = []
        for _ in range(spec.questions_per_skill):
            extra = [t for t in skill_tags[s][1:] if rng.random() < 0.5]
            tags = frozenset([skill_tags[s][0], *extra])
            created = epoch + timedelta(seconds=int(rng.integers(0, span)))
            body = "<p>" + " ".join(_words(rng, vocab[s], weights, spec, 12)) + "?</p>"
            asker = ASKER_ID_OFFSET + int(rng.integers(0, 10_000))
            posts.append(Post(next_id, QUESTION, asker, created, body, tags))
            qs.append((next_id, created))
            next_id += 1
        questions.append(qs)

    shapes = (["t_shaped"] * spec.num_t_shaped + ["c_shaped"] * spec.num_c_shaped
              + ["non_expert"] * spec.num_non_expert)
    order = rng.permutation(len(shapes))
    truth: list[PlantedUser] = []
    plans: list[tuple[int, int, bool]] = []  # (user, skill, accepted)
    for uid, idx in enumerate(order, start=1):
        shape = shapes[idx]
        skills = rng.permutation(spec.num_skills)
        if shape == "t_shaped":
            main, secondary = (int(skills[0]),), int(skills[1])
        elif shape == "c_shaped":
            main, secondary = (int(skills[0]), int(skills[1])), None
        else:
            main, secondary = (int(skills[0]),), None
        truth.append(PlantedUser(uid, shape, main, secondary))
        focus = spec.focus[shape]
        rates = spec.accepted_rates[shape]
        for _ in range(int(spec.answers_per_user[shape])):
            role, skill = _draw_skill(rng, shape, main, secondary, focus, spec.num_skills)
            plans.append((uid, skill, bool(rng.random() < rates[role])))

    open_q = [list(range(len(qs))) for qs in questions]
    accepted_taken = [set() for _ in questions]
    for i in rng.permutation(len(plans)):
        uid, skill, accepted = plans[i]
        qs = questions[skill]
        if not qs:
            continue
        if accepted and open_q[skill]:
            pick = int(rng.integers(0, len(open_q[skill])))
            qi = open_q[skill].pop(pick)
            accepted_taken[skill].add(qi)
        else:
            accepted = False
            qi = int(rng.integers(0, len(qs)))
        qid, qtime = qs[qi]
        created = qtime + timedelta(seconds=int(rng.integers(60, 30 * 24 * 3600)))
        body = "<p>" + " ".join(_words(rng, vocab[skill], weights, spec, spec.words_per_answer)) + "</p>"
        posts.append(Post(next_id, ANSWER, uid, created, body, parent_id=qid, accepted=accepted))
        next_id += 1
    return SyntheticCorpus(posts, truth, skill_tags)


def _draw_skill(rng, shape, main, secondary, focus, num_skills) -> tuple[int, int]:
    """Return (role, skill) where role 0 = main, 1 = secondary, 2 = other."""
    u = rng.random()
    if shape == "c_shaped":
        acc = 0.0
        for j, s in enumerate(main):
            acc += focus[min(j, len(focus) - 1)]
            if u < acc:
                return (0 if j == 0 else 1), s
    else:
        if u < focus[0]:
            return 0, main[0]
        if secondary is not None and u < focus[0] + focus[1]:
            return 1, secondary
    others = [s for s in range(num_skills) if s not in main and s != secondary]
    if not others:
        return 0, main[0]
    return 2, int(others[int(rng.integers(0, len(others)))])


def _words(rng, skill_vocab, weights, spec: SynthSpec, count: int) -> list[str]:
    common = rng.random(count) < spec.common_word_share
    common_idx = rng.integers(0, len(_COMMON), size=count)
    if not len(skill_vocab):
        return [_COMMON[i] for i in common_idx]
    skill_idx = rng.choice(len(weights), size=count, p=weights)
    return [_COMMON[c] if is_common else skill_vocab[k]
            for is_common, c, k in zip(common, common_idx, skill_idx)]


def write_synthetic(data: SyntheticCorpus, corpus_path: str | Path, truth_path: str | Path) -> None:
    write_jsonl(sorted(data.posts, key=lambda p: p.post_id), corpus_path)
    with open(truth_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "shape", "main_skills", "secondary_skill"])
        for u in data.truth:
            w.writerow([u.user, u.shape, " ".join(data.skill_tags[s][0] for s in u.main_skills),
                        "" if u.secondary_skill is None else data.skill_tags[u.secondary_skill][0]])


def read_truth(path: str | Path) -> dict[int, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {int(r["user"]): r["shape"] for r in csv.DictReader(fh)}
