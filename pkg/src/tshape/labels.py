"""Skill-area extraction, knowledge levels, expertise shapes and golden pairs."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, CorpusError, documents_of_tagset

logger = logging.getLogger(__name__)

ADVANCED_PERCENT = 5
INTERMEDIATE_PERCENT = 20
SPLIT_SHARES = (0.6, 0.2, 0.2)


class LabelError(ValueError):
    pass


class KnowledgeLevel(str, Enum):
    ADVANCED = "advanced"
    INTERMEDIATE = "intermediate"
    BEGINNER = "beginner"


class ExpertiseShape(str, Enum):
    T_SHAPED = "t_shaped"
    C_SHAPED = "c_shaped"
    NON_EXPERT = "non_expert"


@dataclass(frozen=True)
class SkillArea:
    name: str
    tags: tuple[str, ...]
    documents: tuple[int, ...] = ()


def make_skill_area(corpus: Corpus, name: str, tags: Iterable[str]) -> SkillArea:
    tags = tuple(sorted(set(tags)))
    if not tags:
        raise LabelError(f"skill area {name!r} has no tags")
    docs = tuple(p.post_id for p in documents_of_tagset(corpus, tags))
    return SkillArea(name, tags, docs)


@dataclass(frozen=True)
class UserSkillScore:
    user: int
    skill: str
    precision: float
    recall: float
    f1: float
    level: KnowledgeLevel = KnowledgeLevel.BEGINNER


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# --- skill areas -------------------------------------------------------------


def top_tags(corpus: Corpus, limit: int) -> list[str]:
    if limit < 1:
        raise LabelError("limit must be >= 1")
    ranked = sorted(corpus.tag_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:limit]]


def _question_sets(corpus: Corpus, tags: Sequence[str]) -> dict[str, set[int]]:
    wanted = set(tags)
    sets: dict[str, set[int]] = {t: set() for t in tags}
    for p in corpus.posts.values():
        if p.is_answer:
            continue
        for t in p.tags & wanted:
            sets[t].add(p.post_id)
    return sets


def tag_similarity(corpus: Corpus, t1: str, t2: str) -> float:
    """Jaccard overlap of the question sets carrying each tag."""
    for t in (t1, t2):
        if corpus.tag_counts.get(t, 0) == 0:
            raise LabelError(f"tag {t!r} does not occur in the corpus")
    sets = _question_sets(corpus, [t1, t2])
    a, b = sets[t1], sets[t2]
    return len(a & b) / len(a | b)


def similarity_matrix(corpus: Corpus, tags: Sequence[str]) -> np.ndarray:
    for t in tags:
        if corpus.tag_counts.get(t, 0) == 0:
            raise LabelError(f"tag {t!r} does not occur in the corpus")
    sets = _question_sets(corpus, tags)
    n = len(tags)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = sets[tags[i]], sets[tags[j]]
            sim[i, j] = sim[j, i] = len(a & b) / len(a | b)
    return sim


def cluster_tags(tags: Sequence[str], similarity: np.ndarray, stop_threshold: float) -> list[tuple[str, ...]]:
    """Average-linkage agglomerative clustering on a similarity matrix.

    Merges the most similar pair of clusters until the best average similarity drops
    below ``stop_threshold``. Equal similarities are resolved by the lexicographically
    smallest pair of cluster labels, a label being the sorted tuple of member tags.
    """
    if not 0.0 <= stop_threshold <= 1.0:
        raise LabelError(f"stop_threshold must lie in [0, 1], got {stop_threshold}")
    sim = np.asarray(similarity, dtype=float)
    n = len(tags)
    if sim.shape != (n, n):
        raise LabelError(f"similarity matrix shape {sim.shape} does not match {n} tags")
    if not np.allclose(sim, sim.T) or not np.allclose(np.diag(sim), 1.0):
        raise LabelError("similarity matrix must be symmetric with unit diagonal")
    if n == 0:
        return []

    members: list[tuple[str, ...]] = [(t,) for t in tags]
    sums = sim.copy()
    alive = list(range(n))
    while len(alive) > 1:
        best = None
        for a_pos, i in enumerate(alive):
            for j in alive[a_pos + 1:]:
                avg = sums[i, j] / (len(members[i]) * len(members[j]))
                li, lj = sorted((tuple(sorted(members[i])), tuple(sorted(members[j]))))
                key = (-avg, li, lj)
                if best is None or key < best[0]:
                    best = (key, i, j)
        (neg_avg, _, _), i, j = best
        if -neg_avg < stop_threshold:
            break
        # merge j into i
        sums[i, :] += sums[j, :]
        sums[:, i] += sums[:, j]
        members[i] = members[i] + members[j]
        alive.remove(j)
    return sorted(tuple(sorted(members[i])) for i in alive)


def load_overrides(path: str | Path | None) -> list[dict]:
    if path is None:
        return []
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        return []
    data = json.loads(text)
    if not isinstance(data, list):
        raise LabelError(f"{path}: override file must hold a JSON list")
    for i, entry in enumerate(data):
        if not isinstance(entry, dict) or "tags" not in entry:
            raise LabelError(f"{path}[{i}]: each override needs 'tags'")
        if entry.get("action", "keep") not in ("keep", "merge", "drop"):
            raise LabelError(f"{path}[{i}]: unknown action {entry.get('action')!r}")
    return data


def apply_skill_overrides(
    corpus: Corpus,
    clusters: Sequence[Sequence[str]],
    overrides: Sequence[Mapping] = (),
    min_size: int = 1,
) -> list[SkillArea]:
    """Turn tag clusters into named skill areas, applying declarative edits.

    ``keep`` defines a skill area with exactly the listed tags (splitting them out of
    their clusters), ``merge`` unions every cluster touching the listed tags, ``drop``
    removes the tags. Untouched clusters are named after their most frequent tag.
    """
    auto = [set(c) for c in clusters]
    known = set().union(*auto) if auto else set()
    named: list[tuple[str, set[str]]] = []
    assigned: dict[str, str] = {}
    dropped: set[str] = set()

    def claim(tags: set[str], owner: str) -> None:
        for t in sorted(tags):
            if t in assigned:
                raise LabelError(f"tag {t!r} assigned to both {assigned[t]!r} and {owner!r}")
            assigned[t] = owner

    for idx, entry in enumerate(overrides):
        tags = set(entry["tags"])
        unknown = sorted(tags - known)
        if unknown:
            raise LabelError(f"override {idx} references unknown tags {unknown}")
        action = entry.get("action", "keep")
        name = entry.get("name")
        if action == "drop":
            dropped |= tags
            for c in auto:
                c -= tags
            continue
        if not name:
            raise LabelError(f"override {idx} ({action}) needs a name")
        if action == "merge":
            touched = [c for c in auto if c & tags]
            tags = tags.union(*touched) - dropped
            auto = [c for c in auto if not (c & set(entry["tags"]))]
        claim(tags, name)
        for c in auto:
            c -= tags
        named.append((name, tags))

    for c in auto:
        if len(c) < min_size or not c:
            continue
        name = min(c, key=lambda t: (-corpus.tag_counts.get(t, 0), t))
        claim(c, name)
        named.append((name, c))

    names = [n for n, _ in named]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise LabelError(f"duplicate skill area names {dupes}")
    return sorted((make_skill_area(corpus, n, t) for n, t in named), key=lambda s: s.name)


def extract_skill_areas(
    corpus: Corpus,
    tag_limit: int = 200,
    threshold: float = 0.1,
    overrides: Sequence[Mapping] = (),
    min_size: int = 1,
) -> list[SkillArea]:
    tags = top_tags(corpus, tag_limit)
    clusters = cluster_tags(tags, similarity_matrix(corpus, tags), threshold)
    return apply_skill_overrides(corpus, clusters, overrides, min_size)


# --- precision / recall --------------------------------------------------------


def _skill_answers(corpus: Corpus, skill: SkillArea):
    if skill.documents:
        return [corpus.posts[i] for i in skill.documents]
    return documents_of_tagset(corpus, skill.tags)


def precision(corpus: Corpus, skill: SkillArea, user: int) -> float:
    mine = [a for a in _skill_answers(corpus, skill) if a.owner == user]
    if not mine:
        return 0.0
    return sum(a.accepted for a in mine) / len(mine)


def recall(corpus: Corpus, skill: SkillArea, user: int) -> float:
    docs = _skill_answers(corpus, skill)
    total = sum(a.accepted for a in docs)
    if total == 0:
        return 0.0
    return sum(a.accepted for a in docs if a.owner == user) / total


def skill_scores(corpus: Corpus, skill: SkillArea) -> list[UserSkillScore]:
    """Scores for every user with at least one answer in the skill area."""
    answered: dict[int, int] = {}
    accepted: dict[int, int] = {}
    total = 0
    for a in _skill_answers(corpus, skill):
        total += a.accepted
        if a.owner is None:
            continue
        answered[a.owner] = answered.get(a.owner, 0) + 1
        accepted[a.owner] = accepted.get(a.owner, 0) + int(a.accepted)
    out = []
    for user in sorted(answered):
        p = accepted[user] / answered[user]
        r = accepted[user] / total if total else 0.0
        out.append(UserSkillScore(user, skill.name, p, r, f1_score(p, r)))
    return out


def assign_levels(scores: Sequence[UserSkillScore]) -> list[UserSkillScore]:
    """Top 5% by f1 are advanced, the next 20% intermediate, the rest beginners.

    Both cutoffs use the ceiling so small populations still get an advanced tier.
    Returned in rank order.
    """
    if not scores:
        raise LabelError("cannot assign levels to an empty population")
    ranked = sorted(scores, key=lambda s: (-s.f1, s.user))
    n = len(ranked)
    n_adv = -(-n * ADVANCED_PERCENT // 100)
    n_int = -(-n * INTERMEDIATE_PERCENT // 100)
    out = []
    for rank, s in enumerate(ranked):
        if rank < n_adv:
            level = KnowledgeLevel.ADVANCED
        elif rank < n_adv + n_int:
            level = KnowledgeLevel.INTERMEDIATE
        else:
            level = KnowledgeLevel.BEGINNER
        out.append(UserSkillScore(s.user, s.skill, s.precision, s.recall, s.f1, level))
    return out


def classify_shape(levels: Iterable[KnowledgeLevel]) -> ExpertiseShape:
    levels = [KnowledgeLevel(lv) for lv in levels]
    n_adv = levels.count(KnowledgeLevel.ADVANCED)
    n_int = levels.count(KnowledgeLevel.INTERMEDIATE)
    if n_adv >= 2:
        return ExpertiseShape.C_SHAPED
    if n_adv == 1 and n_int >= 1:
        return ExpertiseShape.T_SHAPED
    return ExpertiseShape.NON_EXPERT


@dataclass(frozen=True)
class UserLabels:
    """Per-skill scores, per-user levels and shapes for one domain."""

    skills: tuple[str, ...]
    scores: dict[str, list[UserSkillScore]]
    levels: dict[int, dict[str, KnowledgeLevel]]
    shapes: dict[int, ExpertiseShape]
    fallthrough: tuple[int, ...] = field(default=())

    def advanced_skills(self, user: int) -> list[str]:
        lv = self.levels.get(user, {})
        return [s for s in self.skills if lv.get(s) == KnowledgeLevel.ADVANCED]

    def relation(self, user: int, skill: str) -> ExpertiseShape:
        """Shape of ``user`` with respect to one skill area."""
        shape = self.shapes.get(user, ExpertiseShape.NON_EXPERT)
        if shape == ExpertiseShape.NON_EXPERT or skill not in self.advanced_skills(user):
            return ExpertiseShape.NON_EXPERT
        return shape


def label_users(corpus: Corpus, skills: Sequence[SkillArea]) -> UserLabels:
    names = tuple(s.name for s in skills)
    scores: dict[str, list[UserSkillScore]] = {}
    levels: dict[int, dict[str, KnowledgeLevel]] = {
        u: {n: KnowledgeLevel.BEGINNER for n in names} for u in sorted(corpus.users)
    }
    for skill in skills:
        raw = skill_scores(corpus, skill)
        ranked = assign_levels(raw) if raw else []
        scores[skill.name] = sorted(ranked, key=lambda s: s.user)
        for s in ranked:
            levels[s.user][skill.name] = s.level
    shapes = {u: classify_shape(lv.values()) for u, lv in levels.items()}
    fall = tuple(
        u for u, lv in levels.items()
        if list(lv.values()).count(KnowledgeLevel.ADVANCED) == 1
        and KnowledgeLevel.INTERMEDIATE not in lv.values()
    )
    if fall:
        logger.info("%d users advanced in one skill without intermediates -> non_expert", len(fall))
    return UserLabels(names, scores, levels, shapes, fall)


# --- golden set ---------------------------------------------------------------


@dataclass(frozen=True)
class GoldenPair:
    user: int
    skill: str
    target: int
    split: str


MODES = ("t_ranking", "c_ranking")


def target_shape(mode: str) -> ExpertiseShape:
    if mode == "t_ranking":
        return ExpertiseShape.T_SHAPED
    if mode == "c_ranking":
        return ExpertiseShape.C_SHAPED
    raise LabelError(f"unknown mode {mode!r}; expected one of {MODES}")


def relevance_grade(labels: UserLabels, user: int, skill: str, mode: str = "t_ranking") -> int:
    """2 for the target shape in this skill, 1 for the other expert shape, else 0."""
    wanted = target_shape(mode)
    rel = labels.relation(user, skill)
    if rel == ExpertiseShape.NON_EXPERT:
        return 0
    return 2 if rel == wanted else 1


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(SPLIT_SHARES[0] * n + 0.5)
    n_val = min(n - n_train, int(SPLIT_SHARES[1] * n + 0.5))
    return n_train, n_val, n - n_train - n_val


def split_pairs(pairs: Sequence[tuple[int, str, int]], rng: np.random.Generator) -> list[GoldenPair]:
    out = []
    for target in (1, 0, -1):
        group = sorted((p for p in pairs if p[2] == target), key=lambda p: (p[1], p[0]))
        order = rng.permutation(len(group))
        n_train, n_val, _ = split_counts(len(group))
        for rank, idx in enumerate(order):
            user, skill, t = group[idx]
            split = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
            out.append(GoldenPair(user, skill, t, split))
    return sorted(out, key=lambda g: (g.skill, g.user))


def build_golden_set(
    corpus: Corpus,
    skills: Sequence[SkillArea],
    labels: UserLabels,
    seed: int,
    mode: str = "t_ranking",
    negative_ratio: float = 2.0,
) -> list[GoldenPair]:
    """Labelled (user, skill) pairs with targets 1 / 0 / -1 and a 60/20/20 split.

    Target 1 marks the target shape in the skill, 0 the other expert shape; -1 goes to
    users who are non-experts *in that skill*. Negatives are sampled per skill at
    ``negative_ratio`` times the expert pairs, experts of other skills first since they
    are the informative contrast, then plain non-experts.
    """
    wanted = target_shape(mode)
    rng = np.random.default_rng(seed)
    pairs: list[tuple[int, str, int]] = []
    users = sorted(corpus.users)
    for skill in skills:
        pos, negatives_expert, negatives_plain = [], [], []
        for u in users:
            rel = labels.relation(u, skill.name)
            if rel == wanted:
                pos.append((u, skill.name, 1))
            elif rel != ExpertiseShape.NON_EXPERT:
                pos.append((u, skill.name, 0))
            elif labels.shapes.get(u, ExpertiseShape.NON_EXPERT) != ExpertiseShape.NON_EXPERT:
                negatives_expert.append(u)
            else:
                negatives_plain.append(u)
        pairs.extend(pos)
        budget = int(math.ceil(negative_ratio * len(pos)))
        if budget <= len(negatives_expert):
            picked = sorted(rng.choice(negatives_expert, size=budget, replace=False).tolist()) if budget else []
        else:
            rest = min(budget - len(negatives_expert), len(negatives_plain))
            extra = rng.choice(negatives_plain, size=rest, replace=False).tolist() if rest else []
            picked = sorted(negatives_expert + extra)
        pairs.extend((int(u), skill.name, -1) for u in picked)
    return split_pairs(pairs, rng)


# --- CSV I/O ------------------------------------------------------------------


def write_labels(labels: UserLabels, scores_path: str | Path, shapes_path: str | Path) -> None:
    with open(scores_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "skill", "precision", "recall", "f1", "level"])
        for skill in labels.skills:
            for s in labels.scores.get(skill, []):
                w.writerow([s.user, s.skill, repr(s.precision), repr(s.recall), repr(s.f1), s.level.value])
    with open(shapes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "shape"])
        for u in sorted(labels.shapes):
            w.writerow([u, labels.shapes[u].value])


def read_labels(scores_path: str | Path, shapes_path: str | Path, skills: Sequence[str]) -> UserLabels:
    scores: dict[str, list[UserSkillScore]] = {s: [] for s in skills}
    with open(shapes_path, newline="", encoding="utf-8") as fh:
        shapes = {int(r["user"]): ExpertiseShape(r["shape"]) for r in csv.DictReader(fh)}
    levels = {u: {s: KnowledgeLevel.BEGINNER for s in skills} for u in shapes}
    with open(scores_path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            s = UserSkillScore(int(r["user"]), r["skill"], float(r["precision"]), float(r["recall"]),
                               float(r["f1"]), KnowledgeLevel(r["level"]))
            scores.setdefault(s.skill, []).append(s)
            levels.setdefault(s.user, {k: KnowledgeLevel.BEGINNER for k in skills})[s.skill] = s.level
    fall = tuple(
        u for u, lv in levels.items()
        if list(lv.values()).count(KnowledgeLevel.ADVANCED) == 1
        and KnowledgeLevel.INTERMEDIATE not in lv.values()
    )
    return UserLabels(tuple(skills), scores, levels, shapes, fall)


def write_golden(pairs: Sequence[GoldenPair], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "skill", "target", "split"])
        for g in pairs:
            w.writerow([g.user, g.skill, g.target, g.split])


def read_golden(path: str | Path) -> list[GoldenPair]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [GoldenPair(int(r["user"]), r["skill"], int(r["target"]), r["split"]) for r in csv.DictReader(fh)]


def write_skills(skills: Sequence[SkillArea], path: str | Path) -> None:
    payload = [{"name": s.name, "tags": list(s.tags), "documents": list(s.documents)} for s in skills]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def read_skills(path: str | Path) -> list[SkillArea]:
    with open(path, encoding="utf-8") as fh:
        return [SkillArea(d["name"], tuple(d["tags"]), tuple(d["documents"])) for d in json.load(fh)]


__all__ = [
    "CorpusError", "ExpertiseShape", "GoldenPair", "KnowledgeLevel", "LabelError", "SkillArea",
    "UserLabels", "UserSkillScore", "apply_skill_overrides", "assign_levels", "build_golden_set",
    "classify_shape", "cluster_tags", "extract_skill_areas", "label_users", "precision", "recall",
    "relevance_grade", "skill_scores", "tag_similarity", "top_tags",
]
