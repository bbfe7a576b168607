"""Ranking candidates per skill area and scoring rankings with graded relevance."""

from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .corpus import Corpus
from .dualcnn import DualCnnModel
from .embedding import tokenize
from .features import query_matrix, user_matrix
from .labels import SkillArea

MAX_GRADE = 2
METRICS = ("ndcg", "err", "mrr")
DEFAULT_CUTOFFS = (5, 10, 15, 20, 30, 50, 100)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Ranking:
    query: str
    entries: tuple[tuple[int, float], ...]
    relevance: Mapping[int, int] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, query: str, scores: Mapping[int, float], relevance: Mapping[int, int] | None = None):
        entries = tuple(sorted(((int(u), float(s)) for u, s in scores.items()), key=lambda e: (-e[1], e[0])))
        return cls(query, entries, dict(relevance or {}))

    @property
    def users(self) -> list[int]:
        return [u for u, _ in self.entries]

    def grades(self) -> list[int]:
        return [self.relevance.get(u, 0) for u, _ in self.entries]


def _check_cutoff(R: int) -> None:
    if R < 1:
        raise EvalError(f"cutoff must be >= 1, got {R}")


def _dcg(grades: Sequence[int], R: int) -> float:
    return sum((2 ** g - 1) / math.log2(r + 2) for r, g in enumerate(grades[:R]))


def ndcg_at(ranking: Ranking, R: int) -> float:
    _check_cutoff(R)
    grades = ranking.grades()
    ideal = _dcg(sorted(grades, reverse=True), R)
    if ideal == 0:
        return 0.0
    return _dcg(grades, R) / ideal


def err_at(ranking: Ranking, R: int) -> float:
    """Expected reciprocal rank under the cascade model."""
    _check_cutoff(R)
    total, reach = 0.0, 1.0
    for r, g in enumerate(ranking.grades()[:R], start=1):
        stop = (2 ** g - 1) / 2 ** MAX_GRADE
        total += reach * stop / r
        reach *= 1.0 - stop
    return total


def reciprocal_rank(ranking: Ranking, R: int, min_grade: int = MAX_GRADE) -> float:
    _check_cutoff(R)
    for r, g in enumerate(ranking.grades()[:R], start=1):
        if g >= min_grade:
            return 1.0 / r
    return 0.0


def mrr_at(rankings: Sequence[Ranking], R: int, min_grade: int = MAX_GRADE) -> float:
    if not rankings:
        raise EvalError("no rankings given")
    return sum(reciprocal_rank(r, R, min_grade) for r in rankings) / len(rankings)


def metric_value(metric: str, ranking: Ranking, R: int, mrr_min_grade: int = MAX_GRADE) -> float:
    if metric == "ndcg":
        return ndcg_at(ranking, R)
    if metric == "err":
        return err_at(ranking, R)
    if metric == "mrr":
        return reciprocal_rank(ranking, R, mrr_min_grade)
    raise EvalError(f"unknown metric {metric!r}")


# --- significance -----------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    significant: bool
    degenerate: bool = False


def student_t_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via the regularized incomplete beta."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> TTestResult:
    """Paired two-sided t-test. Constant differences (including all-zero) are degenerate."""
    if len(a) != len(b):
        raise EvalError(f"paired samples differ in length ({len(a)} vs {len(b)})")
    if len(a) < 2:
        raise EvalError("paired t-test needs at least two pairs")
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    df = len(d) - 1
    sd = float(np.std(d, ddof=1))
    # differences equal up to rounding (e.g. a = b + c) have no spread to test against
    if sd == 0.0 or np.ptp(d) <= 1e-12 * max(1.0, float(np.max(np.abs(d)))):
        return TTestResult(math.nan, df, math.nan, False, True)
    t = float(np.mean(d)) / (sd / math.sqrt(len(d)))
    p = student_t_two_sided(t, df)
    return TTestResult(t, df, p, p < alpha)


# --- rankers ----------------------------------------------------------------------------


def rank_by_model(model: DualCnnModel, query: SkillArea, candidates: Sequence[int], corpus: Corpus,
                  vectors: Mapping[int, np.ndarray], relevance: Mapping[int, int] | None = None) -> Ranking:
    """Order candidates by the model's o3 for (candidate documents, query documents)."""
    if not candidates:
        raise EvalError("no candidates to rank")
    cfg = model.config
    Eq = query_matrix(query, vectors, cfg.n, cfg.m_d)
    Ec = np.stack([user_matrix(corpus, u, vectors, cfg.n, cfg.m_d) for u in candidates])
    scores = model.score(Ec, np.broadcast_to(Eq, Ec.shape))
    return Ranking.from_scores(query.name, dict(zip(candidates, scores.tolist())), relevance)


@dataclass(frozen=True)
class DbaIndex:
    """Term statistics over all answers for the document-based language model."""

    term_counts: dict[int, Counter]
    lengths: dict[int, int]
    collection: Counter
    collection_len: int

    @classmethod
    def build(cls, corpus: Corpus, tokens: Mapping[int, Sequence[str]] | None = None) -> "DbaIndex":
        if tokens is None:
            tokens = {a.post_id: tokenize(a.body) for a in corpus.answers}
        counts = {pid: Counter(toks) for pid, toks in tokens.items()}
        collection: Counter = Counter()
        for c in counts.values():
            collection.update(c)
        return cls(counts, {pid: len(t) for pid, t in tokens.items()}, collection, sum(collection.values()))


def query_terms(skill: SkillArea) -> list[str]:
    return sorted({t for tag in skill.tags for t in tokenize(tag.replace("-", " "))})


def document_query_likelihood(index: DbaIndex, doc: int, terms: Sequence[str], lam: float) -> float:
    tf = index.term_counts.get(doc, Counter())
    length = index.lengths.get(doc, 0)
    prob = 1.0
    for t in terms:
        ml = tf[t] / length if length else 0.0
        bg = index.collection[t] / index.collection_len if index.collection_len else 0.0
        prob *= (1.0 - lam) * ml + lam * bg
    return prob


def rank_by_dba(query: SkillArea, candidates: Sequence[int], corpus: Corpus, lam: float = 0.5,
                index: DbaIndex | None = None, relevance: Mapping[int, int] | None = None) -> Ranking:
    """Document-based baseline: average query likelihood of each candidate's answers.

    Jelinek-Mercer smoothing with weight ``lam`` on the collection model; every answer
    is associated with its author with weight 1/|answers|. The mean is computed exactly
    so candidates with identical per-document probabilities tie exactly.
    """
    if not 0.0 <= lam <= 1.0:
        raise EvalError(f"lambda must lie in [0, 1], got {lam}")
    if not candidates:
        raise EvalError("no candidates to rank")
    index = DbaIndex.build(corpus) if index is None else index
    terms = query_terms(query)
    scores = {}
    for user in candidates:
        docs = corpus.answers_by_user.get(user, ())
        if not docs:
            scores[user] = 0.0
            continue
        exact = sum(Fraction(document_query_likelihood(index, d, terms, lam)) for d in docs)
        scores[user] = float(exact / len(docs))
    return Ranking.from_scores(query.name, scores, relevance)


def random_rankings(query: str, candidates: Sequence[int], relevance: Mapping[int, int],
                    rng: np.random.Generator, count: int = 100) -> list[Ranking]:
    out = []
    cands = np.asarray(sorted(candidates))
    for _ in range(count):
        perm = rng.permutation(cands)
        entries = tuple((int(u), float(len(perm) - i)) for i, u in enumerate(perm))
        out.append(Ranking(query, entries, dict(relevance)))
    return out


# --- tables and reports -----------------------------------------------------------------


@dataclass
class MetricTable:
    """Per-query metric values for one system; rankings lists are averaged per query."""

    system: str
    values: dict[tuple[str, int, str], float] = field(default_factory=dict)

    @classmethod
    def compute(cls, system: str, rankings: Mapping[str, Sequence[Ranking]],
                cutoffs: Iterable[int] = DEFAULT_CUTOFFS, mrr_min_grade: int = MAX_GRADE) -> "MetricTable":
        table = cls(system)
        for metric, R in itertools.product(METRICS, sorted(set(cutoffs))):
            for query in sorted(rankings):
                runs = rankings[query]
                table.values[(metric, R, query)] = sum(
                    metric_value(metric, r, R, mrr_min_grade) for r in runs) / len(runs)
        return table

    @property
    def queries(self) -> list[str]:
        return sorted({q for _, _, q in self.values})

    @property
    def cutoffs(self) -> list[int]:
        return sorted({R for _, R, _ in self.values})

    def per_query(self, metric: str, R: int) -> list[float]:
        return [self.values[(metric, R, q)] for q in self.queries]

    def macro(self, metric: str, R: int) -> float:
        vals = self.per_query(metric, R)
        return sum(vals) / len(vals) if vals else 0.0


def compare(a: MetricTable, b: MetricTable, metric: str, R: int, alpha: float = 0.05) -> TTestResult:
    if a.queries != b.queries:
        raise EvalError("systems were evaluated on different queries")
    return paired_t_test(a.per_query(metric, R), b.per_query(metric, R), alpha)


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def write_rankings(rankings: Iterable[Ranking], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query", "rank", "user", "score", "grade"])
        for r in rankings:
            for rank, (user, score) in enumerate(r.entries, start=1):
                w.writerow([r.query, rank, user, _fmt(score), r.relevance.get(user, 0)])


def read_rankings(path: str | Path) -> dict[str, Ranking]:
    rows: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["query"], []).append((int(r["rank"]), int(r["user"]), float(r["score"]), int(r["grade"])))
    out = {}
    for q, items in rows.items():
        items.sort()
        out[q] = Ranking(q, tuple((u, s) for _, u, s, _ in items), {u: g for _, u, _, g in items})
    return out


def t_test_rows(tables: Sequence[MetricTable], alpha: float = 0.05):
    rows = []
    for a, b in itertools.combinations(tables, 2):
        for metric in METRICS:
            for R in a.cutoffs:
                rows.append((metric, R, a.system, b.system, compare(a, b, metric, R, alpha)))
    return rows


def emit_report(tables: Sequence[MetricTable], tests, out_dir: str | Path, charts: bool = True) -> list[Path]:
    """Write metrics.csv, ttests.csv and metric-vs-R charts into ``out_dir``.

    ``tests`` holds ``(metric, R, system_a, system_b, TTestResult)`` rows, e.g. from
    :func:`t_test_rows`.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvalError(f"cannot write report to {out}: {exc}") from None
    metrics_path, tests_path = out / "metrics.csv", out / "ttests.csv"
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "metric", "R", "query", "value"])
        for t in tables:
            for metric in METRICS:
                for R in t.cutoffs:
                    for q in t.queries:
                        w.writerow([t.system, metric, R, q, _fmt(t.values[(metric, R, q)])])
                    w.writerow([t.system, metric, R, "ALL", _fmt(t.macro(metric, R))])
    with open(tests_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "R", "system_a", "system_b", "t", "df", "p", "significant"])
        for metric, R, sa, sb, res in tests:
            w.writerow([metric, R, sa, sb, _fmt(res.t_statistic), res.degrees_of_freedom,
                        _fmt(res.p_value), str(res.significant).lower()])
    written = [metrics_path, tests_path]
    if charts and tables and tables[0].cutoffs:
        from .plots import line_chart
        for metric in METRICS:
            path = out / f"{metric}_vs_R.svg"
            series = {t.system: [t.macro(metric, R) for R in t.cutoffs] for t in tables}
            line_chart(tables[0].cutoffs, series, "R", f"{metric.upper()}@R", path)
            written.append(path)
    return written
