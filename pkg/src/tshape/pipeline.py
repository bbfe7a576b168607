"""Staged, content-addressed execution of the whole experiment.

Stages run in a fixed order: corpus -> skills -> labels -> embed -> train -> rank -> eval.
Each stage writes its files to ``cache_dir/<stage>/<key>/`` where the key hashes the
stage's own settings together with the keys of the stages it reads. A manifest with
file digests sits next to the outputs; a missing or altered file invalidates the
stage, and a recomputed stage forces everything downstream of it to recompute.
Downstream stages always read their inputs back from disk, so a cached run and a
fresh run see the same bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import dualcnn, embedding
from .config import ConfigError, PipelineConfig
from .corpus import Corpus, ingest, load_corpus, save_corpus
from .evaluation import (
    METRICS, DbaIndex, MetricTable, Ranking, emit_report, rank_by_dba, rank_by_model, random_rankings,
    read_rankings, t_test_rows, write_rankings,
)
from .features import document_vectors, pair_data, tokenized_answers
from .labels import (
    build_golden_set, extract_skill_areas, label_users, load_overrides, read_golden, read_labels, read_skills,
    relevance_grade, write_golden, write_labels, write_skills,
)
from .plots import line_chart
from .synth import generate_synthetic, write_synthetic

logger = logging.getLogger(__name__)

STAGES = ("corpus", "skills", "labels", "embed", "train", "rank", "eval")
PARENTS = {
    "corpus": (),
    "skills": ("corpus",),
    "labels": ("corpus", "skills"),
    "embed": ("corpus",),
    "train": ("corpus", "skills", "labels", "embed"),
    "rank": ("corpus", "skills", "labels", "embed", "train"),
    "eval": ("rank",),
}
SYSTEMS = ("cnn", "dba", "random")
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_random(rankings: Sequence[Ranking], path: Path) -> None:
    runs: dict[str, int] = {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "query", "rank", "user", "grade"])
        for r in rankings:
            run = runs[r.query] = runs.get(r.query, -1) + 1
            for rank, (user, _) in enumerate(r.entries, start=1):
                w.writerow([run, r.query, rank, user, r.relevance.get(user, 0)])


def _read_random(path: Path) -> dict[str, list[Ranking]]:
    rows: dict[tuple[str, int], list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault((r["query"], int(r["run"])), []).append((int(r["rank"]), int(r["user"]), int(r["grade"])))
    out: dict[str, list[Ranking]] = {}
    for (q, _), items in sorted(rows.items()):
        items.sort()
        entries = tuple((u, float(len(items) - i)) for i, (_, u, _) in enumerate(items))
        out.setdefault(q, []).append(Ranking(q, entries, {u: g for _, u, g in items}))
    return out


@dataclass
class Pipeline:
    config: PipelineConfig
    keys: dict[str, str] = field(default_factory=dict)
    dirs: dict[str, Path] = field(default_factory=dict)
    status: dict[str, str] = field(default_factory=dict)

    @property
    def cache(self) -> Path:
        return Path(self.config.paths.cache_dir)

    # -- generic stage machinery ---------------------------------------------------

    def _payload(self, stage: str) -> dict:
        c = self.config
        if stage == "corpus":
            if c.paths.corpus is None:
                return {"synth": c.synth.to_dict()}
            return {"ingest": _file_digest(Path(c.paths.corpus)), "suffix": Path(c.paths.corpus).suffix.lower()}
        if stage == "skills":
            ov = c.skills.override_file
            return {"skills": dataclasses.asdict(c.skills) | {"override_file": None},
                    "overrides": load_overrides(ov) if ov else None}
        if stage == "labels":
            return dataclasses.asdict(c.labels)
        if stage == "embed":
            return dataclasses.asdict(c.embedding)
        if stage == "train":
            return {"model": dataclasses.asdict(c.model), "training": dataclasses.asdict(c.training)}
        if stage == "rank":
            e = c.eval
            return {"candidates": e.candidates, "lambda": e.dba_lambda, "perms": e.random_permutations,
                    "seed": e.seed, "mode": c.labels.mode}
        if stage == "eval":
            return {"cutoffs": list(c.eval.cutoffs), "mrr_min_grade": c.eval.mrr_min_grade}
        raise KeyError(stage)

    @staticmethod
    def _valid(d: Path) -> bool:
        mf = d / MANIFEST
        if not mf.is_file():
            return False
        try:
            files = json.loads(mf.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return False
        return all((d / name).is_file() and _file_digest(d / name) == dig for name, dig in files.items())

    def _stage(self, stage: str, compute: Callable[[Path], None]) -> Path:
        parents = PARENTS[stage]
        try:
            payload = self._payload(stage)
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            raise StageError(stage, exc) from exc
        key = _digest({"stage": stage, "parents": [self.keys[p] for p in parents], "payload": payload})
        d = self.cache / stage / key
        forced = any(self.status.get(p) == "computed" for p in parents)
        if not forced and self._valid(d):
            self.status[stage] = "cached"
        else:
            tmp = self.cache / stage / f".{key}.tmp"
            shutil.rmtree(tmp, ignore_errors=True)
            tmp.mkdir(parents=True)
            try:
                compute(tmp)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001
                shutil.rmtree(tmp, ignore_errors=True)
                raise StageError(stage, exc) from exc
            files = {p.name: _file_digest(p) for p in sorted(tmp.iterdir()) if p.is_file()}
            (tmp / MANIFEST).write_text(json.dumps(files, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            shutil.rmtree(d, ignore_errors=True)
            tmp.rename(d)
            self.status[stage] = "computed"
        logger.info("%-6s %s (%s)", stage, self.status[stage], key)
        self.keys[stage], self.dirs[stage] = key, d
        return d

    # -- stages -----------------------------------------------------------------------

    def corpus(self) -> Corpus:
        c = self.config

        def compute(out: Path):
            if c.paths.corpus is None:
                data = generate_synthetic(c.synth)
                write_synthetic(data, out / "corpus.jsonl", out / "truth.csv")
                corpus = ingest(out / "corpus.jsonl")
            else:
                corpus = ingest(c.paths.corpus)
            for w in corpus.report.warnings:
                logger.warning("%s", w)
            save_corpus(corpus, out / "corpus.esm")

        d = self._stage("corpus", compute)
        return load_corpus(d / "corpus.esm")

    def skills(self, corpus: Corpus):
        s = self.config.skills

        def compute(out: Path):
            areas = extract_skill_areas(corpus, s.tag_limit, s.threshold, load_overrides(s.override_file), s.min_size)
            if not areas:
                raise ValueError("no skill areas survived clustering and overrides")
            write_skills(areas, out / "skills.json")

        return read_skills(self._stage("skills", compute) / "skills.json")

    def labels(self, corpus: Corpus, skills):
        cfg = self.config.labels

        def compute(out: Path):
            lab = label_users(corpus, skills)
            write_labels(lab, out / "scores.csv", out / "shapes.csv")
            gold = build_golden_set(corpus, skills, lab, cfg.seed, cfg.mode, cfg.negative_ratio)
            write_golden(gold, out / "golden.csv")

        d = self._stage("labels", compute)
        return read_labels(d / "scores.csv", d / "shapes.csv", [s.name for s in skills]), read_golden(d / "golden.csv")

    def embed(self, corpus: Corpus):
        e = self.config.embedding

        def compute(out: Path):
            tokens = tokenized_answers(corpus)
            model = embedding.fit_lda([tokens[k] for k in sorted(tokens)], e.num_topics, e.alpha, e.beta,
                                      e.iterations, e.seed)
            embedding.save_model(model, out / "lda.esm")
            vectors = document_vectors(corpus, embedding.LdaEmbedder(model, e.fold_in_sweeps), tokens)
            embedding.write_embeddings(vectors, out / "embeddings.csv")

        return embedding.read_embeddings(self._stage("embed", compute) / "embeddings.csv")

    def train(self, corpus, skills, golden, vectors, model_config: dualcnn.ModelConfig | None = None):
        mc = model_config or self.config.model

        def compute(out: Path):
            split = {name: [g for g in golden if g.split == name] for name in ("train", "validation")}
            if not split["train"] or not split["validation"]:
                raise ValueError("golden set has an empty train or validation split")
            train = pair_data(split["train"], corpus, skills, vectors, mc.n, mc.m_d)
            val = pair_data(split["validation"], corpus, skills, vectors, mc.n, mc.m_d)
            result = dualcnn.fit(dualcnn.DualCnnModel.initialize(mc), train, val, self.config.training)
            dualcnn.save_model(result.model, out / "model.esm")
            dualcnn.write_history(result.history, out / "history.csv")

        return dualcnn.load_model(self._stage("train", compute) / "model.esm")

    def candidates(self, corpus: Corpus, golden) -> list[int]:
        users = sorted(corpus.users)
        if self.config.eval.candidates == "heldout":
            seen = {g.user for g in golden if g.split in ("train", "validation")}
            users = [u for u in users if u not in seen]
        if not users:
            raise StageError("rank", "candidate pool is empty")
        return users

    def rank(self, corpus, skills, labels, golden, vectors, model) -> dict[str, dict[str, list[Ranking]]]:
        ev, mode = self.config.eval, self.config.labels.mode

        def compute(out: Path):
            cands = self.candidates(corpus, golden)
            rel = {s.name: {u: relevance_grade(labels, u, s.name, mode) for u in cands} for s in skills}
            write_rankings([rank_by_model(model, s, cands, corpus, vectors, rel[s.name]) for s in skills],
                           out / "rankings_cnn.csv")
            index = DbaIndex.build(corpus, tokenized_answers(corpus))
            write_rankings([rank_by_dba(s, cands, corpus, ev.dba_lambda, index, rel[s.name]) for s in skills],
                           out / "rankings_dba.csv")
            rng = np.random.default_rng(ev.seed)
            rand = [r for s in skills for r in random_rankings(s.name, cands, rel[s.name], rng, ev.random_permutations)]
            _write_random(rand, out / "rankings_random.csv")

        d = self._stage("rank", compute)
        return {
            "cnn": {q: [r] for q, r in read_rankings(d / "rankings_cnn.csv").items()},
            "dba": {q: [r] for q, r in read_rankings(d / "rankings_dba.csv").items()},
            "random": _read_random(d / "rankings_random.csv"),
        }

    def evaluate(self, rankings) -> list[MetricTable]:
        ev = self.config.eval
        tables = [MetricTable.compute(name, rankings[name], ev.cutoffs, ev.mrr_min_grade) for name in SYSTEMS]

        def compute(out: Path):
            emit_report(tables, t_test_rows(tables), out)

        self._stage("eval", compute)
        return tables

    # -- drivers ------------------------------------------------------------------------

    def run(self, until: str = "eval") -> dict:
        """Run stages up to and including ``until``; returns the loaded artifacts."""
        if until not in STAGES:
            raise ConfigError(f"unknown stage {until!r}")
        stop = STAGES.index(until)
        art: dict = {}
        art["corpus"] = self.corpus()
        if stop >= STAGES.index("skills"):
            art["skills"] = self.skills(art["corpus"])
        if stop >= STAGES.index("labels"):
            art["labels"], art["golden"] = self.labels(art["corpus"], art["skills"])
        if stop >= STAGES.index("embed"):
            art["vectors"] = self.embed(art["corpus"])
        if stop >= STAGES.index("train"):
            art["model"] = self.train(art["corpus"], art["skills"], art["golden"], art["vectors"])
        if stop >= STAGES.index("rank"):
            art["rankings"] = self.rank(art["corpus"], art["skills"], art["labels"], art["golden"],
                                        art["vectors"], art["model"])
        if stop >= STAGES.index("eval"):
            art["tables"] = self.evaluate(art["rankings"])
        return art

    def publish(self) -> list[Path]:
        """Copy the final report and rankings from the cache into the output directory."""
        out = Path(self.config.paths.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        copied = []
        for stage in ("eval", "rank", "train"):
            d = self.dirs.get(stage)
            if d is None:
                continue
            for p in sorted(d.iterdir()):
                if p.name != MANIFEST and p.suffix in (".csv", ".svg"):
                    shutil.copyfile(p, out / p.name)
                    copied.append(out / p.name)
        return copied


def _locked(config: PipelineConfig) -> FileLock:
    cache = Path(config.paths.cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    return FileLock(str(cache / ".lock"))


def run_pipeline(config: PipelineConfig, until: str = "eval", publish: bool = True) -> tuple[Pipeline, dict]:
    config.check_paths()
    pipe = Pipeline(config)
    try:
        with _locked(config).acquire(timeout=0):
            art = pipe.run(until)
            if publish and until == "eval":
                pipe.publish()
    except Timeout:
        raise StageError("lock", f"cache directory {config.paths.cache_dir} is in use by another run") from None
    return pipe, art


def sensitivity_sweep(config: PipelineConfig, parameter: str, values: Sequence[int],
                      cutoff: int = 10, out_dir: str | Path | None = None) -> list[tuple]:
    """Metric-vs-parameter curves for ``n`` (retraining per value) or the cutoff ``R``.

    Returns rows ``(parameter, value, system, metric, R, score)`` and writes
    ``sweep_<parameter>.csv`` plus one SVG per metric into ``out_dir``.
    """
    if parameter not in ("n", "R"):
        raise ConfigError(f"sweep parameter must be 'n' or 'R', got {parameter!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if any(int(v) < 1 for v in values):
        raise ConfigError(f"sweep values must be positive, got {list(values)}")
    values = sorted({int(v) for v in values})
    rows: list[tuple] = []
    config.check_paths()
    with _locked(config).acquire(timeout=0):
        pipe = Pipeline(config)
        art = pipe.run("rank")
        ev = config.eval
        if parameter == "R":
            for name in SYSTEMS:
                table = MetricTable.compute(name, art["rankings"][name], values, ev.mrr_min_grade)
                rows += [("R", R, name, m, R, table.macro(m, R)) for R in values for m in METRICS]
        else:
            base = dict(status=dict(pipe.status), keys=dict(pipe.keys))
            for n in values:
                mc = dataclasses.replace(config.model, n=n, f=min(config.model.f, n))
                sub = dataclasses.replace(config, model=mc)
                p = Pipeline(sub, keys=dict(base["keys"]), status=dict(base["status"]))
                model = p.train(art["corpus"], art["skills"], art["golden"], art["vectors"], mc)
                rk = p.rank(art["corpus"], art["skills"], art["labels"], art["golden"], art["vectors"], model)
                table = MetricTable.compute("cnn", rk["cnn"], [cutoff], ev.mrr_min_grade)
                rows += [("n", n, "cnn", m, cutoff, table.macro(m, cutoff)) for m in METRICS]
    out = Path(out_dir or config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"sweep_{parameter}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "value", "system", "metric", "R", "score"])
        for r in rows:
            w.writerow([*r[:5], repr(float(r[5]))])
    for metric in METRICS:
        series: dict[str, list[float]] = {}
        for r in rows:
            if r[3] == metric:
                series.setdefault(r[2], []).append(r[5])
        line_chart(values, series, parameter, f"{metric.upper()}" + (f"@{cutoff}" if parameter == "n" else "@R"),
                   out / f"{metric}_vs_{parameter}.svg")
    return rows
