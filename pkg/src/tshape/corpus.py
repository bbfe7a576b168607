"""Ingestion and indexing of community question-answering posts.

Two input formats are supported: the Stack Exchange ``Posts.xml`` data dump and a
line-delimited JSON format whose keys mirror :class:`Post`. Both readers go through
the same validation path, so equivalent inputs produce equal corpora.
"""

from __future__ import annotations

import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

CORPUS_MAGIC = "ESM-CORPUS-v1"

QUESTION = "question"
ANSWER = "answer"


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus input."""


@dataclass(frozen=True)
class Post:
    post_id: int
    kind: str
    owner: int | None
    created_at: datetime
    body: str = ""
    tags: frozenset[str] = frozenset()
    parent_id: int | None = None
    accepted: bool = False

    @property
    def is_answer(self) -> bool:
        return self.kind == ANSWER


@dataclass(frozen=True)
class IngestReport:
    warnings: tuple[str, ...] = ()
    skipped: int = 0


@dataclass(frozen=True)
class Corpus:
    """Validated, indexed post collection.

    Only answers count as documents. ``answers_by_user`` and ``answers_by_tag`` hold
    answer ids in chronological order (ties broken by post id).
    """

    posts: dict[int, Post]
    users: frozenset[int]
    tag_counts: dict[str, int]
    answers_by_user: dict[int, tuple[int, ...]]
    answers_by_tag: dict[str, tuple[int, ...]]
    report: IngestReport = field(default=IngestReport(), compare=False)

    @property
    def answers(self) -> list[Post]:
        return sorted((p for p in self.posts.values() if p.is_answer), key=_chrono)

    @property
    def questions(self) -> list[Post]:
        return sorted((p for p in self.posts.values() if not p.is_answer), key=_chrono)

    def parent(self, answer: Post) -> Post:
        return self.posts[answer.parent_id]

    def questions_with_tag(self, tag: str) -> set[int]:
        return {p.post_id for p in self.posts.values() if not p.is_answer and tag in p.tags}

    def __len__(self) -> int:
        return len(self.posts)


def _chrono(post: Post) -> tuple[datetime, int]:
    return (post.created_at, post.post_id)


def build_corpus(posts: Iterable[Post], skipped: int = 0, warnings: Iterable[str] = ()) -> Corpus:
    """Validate raw posts and build the indexes.

    Answers whose parent is missing are dropped with a warning; questions without tags
    likewise. Duplicate ids and multiple accepted answers per question raise.
    """
    warnings = list(warnings)
    by_id: dict[int, Post] = {}
    for post in posts:
        if post.post_id in by_id:
            raise CorpusError(f"duplicate post id {post.post_id}")
        by_id[post.post_id] = post

    kept: dict[int, Post] = {}
    for pid in sorted(by_id):
        post = by_id[pid]
        if post.kind == QUESTION and not post.tags:
            warnings.append(f"question {pid} has no tags; dropped")
            continue
        kept[pid] = post
    accepted_seen: dict[int, int] = {}
    for pid in sorted(kept):
        post = kept[pid]
        if not post.is_answer:
            continue
        parent = kept.get(post.parent_id) if post.parent_id is not None else None
        if parent is None or parent.is_answer:
            warnings.append(f"answer {pid} references unknown question {post.parent_id}; dropped")
            del kept[pid]
            continue
        if post.accepted:
            if post.parent_id in accepted_seen:
                raise CorpusError(
                    f"question {post.parent_id} has more than one accepted answer "
                    f"({accepted_seen[post.parent_id]}, {pid})"
                )
            accepted_seen[post.parent_id] = pid

    answers = sorted((p for p in kept.values() if p.is_answer), key=_chrono)
    by_user: dict[int, list[int]] = {}
    by_tag: dict[str, list[int]] = {}
    for a in answers:
        if a.owner is not None:
            by_user.setdefault(a.owner, []).append(a.post_id)
        for tag in sorted(kept[a.parent_id].tags):
            by_tag.setdefault(tag, []).append(a.post_id)
    tag_counts: dict[str, int] = {}
    for p in kept.values():
        for tag in p.tags:
            if not p.is_answer:
                tag_counts[tag] = tag_counts.get(tag, 0) + 1

    for w in warnings:
        logger.warning(w)
    return Corpus(
        posts=kept,
        users=frozenset(by_user),
        tag_counts=dict(sorted(tag_counts.items())),
        answers_by_user={u: tuple(v) for u, v in sorted(by_user.items())},
        answers_by_tag={t: tuple(v) for t, v in sorted(by_tag.items())},
        report=IngestReport(tuple(warnings), skipped),
    )


def documents_of_user(corpus: Corpus, user: int) -> list[Post]:
    return [corpus.posts[i] for i in corpus.answers_by_user.get(user, ())]


def documents_of_tagset(corpus: Corpus, tags: Iterable[str]) -> list[Post]:
    """Answers to questions carrying at least one of ``tags``, chronologically."""
    tags = set(tags)
    if not tags:
        raise CorpusError("tag set must be nonempty")
    ids = {i for t in tags for i in corpus.answers_by_tag.get(t, ())}
    return sorted((corpus.posts[i] for i in ids), key=_chrono)


# --- readers -----------------------------------------------------------------


def parse_timestamp(value: str) -> datetime:
    """Parse dump (naive, UTC) or RFC 3339 timestamps into aware UTC datetimes."""
    text = value.strip()
    if text.endswith("Z") or text.endswith("z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def split_dump_tags(raw: str | None) -> frozenset[str]:
    # dump tags look like "<java><spring-mvc>"; newer dumps use "|java|spring-mvc|"
    if not raw:
        return frozenset()
    cleaned = raw.replace("><", "|").strip("<>|")
    return frozenset(t for t in cleaned.split("|") if t)


def _opt_int(value: str | None) -> int | None:
    if value is None or value == "":
        return None
    return int(value)


def ingest_xml(path: str | Path) -> Corpus:
    raw: list[Post] = []
    accepted_ids: dict[int, int] = {}
    skipped = 0
    try:
        for _, elem in ET.iterparse(str(path), events=("end",)):
            if elem.tag != "row":
                continue
            a = dict(elem.attrib)
            elem.clear()
            try:
                pid = int(a["Id"])
                ptype = a.get("PostTypeId")
            except (KeyError, ValueError) as exc:
                raise CorpusError(f"{path}: row without a valid Id ({exc})") from None
            if ptype not in ("1", "2"):
                skipped += 1
                continue
            created = parse_timestamp(a.get("CreationDate", "1970-01-01T00:00:00"))
            owner = _opt_int(a.get("OwnerUserId"))
            body = a.get("Body", "")
            if ptype == "1":
                acc = _opt_int(a.get("AcceptedAnswerId"))
                if acc is not None:
                    accepted_ids[pid] = acc
                raw.append(Post(pid, QUESTION, owner, created, body, split_dump_tags(a.get("Tags"))))
            else:
                raw.append(Post(pid, ANSWER, owner, created, body, parent_id=_opt_int(a.get("ParentId"))))
    except ET.ParseError as exc:
        line, col = exc.position
        raise CorpusError(f"{path}:{line}:{col}: malformed XML ({exc})") from None

    posts = [
        _with_accepted(p, accepted_ids.get(p.parent_id) == p.post_id) if p.is_answer else p
        for p in raw
    ]
    return build_corpus(posts, skipped=skipped)


def _with_accepted(post: Post, accepted: bool) -> Post:
    if post.accepted == accepted:
        return post
    return Post(post.post_id, post.kind, post.owner, post.created_at, post.body, post.tags,
                post.parent_id, accepted)


_REQUIRED = ("post_id", "kind", "created_at")


def _post_from_record(rec: dict, where: str) -> Post:
    for key in _REQUIRED:
        if key not in rec:
            raise CorpusError(f"{where}: missing required key '{key}'")
    kind = rec["kind"]
    if kind not in (QUESTION, ANSWER):
        raise CorpusError(f"{where}: unknown kind {kind!r}")
    try:
        created = parse_timestamp(rec["created_at"])
    except (TypeError, ValueError):
        raise CorpusError(f"{where}: bad created_at {rec['created_at']!r}") from None
    owner = rec.get("owner")
    if kind == ANSWER:
        if "parent_id" not in rec:
            raise CorpusError(f"{where}: missing required key 'parent_id'")
        return Post(int(rec["post_id"]), ANSWER, None if owner is None else int(owner), created,
                    rec.get("body") or "", parent_id=_opt_int(rec["parent_id"]),
                    accepted=bool(rec.get("accepted", False)))
    if "tags" not in rec:
        raise CorpusError(f"{where}: missing required key 'tags'")
    return Post(int(rec["post_id"]), QUESTION, None if owner is None else int(owner), created,
                rec.get("body") or "", frozenset(rec["tags"]))


def ingest_jsonl(path: str | Path) -> Corpus:
    posts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{where}: expected a JSON object")
            posts.append(_post_from_record(rec, where))
    return build_corpus(posts)


def ingest(path: str | Path) -> Corpus:
    """Dispatch on file extension (``.xml`` or ``.jsonl``/``.json``)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".xml":
        return ingest_xml(path)
    if suffix in (".jsonl", ".json", ".ndjson"):
        return ingest_jsonl(path)
    raise CorpusError(f"unsupported corpus format: {path}")


# --- serialization -------------------------------------------------------------


def post_to_record(post: Post) -> dict:
    return {
        "post_id": post.post_id,
        "kind": post.kind,
        "parent_id": post.parent_id,
        "owner": post.owner,
        "tags": sorted(post.tags),
        "body": post.body,
        "created_at": format_timestamp(post.created_at),
        "accepted": post.accepted,
    }


def iter_records(corpus: Corpus) -> Iterator[dict]:
    for pid in sorted(corpus.posts):
        yield post_to_record(corpus.posts[pid])


def write_jsonl(posts: Iterable[Post], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for post in posts:
            fh.write(json.dumps(post_to_record(post), sort_keys=True) + "\n")


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the JSON corpus cache (indexes are rebuilt on load)."""
    payload = {
        "posts": list(iter_records(corpus)),
        "warnings": list(corpus.report.warnings),
        "skipped": corpus.report.skipped,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CORPUS_MAGIC + "\n")
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_corpus(path: str | Path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CORPUS_MAGIC:
            raise CorpusError(f"{path}: expected header {CORPUS_MAGIC!r}, found {header!r}")
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}: corrupt corpus cache ({exc.msg})") from None
    posts = [_post_from_record(r, f"{path}[{i}]") for i, r in enumerate(payload["posts"])]
    corpus = build_corpus(posts)
    return Corpus(corpus.posts, corpus.users, corpus.tag_counts, corpus.answers_by_user,
                  corpus.answers_by_tag,
                  IngestReport(tuple(payload.get("warnings", ())), payload.get("skipped", 0)))
