import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import answer, at, question
from tshape.corpus import (
    CorpusError, build_corpus, documents_of_tagset, documents_of_user, ingest, ingest_jsonl, ingest_xml,
    load_corpus, post_to_record, save_corpus, write_jsonl,
)


def _write_xml(path, rows):
    path.write_text("<posts>\n" + "\n".join(rows) + "\n</posts>\n", encoding="utf-8")
    return path


def test_empty_posts_element(tmp_path):
    c = ingest_xml(_write_xml(tmp_path / "p.xml", []))
    assert len(c) == 0 and c.users == frozenset()


def test_accepted_flag_from_parent(three_post_xml):
    c = ingest_xml(three_post_xml)
    assert len(c) == 3
    assert c.posts[3].accepted and not c.posts[2].accepted
    assert c.tag_counts == {"java": 1}
    assert c.users == {10, 11}
    assert c.posts[1].tags == {"java"}


def test_answer_with_unknown_parent_dropped(tmp_path):
    path = _write_xml(tmp_path / "p.xml", [
        '<row Id="1" PostTypeId="1" Tags="&lt;a&gt;" CreationDate="2015-01-01T00:00:00" />',
        '<row Id="2" PostTypeId="2" ParentId="99" OwnerUserId="4" CreationDate="2015-01-02T00:00:00" />',
    ])
    c = ingest_xml(path)
    assert 2 not in c.posts
    assert len(c.report.warnings) == 1


def test_other_post_types_skipped_and_counted(tmp_path):
    path = _write_xml(tmp_path / "p.xml", [
        '<row Id="1" PostTypeId="1" Tags="&lt;a&gt;&lt;b&gt;" CreationDate="2015-01-01T00:00:00" />',
        '<row Id="5" PostTypeId="4" CreationDate="2015-01-01T00:00:00" />',
        '<row Id="6" PostTypeId="5" CreationDate="2015-01-01T00:00:00" />',
    ])
    c = ingest_xml(path)
    assert c.report.skipped == 2
    assert c.posts[1].tags == {"a", "b"}


def test_malformed_xml_reports_line(tmp_path):
    path = tmp_path / "bad.xml"
    path.write_text("<posts>\n<row Id='1'\n</posts>\n", encoding="utf-8")
    with pytest.raises(CorpusError, match=r"bad\.xml:\d+:\d+"):
        ingest_xml(path)


def test_duplicate_id_is_an_error():
    with pytest.raises(CorpusError, match="duplicate"):
        build_corpus([question(1, {"a"}), question(1, {"b"})])


def test_two_accepted_answers_rejected():
    with pytest.raises(CorpusError, match="more than one accepted"):
        build_corpus([question(1, {"a"}), answer(2, 1, 5, accepted=True), answer(3, 1, 6, accepted=True)])


def test_ownerless_answer_kept_but_not_a_user():
    c = build_corpus([question(1, {"a"}), answer(2, 1, None), answer(3, 1, 7)])
    assert 2 in c.posts
    assert c.users == {7}
    assert c.answers_by_tag["a"] == (2, 3)


def test_jsonl_equals_xml(three_post_xml, tmp_path):
    from_xml = ingest_xml(three_post_xml)
    path = tmp_path / "posts.jsonl"
    write_jsonl(from_xml.posts.values(), path)
    from_json = ingest_jsonl(path)
    assert from_json == from_xml
    for pid in from_xml.posts:
        assert post_to_record(from_json.posts[pid]) == post_to_record(from_xml.posts[pid])


def test_empty_jsonl(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("", encoding="utf-8")
    assert len(ingest_jsonl(path)) == 0


def test_jsonl_missing_key_names_line_and_key(tmp_path):
    path = tmp_path / "m.jsonl"
    good = {"post_id": 1, "kind": "question", "tags": ["a"], "created_at": "2015-01-01T00:00:00Z"}
    path.write_text(json.dumps(good) + "\n" + json.dumps({"kind": "question"}) + "\n", encoding="utf-8")
    with pytest.raises(CorpusError, match=r"m\.jsonl:2: missing required key 'post_id'"):
        ingest_jsonl(path)


def test_jsonl_unknown_kind(tmp_path):
    path = tmp_path / "k.jsonl"
    path.write_text(json.dumps({"post_id": 1, "kind": "comment", "created_at": "2015-01-01T00:00:00Z"}) + "\n")
    with pytest.raises(CorpusError, match="unknown kind"):
        ingest_jsonl(path)


def test_ingest_dispatch(tmp_path, three_post_xml):
    assert len(ingest(three_post_xml)) == 3
    with pytest.raises(CorpusError, match="unsupported"):
        ingest(tmp_path / "posts.csv")


def test_documents_of_user_ordering():
    c = build_corpus([
        question(1, {"a"}),
        answer(2, 1, 5, t=5), answer(4, 1, 5, t=2),
        answer(7, 1, 6, t=3), answer(3, 1, 6, t=3),
    ])
    assert [p.created_at for p in documents_of_user(c, 5)] == [at(2), at(5)]
    assert [p.post_id for p in documents_of_user(c, 6)] == [3, 7]
    assert documents_of_user(c, 12345) == []


def test_documents_of_tagset_union_without_duplicates():
    c = build_corpus([
        question(1, {"java", "spring"}), question(2, {"python"}), question(3, {"spring-mvc"}),
        answer(10, 1, 5, t=1), answer(11, 2, 5, t=2), answer(12, 3, 6, t=3),
    ])
    assert [p.post_id for p in documents_of_tagset(c, {"java"})] == [10]
    assert [p.post_id for p in documents_of_tagset(c, {"spring", "spring-mvc"})] == [10, 12]
    with pytest.raises(CorpusError):
        documents_of_tagset(c, set())


def test_cache_round_trip(tmp_path, three_post_xml):
    c = ingest_xml(three_post_xml)
    save_corpus(c, tmp_path / "c.esm")
    assert load_corpus(tmp_path / "c.esm") == c
    (tmp_path / "bad.esm").write_text("ESM-CORPUS-v0\n{}")
    with pytest.raises(CorpusError, match="ESM-CORPUS-v1"):
        load_corpus(tmp_path / "bad.esm")


@st.composite
def post_sets(draw):
    n_q = draw(st.integers(1, 6))
    tags = st.frozensets(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=3)
    posts = [question(i + 1, draw(tags), t=draw(st.integers(0, 50))) for i in range(n_q)]
    accepted = set()
    for j in range(draw(st.integers(0, 15))):
        parent = draw(st.integers(1, n_q))
        acc = parent not in accepted and draw(st.booleans())
        if acc:
            accepted.add(parent)
        owner = draw(st.one_of(st.none(), st.integers(1, 5)))
        posts.append(answer(100 + j, parent, owner, t=draw(st.integers(0, 5)), accepted=acc))
    return posts


def _xml_rows(posts):
    acc = {p.parent_id: p.post_id for p in posts if p.is_answer and p.accepted}
    rows = []
    for p in posts:
        attrs = {"Id": p.post_id, "CreationDate": p.created_at.strftime("%Y-%m-%dT%H:%M:%S.000"), "Body": p.body}
        if p.owner is not None:
            attrs["OwnerUserId"] = p.owner
        if p.is_answer:
            attrs.update(PostTypeId=2, ParentId=p.parent_id)
        else:
            attrs.update(PostTypeId=1, Tags="".join(f"&lt;{t}&gt;" for t in sorted(p.tags)))
            if p.post_id in acc:
                attrs["AcceptedAnswerId"] = acc[p.post_id]
        rows.append("<row " + " ".join(f'{k}="{v}"' for k, v in attrs.items()) + " />")
    return rows


@settings(max_examples=60, deadline=None)
@given(post_sets())
def test_readers_agree_and_indexes_are_consistent(tmp_path_factory, posts):
    d = tmp_path_factory.mktemp("eq")
    xml = ingest_xml(_write_xml(d / "p.xml", _xml_rows(posts)))
    write_jsonl(posts, d / "p.jsonl")
    assert ingest_jsonl(d / "p.jsonl") == xml
    answers = [p for p in xml.posts.values() if p.is_answer]
    assert sum(len(v) for v in xml.answers_by_user.values()) == sum(p.owner is not None for p in answers)
    for q in xml.questions:
        assert sum(a.accepted for a in answers if a.parent_id == q.post_id) <= 1
    for user, ids in xml.answers_by_user.items():
        keys = [(xml.posts[i].created_at, i) for i in ids]
        assert keys == sorted(keys)
