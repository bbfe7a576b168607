from datetime import datetime, timedelta, timezone

import pytest

from tshape.corpus import ANSWER, QUESTION, Post

T0 = datetime(2015, 3, 1, tzinfo=timezone.utc)


def at(seconds: int) -> datetime:
    return T0 + timedelta(seconds=seconds)


def question(pid, tags, owner=900, t=0, body="question"):
    return Post(pid, QUESTION, owner, at(t), body, frozenset(tags))


def answer(pid, parent, owner, t=0, accepted=False, body="answer"):
    return Post(pid, ANSWER, owner, at(t), body, parent_id=parent, accepted=accepted)


@pytest.fixture
def three_post_xml(tmp_path):
    path = tmp_path / "Posts.xml"
    path.write_text(
        '<?xml version="1.0" encoding="utf-8"?>\n<posts>\n'
        '  <row Id="1" PostTypeId="1" AcceptedAnswerId="3" OwnerUserId="9" Tags="&lt;java&gt;" '
        'Body="&lt;p&gt;How?&lt;/p&gt;" CreationDate="2015-03-01T10:00:00.000" />\n'
        '  <row Id="2" PostTypeId="2" ParentId="1" OwnerUserId="10" Body="&lt;p&gt;Like this&lt;/p&gt;" '
        'CreationDate="2015-03-01T11:00:00.000" />\n'
        '  <row Id="3" PostTypeId="2" ParentId="1" OwnerUserId="11" Body="&lt;p&gt;Or that&lt;/p&gt;" '
        'CreationDate="2015-03-01T12:00:00.000" />\n'
        "</posts>\n",
        encoding="utf-8",
    )
    return path


def fast_config(tmp_path, **sections):
    """A seconds-scale pipeline config on a small synthetic corpus."""
    raw = {
        "seed": 7,
        "paths": {"cache_dir": str(tmp_path / "cache"), "output_dir": str(tmp_path / "out")},
        "synth": {"num_t_shaped": 8, "num_c_shaped": 4, "num_non_expert": 40, "questions_per_skill": 120},
        "embedding": {"num_topics": 6, "alpha": 0.1, "iterations": 30, "fold_in_sweeps": 10},
        "model": {"n": 12, "m_c": 4, "m_q": 4, "activation": "tanh"},
        "training": {"epochs": 4, "patience": 2},
        "eval": {"cutoffs": [5, 10], "random_permutations": 5},
    }
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return raw
