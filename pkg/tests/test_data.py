import json

import numpy as np
import pytest
from scipy import stats

from pqat.data import (Batch, DataError, Example, Vocab, build_batch, decode_sequence,
                       gen_choice_task, gen_kv_task, inject_distractor, load_dataset, save_dataset)
from pqat.perturb import ConfigError, Role

VS = 43


@pytest.fixture
def vocab():
    return Vocab.standard(VS)


def test_vocab_reserved_and_bijection(vocab):
    assert vocab.tokens[:3] == ["[CLS]", "[SEP]", "[PAD]"]
    assert (vocab.cls_id, vocab.sep_id, vocab.pad_id) == (0, 1, 2)
    assert len(vocab) == VS
    assert vocab.encode(vocab.decode(range(VS))) == list(range(VS))
    assert set(vocab.key_ids).isdisjoint(vocab.value_ids)


def test_vocab_confusion_classes(vocab):
    classes = vocab.confusion_classes()
    assert sum(len(c) for c in classes) == len(vocab.key_ids)
    for c in classes:
        for k in c:
            assert set(vocab.classmates(k)) == set(c) - {k}


def test_kv_single_pair_answer_position():
    for ex in gen_kv_task(50, 1, 10, 3):
        assert ex.span == (1, 1)


def test_kv_deterministic():
    a = gen_kv_task(30, 4, VS, 11)
    b = gen_kv_task(30, 4, VS, 11)
    assert a == b
    assert a != gen_kv_task(30, 4, VS, 12)


def test_kv_answer_identity(vocab):
    for ex in gen_kv_task(300, 5, VS, 0):
        pairs = dict(zip(ex.passage[0::2], ex.passage[1::2]))
        assert ex.passage[ex.span[0]] == pairs[ex.question[0]]
        assert len(pairs) == 5  # keys unique
        assert all(k in vocab.key_ids for k in pairs) and all(v in vocab.value_ids for v in pairs.values())
        ex.validate()


def test_kv_infeasible():
    with pytest.raises(ConfigError):
        gen_kv_task(10, 5, 13, 0)


def test_choice_two_options_one_pair(vocab):
    for ex in gen_choice_task(100, 1, 2, VS, 0):
        gold_value = ex.passage[1]
        assert ex.options[ex.choice] == [gold_value]
        other = ex.options[1 - ex.choice][0]
        assert other != gold_value and other in vocab.value_ids


def test_choice_exactly_one_correct():
    for ex in gen_choice_task(200, 4, 4, VS, 5):
        gold_value = ex.passage[ex.passage.index(ex.question[0]) + 1]
        assert [o[0] for o in ex.options].count(gold_value) == 1
        assert ex.options[ex.choice] == [gold_value]


def test_choice_gold_uniform():
    golds = [ex.choice for ex in gen_choice_task(10_000, 2, 4, 15, 0)]
    counts = np.bincount(golds, minlength=4)
    expected = 10_000 / 4
    sd = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - expected) < 3 * sd)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_choice_deterministic_and_bad_m():
    assert gen_choice_task(20, 3, 4, VS, 1) == gen_choice_task(20, 3, 4, VS, 1)
    with pytest.raises(ConfigError):
        gen_choice_task(5, 3, 1, VS, 0)


def test_distractor_properties(vocab):
    for ex in gen_kv_task(300, 4, VS, 2):
        d = inject_distractor(ex, vocab, 7)
        assert d.span == ex.span and d.passage[:len(ex.passage)] == ex.passage
        assert len(d.passage) == len(ex.passage) + 2 and d.distractor
        key2, val2 = d.passage[-2:]
        assert key2 in vocab.classmates(ex.question[0])
        assert val2 != ex.passage[ex.span[0]]
        assert d.passage[d.span[0]] == ex.passage[ex.span[0]]
    assert inject_distractor(ex, vocab, 7) == inject_distractor(ex, vocab, 7)


def test_distractor_on_choice_uses_wrong_option(vocab):
    for ex in gen_choice_task(100, 4, 4, VS, 2):
        d = inject_distractor(ex, vocab, 1)
        assert d.choice == ex.choice
        assert [d.passage[-1]] in [o for j, o in enumerate(ex.options) if j != ex.choice]


def test_batch_layout(vocab):
    ex = Example(passage=[3, 25], question=[3], span=(1, 1))
    b = build_batch([ex], vocab, 8)
    assert b.ids[0].tolist() == [0, 3, 25, 1, 3, 1, 2, 2]
    assert b.roles[0].tolist() == [Role.SPECIAL, Role.PASSAGE, Role.PASSAGE, Role.SPECIAL,
                                   Role.QUESTION, Role.SPECIAL, Role.SPECIAL, Role.SPECIAL]
    assert b.pad_mask[0].tolist() == [True] * 6 + [False] * 2
    assert b.starts.tolist() == [2] and b.ends.tolist() == [2]
    assert b.passage_ranges[0].tolist() == [1, 2]


def test_batch_roles_and_labels(vocab):
    exs = gen_kv_task(20, 4, VS, 0)
    b = build_batch(exs, vocab, 14)
    for r, ex in enumerate(exs):
        assert (b.roles[r] == Role.PASSAGE).sum() == len(ex.passage)
        assert (b.roles[r] == Role.QUESTION).sum() == len(ex.question)
        assert b.roles[r, b.starts[r]] == Role.PASSAGE and b.roles[r, b.ends[r]] == Role.PASSAGE
        assert b.ids[r, b.starts[r]] == ex.passage[ex.span[0]]


def test_choice_batch_layout(vocab):
    exs = gen_choice_task(3, 2, 4, VS, 0)
    b = build_batch(exs, vocab, 12)
    assert b.ids.shape == (12, 12) and b.m == 4 and b.task == "choice"
    ex = exs[0]
    row = b.ids[1].tolist()
    assert row[:10] == [0, *ex.passage, 1, ex.question[0], 1, ex.options[1][0], 1]
    assert b.roles[1, 8] == Role.OPTION
    assert not np.any((b.roles == Role.PASSAGE) & ((b.roles == Role.QUESTION) | (b.roles == Role.OPTION)))


def test_batch_round_trip(vocab):
    exs = gen_choice_task(5, 3, 3, VS, 4)
    b = build_batch(exs, vocab, 14)
    for n, ex in enumerate(exs):
        for j in range(3):
            dec = decode_sequence(b, n * 3 + j, vocab)
            assert dec == {"passage": vocab.decode(ex.passage), "question": vocab.decode(ex.question),
                           "option": vocab.decode(ex.options[j])}


def test_batch_overflow_names_example(vocab):
    exs = gen_kv_task(3, 4, VS, 0)
    with pytest.raises(DataError, match="example 0"):
        build_batch(exs, vocab, 8)


def test_dataset_file_round_trip(tmp_path, vocab):
    exs = gen_kv_task(25, 3, VS, 9)
    path = tmp_path / "d.jsonl"
    save_dataset(path, exs, vocab, {"task": "span", "seed": 9})
    lines = path.read_text().splitlines()
    assert len(lines) == 25
    rec = json.loads(lines[0])
    assert set(rec) == {"passage", "question", "answer", "meta"}
    loaded, v2 = load_dataset(path)
    assert loaded == exs and v2.tokens == vocab.tokens


def test_loader_validates(tmp_path, vocab):
    path = tmp_path / "bad.jsonl"
    rec = {"passage": ["k000a", "v001"], "question": ["k000a"], "answer": {"start": 2, "end": 2}}
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DataError, match="bad.jsonl:1"):
        load_dataset(path, vocab)
    rec["answer"] = {"start": 1, "end": 1, "choice": 0}
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DataError):
        load_dataset(path, vocab)
    rec["answer"] = {"start": 1, "end": 1}
    rec["passage"] = ["k000a", "nope"]
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DataError, match="unknown token"):
        load_dataset(path, vocab)
