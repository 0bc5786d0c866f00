import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quip.corpus import (BLANK, BOS, PAD, SEP, UNK, CorpusError, DatasetParseError, OversizedSentenceError,
                         SpanValidationError, TokenSequence, Vocabulary, build_passages, chunk_passages,
                         detokenize, find_unique, load_dataset, tokenize)


def _line(**overrides):
    obj = {"id": "p1", "context": ["Marie", "Curie", "discovered", "radium", "."],
           "qas": [{"qid": "q1", "question": ["who", "discovered", "radium", "?"], "answers": ["marie curie"],
                    "span": [1, 2]},
                   {"qid": "q2", "question": ["what", "did", "she", "find", "?"], "answers": ["radium"],
                    "span": [4, 4]}]}
    obj.update(overrides)
    return json.dumps(obj)


class TestVocabulary:
    def test_reserved_ids_fixed_and_distinct(self):
        v = Vocabulary(["zebra"])
        assert [v.id(t) for t in (PAD, BOS, SEP, UNK, BLANK)] == [0, 1, 2, 3, 4]
        assert (v.pad_id, v.bos_id, v.sep_id, v.unk_id, v.blank_id) == (0, 1, 2, 3, 4)

    def test_bijective(self, vocab):
        for i, tok in enumerate(vocab.id_to_token):
            assert vocab.id(tok) == i

    def test_build_is_order_independent(self):
        a = Vocabulary.build(["b a", "c"])
        b = Vocabulary.build(["c", "a b"])
        assert a.to_json() == b.to_json()

    def test_save_load(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.json")
        assert Vocabulary.load(tmp_path / "v.json").to_json() == vocab.to_json()

    def test_from_json_requires_reserved_prefix(self):
        with pytest.raises(CorpusError):
            Vocabulary.from_json(["the", "cat"])


class TestTokenize:
    def test_empty(self, vocab):
        assert tokenize("", vocab).ids == (vocab.bos_id,)

    def test_lookup(self, vocab):
        assert tokenize("the cat", vocab).ids == (vocab.bos_id, vocab.id("the"), vocab.id("cat"))

    def test_unknown(self, vocab):
        assert tokenize("the zzzqx", vocab).ids == (vocab.bos_id, vocab.id("the"), vocab.unk_id)

    def test_lowercases(self, vocab):
        assert tokenize("The CAT", vocab) == tokenize("the cat", vocab)

    def test_length_limit(self, vocab):
        with pytest.raises(CorpusError):
            tokenize("the cat sat", vocab, max_len=3)

    def test_sequences_start_with_bos(self):
        with pytest.raises(CorpusError):
            TokenSequence((5, 6))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from(["the", "cat", "sat", "on", "a", "mat", "."]), max_size=20))
    def test_round_trip(self, words):
        v = Vocabulary.build([["the", "cat", "sat", "on", "a", "mat", "."]])
        text = " ".join(words)
        assert detokenize(tokenize(text, v), v) == text


class TestChunkPassages:
    def test_two_then_one(self):
        assert chunk_passages([200, 200, 100], 456) == [[0, 1], [2]]

    def test_exact_fit(self):
        assert chunk_passages([456], 456) == [[0]]

    def test_four_then_one(self):
        assert chunk_passages([100] * 5, 456) == [[0, 1, 2, 3], [4]]

    def test_oversized(self):
        with pytest.raises(OversizedSentenceError):
            chunk_passages([10, 457], 456)

    def test_bad_limit(self):
        with pytest.raises(CorpusError):
            chunk_passages([1], 0)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(1, 50), max_size=40), st.integers(50, 120))
    def test_greedy_partition(self, lengths, max_len):
        chunks = chunk_passages(lengths, max_len)
        assert [i for c in chunks for i in c] == list(range(len(lengths)))
        for k, c in enumerate(chunks):
            assert sum(lengths[i] for i in c) <= max_len
            # greedy: the next sentence would not have fit
            if k + 1 < len(chunks):
                assert sum(lengths[i] for i in c) + lengths[chunks[k + 1][0]] > max_len

    def test_build_passages_respects_limit(self, vocab):
        words = ("the cat sat . " * 30).split()
        passages = build_passages([("doc", words)], vocab, max_len=20)
        assert all(len(p) <= 20 for p in passages)
        assert [w for p in passages for w in p.words] == words
        assert [p.id for p in passages][:2] == ["doc-0", "doc-1"]


class TestLoadDataset:
    def test_empty_file(self, tmp_path, vocab):
        path = tmp_path / "d.jsonl"
        path.write_text("")
        assert load_dataset(path, vocab) == []

    def test_fixture(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(_line() + "\n")
        v = Vocabulary.build([json.loads(_line())["context"], ["who", "what"]])
        entries = load_dataset(path, v)
        assert len(entries) == 1
        passage, records = entries[0]
        assert len(records) == 2
        assert records[0].answer_text == "marie curie"
        assert passage.text(records[0].answer_span, v) == "marie curie"

    def test_span_covering_bos(self, tmp_path, vocab):
        qas = [{"qid": "bad", "question": ["who"], "answers": [], "span": [0, 0]}]
        path = tmp_path / "d.jsonl"
        path.write_text(_line(qas=qas) + "\n")
        with pytest.raises(SpanValidationError) as err:
            load_dataset(path, vocab)
        assert err.value.qid == "bad"

    def test_span_past_end(self, tmp_path, vocab):
        qas = [{"qid": "q9", "question": ["who"], "answers": [], "span": [2, 9]}]
        path = tmp_path / "d.jsonl"
        path.write_text(_line(qas=qas) + "\n")
        with pytest.raises(SpanValidationError, match="q9"):
            load_dataset(path, vocab)

    def test_span_text_mismatch(self, tmp_path, vocab):
        qas = [{"qid": "q1", "question": ["who"], "answers": ["radium"], "span": [1, 2]}]
        path = tmp_path / "d.jsonl"
        path.write_text(_line(qas=qas) + "\n")
        with pytest.raises(SpanValidationError):
            load_dataset(path, vocab)

    def test_malformed_json_reports_line(self, tmp_path, vocab):
        path = tmp_path / "d.jsonl"
        path.write_text(_line() + "\n{not json\n")
        with pytest.raises(DatasetParseError) as err:
            load_dataset(path, vocab)
        assert err.value.line == 2

    def test_question_length_limit(self, tmp_path, vocab):
        qas = [{"qid": "long", "question": ["the"] * 50, "answers": [], "span": None}]
        path = tmp_path / "d.jsonl"
        path.write_text(_line(qas=qas) + "\n")
        with pytest.raises(SpanValidationError, match="long"):
            load_dataset(path, vocab)

    def test_null_span_allowed(self, tmp_path, vocab):
        qas = [{"qid": "u", "question": ["who"], "answers": [], "span": None}]
        path = tmp_path / "d.jsonl"
        path.write_text(_line(qas=qas) + "\n")
        (_, records), = load_dataset(path, vocab)
        assert records[0].answer_span is None

    def test_fuzz_is_total(self, tmp_path, vocab):
        """1000 randomized corruptions either parse or raise a classified corpus error."""
        r = random.Random(7)
        base = _line()
        junk = ['"', "{", "}", "[", "]", ",", ":", "null", "1", "-3", '"x"', "true", "1.5", " "]

        def mutate(text):
            ops = r.randint(1, 4)
            chars = list(text)
            for _ in range(ops):
                k = r.randrange(len(chars) + 1)
                choice = r.random()
                if choice < 0.4 and chars:
                    del chars[min(k, len(chars) - 1)]
                elif choice < 0.8:
                    chars.insert(k, r.choice(junk))
                elif chars:
                    chars[min(k, len(chars) - 1)] = r.choice(junk)
            return "".join(chars)

        def structural():
            obj = json.loads(base)
            key = r.choice(["id", "context", "qas", "qid", "question", "answers", "span"])
            value = r.choice([None, 3, "s", [], [1], [1, 2, 3], {"a": 1}, [-1, 2], [3, 1], [1.0, 2.0], True])
            if key in obj:
                obj[key] = value
            else:
                obj["qas"][r.randrange(2)][key] = value
            return json.dumps(obj)

        outcomes = {"parsed": 0, "error": 0}
        for case in range(1000):
            text = mutate(base) if case % 2 else structural()
            path = tmp_path / "fuzz.jsonl"
            path.write_text(text + "\n", encoding="utf-8")
            try:
                load_dataset(path, vocab)
                outcomes["parsed"] += 1
            except CorpusError:
                outcomes["error"] += 1
        assert sum(outcomes.values()) == 1000
        assert outcomes["error"] > 0


class TestFindUnique:
    def test_unique(self):
        assert find_unique([1, 5, 6, 7], [6, 7]) == 2

    def test_repeated(self):
        assert find_unique([1, 6, 6], [6]) is None

    def test_absent(self):
        assert find_unique([1, 2], [3]) is None
        assert np.isscalar(find_unique([1, 2], [2]))
