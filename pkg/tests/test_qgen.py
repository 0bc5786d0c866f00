import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import reference_nucleus
from quip import synthetic
from quip.corpus import BLANK, Passage, Vocabulary, tokenize
from quip.numerics import InvalidArgumentError
from quip.qgen import (GeneratorConfig, find_candidates, generate_cloze_noise, generate_corpus,
                       generate_rule_based, nucleus_decode, nucleus_filter, sample_nucleus)

EXTRA = ["who", "what", "when", "?"]


def passage(text, pid="p"):
    words = text.split()
    vocab = Vocabulary.build([words, EXTRA])
    return Passage(pid, words, tokenize(words, vocab)), vocab


LONG = "The Nordtek company hired Ada Lovell in 1921 and she built the first Helix engine in Oslo ."


class TestRuleBased:
    def test_template_trace(self):
        p, vocab = passage("Marie Curie discovered radium .")
        (qa,) = generate_rule_based(p, GeneratorConfig(), vocab)
        assert qa.question == ["who", "discovered", "radium", "?"]
        assert qa.answer_text == "marie curie"
        assert (qa.answer_span.start, qa.answer_span.end) == (1, 2)

    def test_no_candidates(self):
        p, vocab = passage("the cat sat on a mat .")
        assert generate_rule_based(p, GeneratorConfig(), vocab) == []

    def test_too_short(self):
        p, vocab = passage("Paris .")
        with pytest.raises(InvalidArgumentError):
            generate_rule_based(p, GeneratorConfig(), vocab)

    def test_deterministic(self):
        p, vocab = passage(LONG)
        cfg = GeneratorConfig(questions_per_passage=3, seed=5)
        assert generate_rule_based(p, cfg, vocab) == generate_rule_based(p, cfg, vocab)

    def test_question_kinds(self):
        p, vocab = passage(LONG)
        kinds = {qa.answer_text: qa.question for qa in generate_rule_based(p, GeneratorConfig(), vocab)}
        assert "who" in kinds["ada lovell"] and "when" in kinds["1921"] and "what" in kinds["oslo"]

    def test_ambiguous_answer_has_no_span(self):
        p, vocab = passage("Oslo is cold . Oslo is far .")
        out = generate_rule_based(p, GeneratorConfig(), vocab)
        assert len(out) == 2 and all(qa.answer_span is None for qa in out)

    def test_unique_answers_flag(self):
        p, vocab = passage("Oslo is cold . Oslo is far .")
        assert len(generate_rule_based(p, GeneratorConfig(unique_answers=True), vocab)) == 1

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            GeneratorConfig(questions_per_passage=0)
        with pytest.raises(InvalidArgumentError):
            GeneratorConfig(nucleus_p=0.0)

    def test_corpus_properties(self):
        docs = synthetic.raw_corpus(12, seed=1)
        vocab = Vocabulary.build([d["context"] for d in docs] + [EXTRA])
        passages = [Passage(d["id"], d["context"], tokenize(d["context"], vocab)) for d in docs]
        for n in (1, 3, 10):
            for p, records in generate_corpus(passages, GeneratorConfig(questions_per_passage=n), vocab):
                assert len(records) <= n
                for r in records:
                    if r.answer_span is not None:
                        ids = p.tokens.ids[r.answer_span.start: r.answer_span.end + 1]
                        assert ids == tokenize(r.answer_text, vocab).ids[1:]
                    # a content token of the sentence survives in the question
                    assert any(w not in ("who", "what", "when", "?") for w in r.question_words)

    def test_unknown_generator(self):
        with pytest.raises(InvalidArgumentError):
            generate_corpus([], GeneratorConfig(), Vocabulary(), "bart")


class TestCloze:
    def test_no_noise_is_exact_cloze(self):
        p, vocab = passage("Marie Curie discovered radium .")
        (qa,) = generate_cloze_noise(p, GeneratorConfig(drop_prob=0.0), vocab)
        assert qa.question == [BLANK, "discovered", "radium", "."]

    def test_full_noise_leaves_blank(self):
        p, vocab = passage("Marie Curie discovered radium .")
        (qa,) = generate_cloze_noise(p, GeneratorConfig(drop_prob=1.0), vocab)
        assert tokenize(qa.question, vocab).ids == (vocab.bos_id, vocab.blank_id)

    def test_seeded_drop_pattern(self):
        p, vocab = passage(LONG, pid="x")
        out = generate_cloze_noise(p, GeneratorConfig(seed=3), vocab)
        # frozen from a seeded run
        assert out[0].question == ["the", BLANK, "company", "hired", "ada", "lovell", "in", "1921", "and", "she",
                                   "built", "first", "helix", "in", "oslo", "."]
        assert out[2].question == ["the", "nordtek", "hired", "ada", "lovell", "in", BLANK, "and", "she", "built",
                                   "the", "first", "engine", "in", "oslo", "."]
        assert [qa.answer_text for qa in out] == ["nordtek", "ada lovell", "1921", "helix", "oslo"]


class TestCandidates:
    def test_runs_and_numbers(self):
        cands = find_candidates([["The", "Big", "Apple", "in", "1999", "had", "7", "parks"]])
        assert [(c.start, c.end, c.kind) for c in cands] == [(1, 2, "who"), (4, 4, "when"), (6, 6, "what")]


class TestNucleus:
    def test_hand_trace(self):
        np.testing.assert_allclose(nucleus_filter([0.5, 0.3, 0.2], 0.6), [0.625, 0.375, 0.0], atol=1e-15)

    def test_p_one_is_identity(self):
        p = [0.1, 0.2, 0.3, 0.4]
        np.testing.assert_allclose(nucleus_filter(p, 1.0), p, atol=1e-15)

    @pytest.mark.parametrize("p", [0.01, 0.5, 1.0])
    def test_one_hot_is_identity(self, p):
        np.testing.assert_array_equal(nucleus_filter([0.0, 1.0, 0.0], p), [0.0, 1.0, 0.0])

    def test_bad_p(self):
        with pytest.raises(InvalidArgumentError):
            nucleus_filter([1.0], 1.5)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 30), st.floats(0.01, 1.0), st.integers(0, 2**31 - 1))
    def test_minimal_support(self, n, p, seed):
        probs = np.random.default_rng(seed).dirichlet(np.ones(n))
        out = nucleus_filter(probs, p)
        kept = np.flatnonzero(out)
        mass = probs[kept].sum()
        assert mass >= p - 1e-12
        # dropping the smallest kept element falls below p
        assert len(kept) == 1 or mass - probs[kept].min() < p
        assert abs(out.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(out, reference_nucleus(list(probs), p), atol=1e-12)

    def test_sampling_stays_in_nucleus(self):
        r = np.random.default_rng(0)
        draws = {sample_nucleus([0.5, 0.3, 0.2], 0.6, r) for _ in range(200)}
        assert draws == {0, 1}

    def test_decode_stops(self):
        class Model:
            def next_token_probs(self, prefix):
                return np.array([0.0, 0.0, 1.0]) if len(prefix) >= 3 else np.array([0.9, 0.1, 0.0])

        out = nucleus_decode(Model(), [7], stop_id=2, max_tokens=10, p=0.6, rng=np.random.default_rng(0))
        assert out == [0, 0, 2]
