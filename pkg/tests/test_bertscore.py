import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import double_loop_greedy, gradient_descent_logreg, logistic_loss, naive_auroc, naive_pearson
from quip import bertscore as B
from quip import encoder as enc
from quip.corpus import tokenize
from quip.encoder import EncoderConfig
from quip.numerics import DegenerateInputError, InvalidArgumentError
from quip.student import StudentModel
from quip.training import TrainConfig


def with_bos(rows):
    # row 0 stands in for [BOS] and is ignored by the matcher
    return np.vstack([np.full((1, np.shape(rows)[1]), 9.0), rows])


class TestGreedyMatch:
    def test_self_match(self, rng):
        x = rng.normal(size=(5, 4))
        assert B.greedy_match(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_max_picks_matching_token(self, rng):
        u = rng.normal(size=4)
        assert B.greedy_match(with_bos([u]), with_bos([u, rng.normal(size=4)])) == pytest.approx(1.0, abs=1e-12)

    def test_random_against_double_loop(self):
        r = np.random.default_rng(3)
        for case in range(200):
            shapes = ((3, 4), (5, 4)) if case == 0 else tuple((int(r.integers(2, 8)), 4) for _ in range(2))
            x1, x2 = r.normal(size=shapes[0]), r.normal(size=shapes[1])
            assert B.greedy_match(x1, x2) == pytest.approx(double_loop_greedy(x1.tolist(), x2.tolist()), abs=1e-12)

    def test_zero_vector(self, rng):
        x = rng.normal(size=(3, 4))
        x[2] = 0.0
        with pytest.raises(DegenerateInputError):
            B.greedy_match(x, rng.normal(size=(3, 4)))

    def test_bos_only(self, rng):
        with pytest.raises(InvalidArgumentError):
            B.greedy_match(rng.normal(size=(1, 4)), rng.normal(size=(3, 4)))


class TestFBert:
    def test_self(self, rng):
        x = rng.normal(size=(4, 3))
        assert B.f_bert_reps(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_equal_directions(self):
        u = np.array([1.0, 0.0])
        v = np.array([0.5, math.sqrt(3) / 2])  # cosine 0.5
        assert B.f_bert_reps(with_bos([u]), with_bos([v])) == pytest.approx(0.5, abs=1e-12)

    def test_non_positive_sum_is_zero(self):
        assert B.f_bert_reps(with_bos([[1.0, 0.0]]), with_bos([[-1.0, 0.0]])) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_symmetric_and_bounded(self, n1, n2, seed):
        r = np.random.default_rng(seed)
        x1, x2 = r.normal(size=(n1, 3)), r.normal(size=(n2, 3))
        f = B.f_bert_reps(x1, x2)
        assert f == B.f_bert_reps(x2, x1)
        assert -1.0 <= f <= 1.0

    def test_opposite_signs_are_clipped(self):
        # directions of 0.9 and -1.1/3 give a raw harmonic mean near -1.24
        x1 = with_bos([[1.0, 0.0]])
        x2 = with_bos([[-1.0, 0.0], [-2.0, 0.0], [0.9, math.sqrt(0.19)]])
        assert B.greedy_match(x2, x1) < 0 < B.greedy_match(x1, x2)
        assert B.f_bert_reps(x1, x2) == -1.0

    def test_layer_range(self, vocab, tiny_config):
        params = enc.init_params(tiny_config, 0)
        r = enc.encode(params, tiny_config, tokenize("the cat", vocab))
        with pytest.raises(InvalidArgumentError):
            B.f_bert(r, r, tiny_config.n_layers + 1)


class TestLayerSelection:
    def test_exact_judgments_pick_layer(self):
        r = np.random.default_rng(0)
        scores = r.random((10, 5))
        assert B.select_layer_from_scores(scores, scores[:, 2]).layer == 2

    def test_negated_scores_are_not_chosen(self):
        r = np.random.default_rng(1)
        j = r.random(12)
        # layer 1 anti-correlates perfectly; layer 3 correlates weakly, the rest not at all
        scores = np.column_stack([r.random(12), -j, r.random(12), j + r.normal(0, 0.5, 12), r.random(12)])
        sel = B.select_layer_from_scores(scores, j)
        assert sel.layer != 1
        assert sel.correlations[1] == pytest.approx(-1.0, abs=1e-12)
        assert sel.layer == int(np.argmax(sel.correlations))

    def test_ties_prefer_deeper_layers(self):
        j = np.array([0.1, 0.5, 0.3, 0.9])
        scores = np.column_stack([j, j, 2 * j])
        assert B.select_layer_from_scores(scores, j).layer == 2

    def test_too_few_pairs(self):
        with pytest.raises(InvalidArgumentError):
            B.select_layer_from_scores(np.ones((2, 3)), [0.1, 0.2])

    def test_constant_judgments(self):
        with pytest.raises(DegenerateInputError):
            B.select_layer_from_scores(np.random.default_rng(0).random((4, 3)), [0.5] * 4)

    def test_with_encoder(self, vocab, tiny_config):
        model = StudentModel.init(tiny_config, 0)
        r = np.random.default_rng(0)
        for t in model.params.values():
            t.data = t.data + r.normal(0, 0.3, size=t.shape)
        words = ["the", "cat", "sat", "on", "a", "mat", "good", "bad", "movie"]
        pairs = [B.PairExample(list(r.choice(words, 4)), list(r.choice(words, 3))) for _ in range(8)]
        scores = B.layer_scores(model, pairs, vocab)
        for p, j in zip(pairs, scores[:, 1]):
            p.judgment = float(j)
        assert B.select_layer(model, pairs, vocab).layer == 1


class TestFeatures:
    def test_feature_layers_clamp(self):
        assert B.feature_layers(4) == [0, 1, 2, 3, 4]
        assert B.feature_layers(24) == list(range(17, 25))

    def test_identical_pair(self, vocab):
        cfg = EncoderConfig(vocab_size=len(vocab), d=8, n_layers=4, n_heads=2, ffn_width=8)
        model = StudentModel.init(cfg, 0)
        pair = B.PairExample(["the", "good", "movie"], ["the", "good", "movie"])
        feats = B.extract_features(model, [pair, pair], vocab)
        assert feats.shape == (2, 5)
        np.testing.assert_allclose(feats, 1.0, atol=1e-9)
        np.testing.assert_array_equal(feats[0], B.extract_features(model, [pair], vocab)[0])


def logreg_fixture(n=32, k=8, seed=5):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, k))
    y = (x @ r.normal(size=k) + r.normal(0, 1.0, n) > 0).astype(int)
    return x, y


class TestLogReg:
    def test_separable_tiny_lambda(self):
        x = np.array([[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0]])
        y = np.array([0, 0, 0, 1, 1, 1])
        model = B.train_logreg(x, y, l2_lambda=1e-6)
        assert np.all(model.predict(x) == y)

    def test_heavy_regularization_gives_prior(self):
        x, y = logreg_fixture()
        model = B.train_logreg(x, y, l2_lambda=1e9)
        assert np.abs(model.weights).max() < 1e-6
        np.testing.assert_allclose(model.predict_proba(x), y.mean(), atol=1e-6)

    @pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
    def test_matches_gradient_descent_oracle(self, lam):
        x, y = logreg_fixture()
        model = B.train_logreg(x, y, lam)
        w, b = gradient_descent_logreg(x.tolist(), y.tolist(), lam, iters=4000)
        ours = logistic_loss(model.weights.tolist(), model.bias, x.tolist(), y.tolist(), lam)
        ref = logistic_loss(w, b, x.tolist(), y.tolist(), lam)
        assert abs(ours - ref) <= 1e-6
        assert ours <= ref + 1e-12

    def test_single_class(self):
        with pytest.raises(InvalidArgumentError):
            B.train_logreg(np.ones((3, 2)), [1, 1, 1])

    def test_f1_positive(self):
        assert B.f1_positive([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
        assert B.f1_positive([0, 0], [1, 0]) == 0.0


class TestRanking:
    def test_separated(self):
        assert B.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_tied(self):
        assert B.auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(DegenerateInputError):
            B.auroc([0.1, 0.2], [1, 1])

    def test_pearson_affine(self):
        x = np.array([0.5, 1.0, 3.0, -2.0])
        assert B.pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-12)

    def test_pearson_constant(self):
        with pytest.raises(DegenerateInputError):
            B.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(4, 30), st.integers(0, 2**31 - 1))
    def test_against_naive_formulas(self, n, seed):
        r = np.random.default_rng(seed)
        labels = np.array([0, 1] + list(r.integers(0, 2, n - 2)))
        scores = np.round(r.normal(size=n), 1)  # rounding makes ties common
        assert B.auroc(scores, labels) == pytest.approx(naive_auroc(scores.tolist(), labels.tolist()), abs=1e-9)
        x, y = r.normal(size=n), r.normal(size=n)
        assert B.pearson(x, y) == pytest.approx(naive_pearson(x.tolist(), y.tolist()), abs=1e-9)
        # any strictly increasing transform leaves the ranking metric unchanged
        assert B.auroc(np.exp(3 * scores) - 7, labels) == B.auroc(scores, labels)


def paraphrase_pairs(n=8):
    a = ["the", "good", "movie"]
    b = ["a", "bad", "cat"]
    return [B.PairExample(a, a if k % 2 else b, label=k % 2) for k in range(n)]


class TestFineTune:
    def test_dropout_is_off_while_training(self, vocab):
        cfg = EncoderConfig(vocab_size=len(vocab), d=8, n_layers=1, n_heads=2, ffn_width=8, dropout_rate=0.5)
        model = StudentModel.init(cfg, 0)
        clf = B.ParaphraseClassifier(model, {"w": enc.parameter(np.ones(2)), "b": enc.parameter(0.0)},
                                     B.feature_layers(1))
        pairs = [(tokenize("the good movie", vocab), tokenize("a bad cat", vocab))]
        r = np.random.default_rng(0)
        a = clf.logits(pairs, train=True, rng=r).data
        b = clf.logits(pairs, train=True, rng=r).data
        np.testing.assert_array_equal(a, b)

    def test_loss_decreases_and_lr_ratio(self, vocab, tiny_config):
        model = StudentModel.init(tiny_config, 0)
        clf, hist = B.fine_tune_paraphrase(model, paraphrase_pairs(), vocab,
                                           TrainConfig(epochs=5, lr=1e-4, warmup_fraction=0.0))
        assert hist.lr_ratio == 1000.0
        assert hist.epoch_loss[-1] < hist.epoch_loss[0]

    def test_single_class(self, vocab, tiny_config):
        pairs = [B.PairExample(["the"], ["cat"], label=1)] * 3
        with pytest.raises(InvalidArgumentError):
            B.fine_tune_paraphrase(StudentModel.init(tiny_config, 0), pairs, vocab)

    def test_load_pairs(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text('{"s1": ["a"], "s2": ["b"], "label": 1, "judgment": 0.5}\n\n'
                        '{"s1": ["c"], "s2": ["d"], "label": null, "judgment": null}\n')
        pairs = B.load_pairs(path)
        assert [p.label for p in pairs] == [1, None] and pairs[0].judgment == 0.5
        path.write_text('{"s1": "a", "s2": ["b"]}\n')
        with pytest.raises(InvalidArgumentError):
            B.load_pairs(path)
