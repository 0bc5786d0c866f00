import numpy as np
import pytest
import yaml

from oracles import reference_token_f1
from quip import config as C
from quip.encoder import ConfigurationError
from quip.metrics import exact_match, token_f1
from quip.numerics import InvalidArgumentError


class TestQaMetrics:
    def test_partial_overlap(self):
        assert exact_match("the cat", ["cat"]) == 0
        assert token_f1("the cat", ["cat"]) == pytest.approx(2 / 3, abs=1e-15)

    def test_equal(self):
        assert exact_match("Marie Curie", ["marie curie"]) == 1
        assert token_f1("marie curie", ["marie curie"]) == 1.0

    def test_empty_prediction(self):
        assert exact_match("", ["x"]) == 0
        assert token_f1("", ["x"]) == 0.0

    def test_best_gold_wins(self):
        assert token_f1("paris", ["lyon", "in paris"]) == pytest.approx(2 / 3)
        assert exact_match("paris", ["lyon", "paris"]) == 1

    def test_repeated_tokens_count_once_each(self):
        # multiset overlap: one "the" in the gold matches one of the two predicted
        assert token_f1("the the", ["the cat"]) == pytest.approx(0.5)

    def test_no_golds(self):
        with pytest.raises(InvalidArgumentError):
            token_f1("x", [])
        with pytest.raises(InvalidArgumentError):
            exact_match("x", [])

    def test_against_reference(self):
        r = np.random.default_rng(0)
        words = ["the", "cat", "sat", "on", "mat", "a"]
        for _ in range(50):
            pred = " ".join(r.choice(words, int(r.integers(0, 5))))
            golds = [" ".join(r.choice(words, int(r.integers(1, 5)))) for _ in range(int(r.integers(1, 4)))]
            assert token_f1(pred, golds) == pytest.approx(reference_token_f1(pred, golds), abs=1e-12)


class TestConfig:
    def test_defaults(self):
        cfg = C.load_config()
        assert cfg.seed == 0 and cfg.distill.labels == "teacher" and cfg.distill.top_k == 8
        assert cfg.generator.nucleus_p == 0.6 and cfg.generator.questions_per_passage == 10
        assert cfg.encoder_config(100).d == 64

    def test_seed_required(self):
        with pytest.raises(ConfigurationError):
            C.from_dict({"encoder": {}})
        with pytest.raises(ConfigurationError):
            C.from_dict({"seed": True})

    @pytest.mark.parametrize("raw", [{"seed": 0, "bogus": 1}, {"seed": 0, "teacher": {"epoch": 2}},
                                     {"seed": 0, "encoder": {"width": 4}}, {"seed": 0, "ner": [1]}])
    def test_unknown_keys(self, raw):
        with pytest.raises(ConfigurationError):
            C.from_dict(raw)

    @pytest.mark.parametrize("raw", [{"seed": 0, "distill": {"labels": "oracle"}},
                                     {"seed": 0, "distill": {"loss": "mse"}},
                                     {"seed": 0, "generator": {"kind": "bart"}},
                                     {"seed": 0, "data": {"dir": "/nonexistent/x"}},
                                     {"seed": 0, "encoder": {"d": 10, "n_heads": 4}}])
    def test_invalid_values(self, raw):
        with pytest.raises(ConfigurationError):
            C.from_dict(raw)

    def test_dump_load_round_trip(self, tmp_path):
        cfg = C.from_dict({"seed": 4, "distill": {"loss": "hard"}, "ner": {"types": ["person"]}})
        C.dump_config(cfg, tmp_path / "c.yaml")
        again = C.load_config(tmp_path / "c.yaml")
        assert again == cfg and again.hash() == cfg.hash()

    def test_seed_override(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump({"seed": 1}))
        assert C.load_config(tmp_path / "c.yaml", seed=9).seed == 9

    def test_bad_yaml(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: [1,\n")
        with pytest.raises(ConfigurationError):
            C.load_config(tmp_path / "c.yaml")

    def test_hash_depends_on_content_only(self):
        a = C.from_dict({"seed": 0, "teacher": {"epochs": 3}})
        b = C.from_dict({"teacher": {"epochs": 3}, "seed": 0})
        assert a.hash() == b.hash()
        assert a.hash() != a.replace(seed=1).hash()
        assert C.config_hash({"x": 1, "y": 2}) == C.config_hash({"y": 2, "x": 1})

    def test_replace_validates(self):
        cfg = C.load_config()
        assert cfg.replace(distill={"loss": "hard"}).distill.loss == "hard"
        with pytest.raises(ConfigurationError):
            cfg.replace(distill={"labels": "nobody"})
