"""Finite-difference checks of every training loss on tiny fixtures."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import encoder as enc
from .bertscore import ParaphraseClassifier, feature_layers
from .corpus import Passage, QARecord, Span, TokenSequence
from .numerics import GradientReport, grad_check, parameter
from .prompts import TagSet, TaggedSentence, ner_loss
from .student import StudentModel, TrainBatch, batch_loss
from .teacher import SparseSpanLabels, TeacherModel, _batch_loss
from .corpus import Vocabulary

BOUND = 1e-4
LOSSES = ("teacher", "distill-soft", "distill-hard", "ner", "fine-tune")


def tiny_config(vocab_size: int = 24) -> enc.EncoderConfig:
    return enc.EncoderConfig(vocab_size=vocab_size, d=8, n_layers=2, n_heads=2, ffn_width=16, dropout_rate=0.0)


def _seq(rng, length: int, vocab_size: int) -> TokenSequence:
    return TokenSequence((1,) + tuple(int(t) for t in rng.integers(5, vocab_size, size=length - 1)))


def _labels(rng, qid: str, length: int) -> SparseSpanLabels:
    def entries():
        idx = np.sort(rng.choice(length, size=min(3, length), replace=False))
        p = rng.dirichlet(np.ones(idx.size))
        return tuple((int(i), float(v)) for i, v in zip(idx, p))
    return SparseSpanLabels(qid, entries(), entries())


def _random_params(params, rng, scale: float = 0.3) -> None:
    # break the symmetric init so every gradient entry is exercised
    for t in params.values():
        t.data[...] = t.data + rng.normal(0.0, scale, size=t.shape)


def loss_fixture(name: str, seed: int) -> tuple[Callable, dict]:
    """A zero-argument loss and the parameters it reads."""
    rng = np.random.default_rng([seed, 99])
    cfg = tiny_config()
    if name == "teacher":
        model = TeacherModel.init(cfg, seed)
        _random_params(model.params, rng)
        passage = _seq(rng, 7, cfg.vocab_size)
        records = [QARecord("p", f"q{k}", _seq(rng, 4, cfg.vocab_size), "", span)
                   for k, span in enumerate([Span(2, 3), None, Span(5, 6)])]
        p = Passage("p", ["w"] * 6, passage)
        return (lambda: _batch_loss(model, p, records, False, None)), model.params
    if name in ("distill-soft", "distill-hard"):
        model = StudentModel.init(cfg, seed)
        _random_params(model.params, rng)
        passage = _seq(rng, 7, cfg.vocab_size)
        batch = TrainBatch(passage, [_seq(rng, 4, cfg.vocab_size), _seq(rng, 5, cfg.vocab_size)],
                           [_labels(rng, "a", 7), _labels(rng, "b", 7)])
        kind = name.split("-")[1]
        return (lambda: batch_loss(model, batch, kind)[0]), model.params
    if name == "ner":
        vocab = Vocabulary([f"w{i}" for i in range(cfg.vocab_size - 5)])
        model = StudentModel.init(cfg, seed)
        _random_params(model.params, rng)
        tags = TagSet.from_types(["person", "location"])
        data = [TaggedSentence(["w1", "w2", "w3", "w4"], ["B-person", "I-person", "O", "B-location"]),
                TaggedSentence(["w5", "w6"], ["O", "B-person"])]
        out = parameter(rng.normal(0.0, 0.5, size=(len(tags), cfg.d)))
        params = {n: model.params[n] for n in enc.encoder_names(model.params)} | {"output": out}
        return (lambda: ner_loss(model, out, tags, data, vocab)), params
    if name == "fine-tune":
        model = StudentModel.init(cfg, seed)
        _random_params(model.params, rng)
        layers = feature_layers(cfg.n_layers)
        head = {"w": parameter(rng.normal(0.0, 1.0, size=len(layers))), "b": parameter(0.1)}
        clf = ParaphraseClassifier(model, head, layers)
        pairs = [(_seq(rng, 5, cfg.vocab_size), _seq(rng, 4, cfg.vocab_size)),
                 (_seq(rng, 3, cfg.vocab_size), _seq(rng, 6, cfg.vocab_size))]
        params = {n: model.params[n] for n in enc.encoder_names(model.params)} | head
        return (lambda: clf.loss(pairs, [1, 0])), params
    raise ValueError(f"unknown loss {name!r}")


@dataclass
class CheckResult:
    loss: str
    seed: int
    report: GradientReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed(BOUND)


def run_grad_checks(seeds=(0, 1, 2), losses=LOSSES, max_entries: int = 6) -> list[CheckResult]:
    out = []
    for name in losses:
        for seed in seeds:
            t = time.perf_counter()
            fn, params = loss_fixture(name, seed)
            report = grad_check(fn, params, epsilon=1e-5, max_entries=max_entries, seed=seed)
            out.append(CheckResult(name, seed, report, time.perf_counter() - t))
    return out
