"""Bi-encoder QA student: question embeddings, span scoring, distillation, decoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from .corpus import Span, TokenSequence, Vocabulary, detokenize
from .numerics import (Adam, InvalidArgumentError, SpanDistributionPair, Tensor, cross_entropy_to_target,
                       floored_log, softmax)
from .teacher import SparseSpanLabels
from .training import TrainConfig

log = logging.getLogger(__name__)


@dataclass
class StudentModel:
    config: enc.EncoderConfig
    params: enc.Params
    head_activation: str = "gelu"

    @classmethod
    def init(cls, config: enc.EncoderConfig, seed: int, head_activation: str = "gelu") -> "StudentModel":
        params = enc.init_params(config, seed)
        rng = np.random.default_rng([seed, 2])
        enc.init_mlp(params, "h_start.", config.d, config.d, config.d, rng)
        enc.init_mlp(params, "h_end.", config.d, config.d, config.d, rng)
        return cls(config, params, head_activation)

    def frozen(self) -> "StudentModel":
        """Copy whose tensors carry no gradient tape (cheap inference)."""
        return StudentModel(self.config, {n: Tensor(t.data) for n, t in self.params.items()},
                            self.head_activation)

    def encoder_params(self) -> list[Tensor]:
        return [self.params[n] for n in enc.encoder_names(self.params)]

    def head_params(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(("h_start.", "h_end."))]


@dataclass
class QuestionEmbedding:
    start: np.ndarray
    end: np.ndarray


@dataclass
class TrainBatch:
    """One passage and every question asked about it."""

    passage: TokenSequence
    questions: list[TokenSequence]
    labels: list[SparseSpanLabels]

    def __post_init__(self):
        if not self.questions or len(self.questions) != len(self.labels):
            raise InvalidArgumentError("a batch needs at least one question, each with labels")


def _question_heads(model: StudentModel, questions: Sequence[TokenSequence], train=False, rng=None
                    ) -> tuple[Tensor, Tensor]:
    ids, lengths = enc.pad_batch(questions)
    final = enc.forward(model.params, model.config, ids, lengths, train=train, rng=rng)[-1]
    cls = final[:, 0, :]
    return (enc.mlp(model.params, "h_start.", cls, model.head_activation),
            enc.mlp(model.params, "h_end.", cls, model.head_activation))


def question_embed(model: StudentModel, q: TokenSequence) -> QuestionEmbedding:
    """Heads applied to the final-layer [BOS] representation of the question."""
    return question_embed_many(model, [q])[0]


def question_embed_many(model: StudentModel, questions: Sequence[TokenSequence]) -> list[QuestionEmbedding]:
    fs, fe = _question_heads(model.frozen(), questions)
    return [QuestionEmbedding(fs.data[b].copy(), fe.data[b].copy()) for b in range(len(questions))]


def passage_reps(model: StudentModel, c: TokenSequence) -> np.ndarray:
    return enc.encode(model.params, model.config, c).final


def score_reps(reps: np.ndarray, qe: QuestionEmbedding) -> SpanDistributionPair:
    return SpanDistributionPair(softmax(reps @ qe.start), softmax(reps @ qe.end))


def score_passage(model: StudentModel, c: TokenSequence, qe: QuestionEmbedding) -> SpanDistributionPair:
    """Softmax over passage positions of the dot products with the question heads."""
    return score_reps(passage_reps(model, c), qe)


def distill_loss(pred: SpanDistributionPair, labels: SparseSpanLabels) -> float:
    """Cross-entropy of the student's distributions against sparse teacher targets."""
    start, end = labels.dense(len(pred))
    return (cross_entropy_to_target(start, floored_log(pred.start))
            + cross_entropy_to_target(end, floored_log(pred.end)))


def hard_labels(labels: SparseSpanLabels) -> SparseSpanLabels:
    s, e = labels.argmax()
    return SparseSpanLabels.one_hot(labels.qid, s, e)


def hard_label_loss(pred: SpanDistributionPair, labels: SparseSpanLabels) -> float:
    """Negative log-likelihood of the teacher's argmax start and end."""
    return distill_loss(pred, hard_labels(labels))


def batch_loss(model: StudentModel, batch: TrainBatch, loss: str = "soft", train: bool = False,
               rng=None) -> tuple[Tensor, int]:
    """Mean per-question loss with the passage encoded exactly once.

    Returns the loss tensor and the number of passage encodings performed.
    """
    if loss not in ("soft", "hard"):
        raise InvalidArgumentError(f"loss must be 'soft' or 'hard', got {loss!r}")
    length = len(batch.passage)
    reps = enc.forward(model.params, model.config, batch.passage.array()[None, :], train=train, rng=rng)[-1]
    reps = reps[0]
    fs, fe = _question_heads(model, batch.questions, train=train, rng=rng)
    targets = [hard_labels(l) if loss == "hard" else l for l in batch.labels]
    dense = [t.dense(length) for t in targets]
    t_start = np.stack([d[0] for d in dense])
    t_end = np.stack([d[1] for d in dense])
    logp_start = (fs @ reps.T).log_softmax(axis=-1)
    logp_end = (fe @ reps.T).log_softmax(axis=-1)
    total = -((logp_start * t_start).sum() + (logp_end * t_end).sum())
    return total * (1.0 / len(batch.questions)), 1


@dataclass
class DistillHistory:
    epoch_loss: list[float] = field(default_factory=list)
    passage_encodes: list[int] = field(default_factory=list)
    batches_per_epoch: int = 0


def train_distill(model: StudentModel, batches: Sequence[TrainBatch], hp: TrainConfig, loss: str = "soft"
                  ) -> tuple[StudentModel, DistillHistory]:
    """Distill sparse span targets into the bi-encoder, one optimizer step per passage."""
    if not batches:
        raise InvalidArgumentError("distillation needs at least one batch")
    rng = np.random.default_rng(hp.seed)
    opt = Adam({"all": list(model.params.values())}, {"all": hp.lr}, clip_norm=hp.clip_norm,
               weight_decay=hp.weight_decay)
    history = DistillHistory(batches_per_epoch=len(batches))
    total = hp.epochs * len(batches)
    step = 0
    for epoch in range(hp.epochs):
        weighted, count, encodes = 0.0, 0, 0
        for i in rng.permutation(len(batches)):
            batch = batches[i]
            opt.zero_grad()
            value, n_enc = batch_loss(model, batch, loss, train=True, rng=rng)
            value.backward()
            opt.step(hp.lr_scale(step, total))
            step += 1
            encodes += n_enc
            weighted += value.item() * len(batch.questions)
            count += len(batch.questions)
        history.epoch_loss.append(weighted / count)
        history.passage_encodes.append(encodes)
        log.info("distill epoch %d: mean loss %.4f", epoch + 1, history.epoch_loss[-1])
    return model, history


def decode_span(pred: SpanDistributionPair, max_len: int = 30) -> tuple[Span | None, float]:
    """Best ``log p_start(i) + log p_end(j)`` over ``1 <= i <= j < i + max_len``.

    Returns ``(None, score)`` when the unanswerable slot (i = j = 0) scores
    strictly better than every span.  Ties go to the smaller start, then end.
    """
    if max_len < 1:
        raise InvalidArgumentError("max_len must be at least 1")
    ls, le = floored_log(pred.start), floored_log(pred.end)
    n = len(ls)
    null = float(ls[0] + le[0])
    if n < 2:
        return None, null
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    valid = (i >= 1) & (j >= i) & (j < i + max_len)
    scores = np.where(valid, ls[:, None] + le[None, :], -np.inf)
    # row-major argmax = smallest start, then smallest end, among ties
    flat = int(np.argmax(scores))
    best = float(scores.flat[flat])
    if null > best:
        return None, null
    return Span(flat // n, flat % n), best


def answer_question(model: StudentModel, c: TokenSequence, q: TokenSequence, vocab: Vocabulary,
                    max_len: int = 30) -> tuple[Span | None, str]:
    span, _ = decode_span(score_passage(model, c, question_embed(model, q)), max_len)
    if span is None:
        return None, ""
    return span, detokenize(c.ids[span.start: span.end + 1], vocab)


def argmax_agreement(model: StudentModel, batches: Sequence[TrainBatch]) -> float:
    """Fraction of questions whose student argmax start equals the label argmax start."""
    frozen = model.frozen()
    hits = total = 0
    for batch in batches:
        reps = passage_reps(frozen, batch.passage)
        for qe, lab in zip(question_embed_many(frozen, batch.questions), batch.labels):
            hits += int(np.argmax(reps @ qe.start) == lab.argmax()[0])
            total += 1
    return hits / max(total, 1)
