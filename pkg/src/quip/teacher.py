"""Cross-encoder QA teacher and its sparsified relabeling output."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from .corpus import Passage, QARecord, TokenSequence
from .numerics import Adam, InvalidArgumentError, SpanDistributionPair, Tensor, log_softmax
from .training import TrainConfig

log = logging.getLogger(__name__)

TOP_K = 8
_MASK_VALUE = -1e9


@dataclass
class TeacherModel:
    config: enc.EncoderConfig
    params: enc.Params
    head_activation: str = "gelu"

    @classmethod
    def init(cls, config: enc.EncoderConfig, seed: int) -> "TeacherModel":
        params = enc.init_params(config, seed)
        rng = np.random.default_rng([seed, 1])
        # scalar scores feed a softmax over positions, so an output bias would be inert
        enc.init_mlp(params, "start_head.", config.d, config.d, 1, rng, out_bias=False)
        enc.init_mlp(params, "end_head.", config.d, config.d, 1, rng, out_bias=False)
        return cls(config, params)


def concat_input(c: TokenSequence, q: TokenSequence, sep_id: int = 2,
                 max_positions: int | None = None) -> tuple[TokenSequence, range]:
    """``[BOS] c [SEP] q`` plus the index range of the context tokens."""
    ids = c.ids + (sep_id,) + q.ids[1:]
    if max_positions is not None and len(ids) > max_positions:
        raise InvalidArgumentError(f"concatenated input of {len(ids)} tokens exceeds {max_positions}")
    return TokenSequence(ids), range(1, len(c))


def _logits(model: TeacherModel, inputs: Sequence[TokenSequence], context_lengths: Sequence[int],
            train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Masked start/end log-probabilities, shape (B, L), over [BOS] + context positions."""
    ids, lengths = enc.pad_batch(inputs)
    final = enc.forward(model.params, model.config, ids, lengths, train=train, rng=rng)[-1]
    start = enc.mlp(model.params, "start_head.", final, model.head_activation)
    end = enc.mlp(model.params, "end_head.", final, model.head_activation)
    positions = np.arange(ids.shape[1])[None, :]
    mask = np.where(positions < np.asarray(context_lengths)[:, None], 0.0, _MASK_VALUE)
    batch, length = ids.shape
    start = (start.reshape(batch, length) + mask).log_softmax(axis=-1)
    end = (end.reshape(batch, length) + mask).log_softmax(axis=-1)
    return start, end


def teacher_predict(model: TeacherModel, c: TokenSequence, q: TokenSequence, full: bool = False
                    ) -> SpanDistributionPair:
    """Start/end distributions over the context positions (index 0 = unanswerable).

    With ``full=True`` the distributions cover the whole concatenated input;
    [SEP] and question positions then carry probability exactly 0.
    """
    return teacher_predict_batch(model, c, [q], full=full)[0]


def teacher_predict_batch(model: TeacherModel, c: TokenSequence, questions: Sequence[TokenSequence],
                          full: bool = False) -> list[SpanDistributionPair]:
    frozen = TeacherModel(model.config, {n: Tensor(t.data) for n, t in model.params.items()},
                          model.head_activation)
    inputs = [concat_input(c, q, max_positions=model.config.max_positions)[0] for q in questions]
    start, end = _logits(frozen, inputs, [len(c)] * len(inputs))
    out = []
    for b, x in enumerate(inputs):
        n = len(x) if full else len(c)
        out.append(SpanDistributionPair(np.exp(start.data[b, :n]), np.exp(end.data[b, :n])))
    return out


def _gold_index(record: QARecord) -> tuple[int, int]:
    if record.answer_span is None:
        return 0, 0
    return record.answer_span.start, record.answer_span.end


@dataclass
class TeacherHistory:
    train_loss: list[float] = field(default_factory=list)
    heldout_loss: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")


def _batch_loss(model: TeacherModel, passage: Passage, records: Sequence[QARecord], train: bool, rng) -> Tensor:
    inputs = [concat_input(passage.tokens, r.question, max_positions=model.config.max_positions)[0]
              for r in records]
    start, end = _logits(model, inputs, [len(passage)] * len(inputs), train=train, rng=rng)
    gold = np.array([_gold_index(r) for r in records])
    rows = np.arange(len(records))
    return -(start[rows, gold[:, 0]].sum() + end[rows, gold[:, 1]].sum()) * (1.0 / len(records))


def teacher_loss(model: TeacherModel, data: Sequence[tuple[Passage, Sequence[QARecord]]]) -> float:
    """Mean summed start+end cross-entropy per question (eval mode)."""
    frozen = TeacherModel(model.config, {n: Tensor(t.data) for n, t in model.params.items()},
                          model.head_activation)
    total, count = 0.0, 0
    for passage, records in data:
        if records:
            total += _batch_loss(frozen, passage, records, False, None).item() * len(records)
            count += len(records)
    return total / max(count, 1)


def train_teacher(model: TeacherModel, data: Sequence[tuple[Passage, Sequence[QARecord]]],
                  hp: TrainConfig, heldout_fraction: float = 0.1) -> tuple[TeacherModel, TeacherHistory]:
    """Supervised span training; unanswerable gold maps to the [BOS] position.

    One optimizer step per passage with all of its questions.  The last
    ``heldout_fraction`` of passages is excluded from training and scored
    after every epoch.
    """
    data = [(p, list(rs)) for p, rs in data if rs]
    if not data:
        raise InvalidArgumentError("teacher training needs at least one labeled question")
    n_held = int(len(data) * heldout_fraction) if len(data) > 1 else 0
    train, held = data[: len(data) - n_held], data[len(data) - n_held:]
    rng = np.random.default_rng(hp.seed)
    opt = Adam({"all": list(model.params.values())}, {"all": hp.lr}, clip_norm=hp.clip_norm,
               weight_decay=hp.weight_decay)
    history = TeacherHistory(initial_loss=teacher_loss(model, train))
    total = hp.epochs * len(train)
    step = 0
    for epoch in range(hp.epochs):
        losses, counts = [], []
        for i in rng.permutation(len(train)):
            passage, records = train[i]
            opt.zero_grad()
            loss = _batch_loss(model, passage, records, True, rng)
            loss.backward()
            opt.step(hp.lr_scale(step, total))
            step += 1
            losses.append(loss.item() * len(records))
            counts.append(len(records))
        history.train_loss.append(sum(losses) / sum(counts))
        if held:
            history.heldout_loss.append(teacher_loss(model, held))
        log.info("teacher epoch %d: train %.4f heldout %s", epoch + 1, history.train_loss[-1],
                 history.heldout_loss[-1] if held else "-")
    return model, history


# -- sparse labels ------------------------------------------------------------------


@dataclass(frozen=True)
class SparseSpanLabels:
    """Top-k teacher targets; ``unanswerable`` marks that index 0 carries mass."""

    qid: str
    start: tuple[tuple[int, float], ...]
    end: tuple[tuple[int, float], ...]

    @property
    def unanswerable(self) -> bool:
        return bool(self.start and self.start[0][0] == 0) or bool(self.end and self.end[0][0] == 0)

    def dense(self, length: int) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for entries in (self.start, self.end):
            v = np.zeros(length)
            for i, p in entries:
                if not 0 <= i < length:
                    raise InvalidArgumentError(f"{self.qid}: label index {i} outside passage of length {length}")
                v[i] = p
            out.append(v)
        return out[0], out[1]

    def argmax(self) -> tuple[int, int]:
        def best(entries):
            return min(entries, key=lambda e: (-e[1], e[0]))[0]
        return best(self.start), best(self.end)

    def to_json(self) -> dict:
        return {"qid": self.qid, "start": [[i, p] for i, p in self.start], "end": [[i, p] for i, p in self.end]}

    @classmethod
    def from_json(cls, obj: dict) -> "SparseSpanLabels":
        def entries(raw):
            out = tuple((int(i), float(p)) for i, p in raw)
            idx = [i for i, _ in out]
            if len(out) > TOP_K or idx != sorted(set(idx)) or any(p <= 0 for _, p in out):
                raise InvalidArgumentError(f"malformed label entries for {obj.get('qid')!r}")
            return out
        return cls(str(obj["qid"]), entries(obj["start"]), entries(obj["end"]))

    @classmethod
    def one_hot(cls, qid: str, start: int, end: int) -> "SparseSpanLabels":
        return cls(qid, ((start, 1.0),), ((end, 1.0),))


def sparsify_topk(dist, k: int = TOP_K, renormalize: bool = True) -> tuple[tuple[int, float], ...]:
    """Keep the k largest probabilities (ties to the lower index), sorted by index."""
    p = np.asarray(dist, dtype=np.float64)
    if k < 1:
        raise InvalidArgumentError("k must be at least 1")
    order = np.argsort(-p, kind="stable")[: min(k, p.size)]
    keep = np.sort(order[p[order] > 0])
    values = p[keep]
    if renormalize:
        values = values / values.sum()
    return tuple((int(i), float(v)) for i, v in zip(keep, values))


def relabel(model: TeacherModel, entries: Sequence[tuple[Passage, Sequence[QARecord]]], k: int = TOP_K,
            renormalize: bool = True, temperature: float = 1.0) -> list[SparseSpanLabels]:
    """Teacher targets for every question, in passage order."""
    labels = []
    for passage, records in entries:
        if not records:
            continue
        preds = teacher_predict_batch(model, passage.tokens, [r.question for r in records])
        for r, pred in zip(records, preds):
            start, end = pred.start, pred.end
            if temperature != 1.0:
                start = np.exp(log_softmax(np.log(np.maximum(start, 1e-300)) / temperature))
                end = np.exp(log_softmax(np.log(np.maximum(end, 1e-300)) / temperature))
            labels.append(SparseSpanLabels(r.qid, sparsify_topk(start, k, renormalize),
                                           sparsify_topk(end, k, renormalize)))
    return labels


def write_labels(path, labels: Sequence[SparseSpanLabels]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_json()) + "\n")


def read_labels(path) -> list[SparseSpanLabels]:
    with open(path, encoding="utf-8") as fh:
        return [SparseSpanLabels.from_json(json.loads(line)) for line in fh if line.strip()]
