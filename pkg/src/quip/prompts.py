"""Question prompts as task descriptions: few-shot BIO tagging and zero-shot sentiment."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from .corpus import CorpusError, Span, TokenSequence, Vocabulary, detokenize, tokenize
from .encoder import ConfigurationError
from .numerics import Adam, InvalidArgumentError, Tensor, log_softmax, parameter
from .student import StudentModel, question_embed_many
from .training import TrainConfig

log = logging.getLogger(__name__)

OUTSIDE = "O"
CONTENT_FREE_WORDS = ("the", "be", "to", "of", "and", "a", "in", "that", "have", "I")
RATIONALE_TOKENS = 5


class TagValidationError(CorpusError):
    pass


# -- BIO tag sets -------------------------------------------------------------------


@dataclass(frozen=True)
class TagSet:
    tags: tuple[str, ...]

    def __post_init__(self):
        if OUTSIDE not in self.tags:
            raise TagValidationError("a tag set must contain O")
        if len(set(self.tags)) != len(self.tags):
            raise TagValidationError("duplicate tags")
        for t in self.tags:
            if t == OUTSIDE:
                continue
            if t[:2] not in ("B-", "I-") or len(t) < 3:
                raise TagValidationError(f"malformed tag {t!r}")
            if t.startswith("I-") and "B-" + t[2:] not in self.tags:
                raise TagValidationError(f"{t} has no matching B- tag")

    @classmethod
    def from_types(cls, types: Sequence[str]) -> "TagSet":
        return cls((OUTSIDE,) + tuple(f"{p}-{t}" for t in types for p in "BI"))

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        try:
            return self.tags.index(tag)
        except ValueError:
            raise TagValidationError(f"unknown tag {tag!r}") from None

    @property
    def types(self) -> list[str]:
        return [t[2:] for t in self.tags if t.startswith("B-")]


def entity_type(tag: str) -> str:
    """``B-x``/``I-x`` -> ``x``; the O tag is its own type."""
    return OUTSIDE if tag == OUTSIDE else tag[2:]


@dataclass(frozen=True)
class PromptMap:
    """Entity type (or O) -> question; B- and I- tags share their type's question."""

    questions: Mapping[str, tuple[str, ...]]

    def covers(self, tags: TagSet) -> None:
        missing = sorted({entity_type(t) for t in tags.tags} - set(self.questions))
        if missing:
            raise ConfigurationError(f"no prompt for entity types {missing}")

    @classmethod
    def load(cls, path=None) -> "PromptMap":
        raw = _read_json(path, "ner_prompts.json")
        if not isinstance(raw, dict) or not all(isinstance(v, list) for v in raw.values()):
            raise ConfigurationError("NER prompt file must map tag names to token lists")
        return cls({k: tuple(v) for k, v in raw.items()})


def _read_json(path, default_name: str):
    if path is None:
        text = resources.files("quip.data").joinpath(default_name).read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


def bio_encode(entities: Sequence[tuple[str, int, int]], length: int) -> list[str]:
    tags = [OUTSIDE] * length
    for typ, s, e in sorted(entities, key=lambda x: x[1]):
        if not 0 <= s <= e < length or any(t != OUTSIDE for t in tags[s: e + 1]):
            raise TagValidationError(f"entity {(typ, s, e)} is out of range or overlaps another")
        tags[s] = "B-" + typ
        for i in range(s + 1, e + 1):
            tags[i] = "I-" + typ
    return tags


def bio_decode(tags: Sequence[str]) -> list[tuple[str, int, int]]:
    """Entities as (type, start, end); an I-x that does not continue an x entity opens one."""
    out = []
    cur = None  # [type, start, end]
    for i, tag in enumerate(tags):
        if tag == OUTSIDE:
            cur = None
            continue
        prefix, typ = tag[:2], tag[2:]
        if prefix == "I-" and cur is not None and cur[0] == typ and cur[2] == i - 1:
            cur[2] = i
            continue
        cur = [typ, i, i]
        out.append(cur)
    return [tuple(e) for e in out]


def entity_f1(pred: Sequence[tuple[str, int, int]], gold: Sequence[tuple[str, int, int]]
              ) -> tuple[float, float, float]:
    """Exact-match entity precision, recall and F1."""
    p, g = set(map(tuple, pred)), set(map(tuple, gold))
    if not p and not g:
        return 1.0, 1.0, 1.0
    tp = len(p & g)
    precision = tp / len(p) if p else 0.0
    recall = tp / len(g) if g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if tp else 0.0
    return precision, recall, f1


# -- NER ------------------------------------------------------------------------------


@dataclass
class TaggedSentence:
    tokens: list[str]
    tags: list[str]


def load_ner(path, tags: TagSet | None = None) -> list[TaggedSentence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            ex = TaggedSentence(list(obj["tokens"]), list(obj["tags"]))
            if len(ex.tokens) != len(ex.tags):
                raise TagValidationError(f"line {lineno}: {len(ex.tokens)} tokens but {len(ex.tags)} tags")
            if tags is not None:
                validate_tags(ex.tags, tags)
            out.append(ex)
    return out


def validate_tags(seq: Sequence[str], tags: TagSet) -> None:
    """Every tag known, and every I-x continues a B-x or I-x."""
    prev = OUTSIDE
    for tag in seq:
        tags.index(tag)
        if tag.startswith("I-") and entity_type(prev) != tag[2:]:
            raise TagValidationError(f"{tag} follows {prev}")
        prev = tag


def init_output_from_prompts(model: StudentModel, tags: TagSet, prompts: PromptMap, vocab: Vocabulary
                             ) -> np.ndarray:
    """Rows are unit-norm start-head embeddings of each tag's question."""
    prompts.covers(tags)
    types = sorted({entity_type(t) for t in tags.tags})
    embs = question_embed_many(model, [tokenize(list(prompts.questions[t]), vocab) for t in types])
    by_type = {t: e.start / np.linalg.norm(e.start) for t, e in zip(types, embs)}
    return np.stack([by_type[entity_type(t)] for t in tags.tags])


def init_output_random(n_tags: int, d: int, seed: int, std: float = 0.02) -> np.ndarray:
    return np.random.default_rng([seed, 4]).normal(0.0, std, size=(n_tags, d))


def ner_forward(reps: np.ndarray, output: np.ndarray, outside: int = 0) -> np.ndarray:
    """Per-token tag log-probabilities; the [BOS] row is pinned to O."""
    reps, output = np.asarray(reps, dtype=np.float64), np.asarray(output, dtype=np.float64)
    if reps.ndim != 2 or output.ndim != 2 or reps.shape[1] != output.shape[1]:
        raise InvalidArgumentError(f"shape mismatch: reps {reps.shape}, output {output.shape}")
    # einsum scores each (token, tag) pair the same way whatever the sentence length, so
    # the identical B-/I- rows of a fresh prompt init tie exactly and argmax keeps B-
    out = log_softmax(np.einsum("ld,td->lt", reps, output), axis=-1)
    out[0] = -np.inf
    out[0, outside] = 0.0
    return out


def predict_tags(model: StudentModel, output: np.ndarray, tags: TagSet, sentence: Sequence[str],
                 vocab: Vocabulary) -> list[str]:
    reps = enc.encode(model.params, model.config, tokenize(list(sentence), vocab)).final
    best = np.argmax(ner_forward(reps, output, tags.index(OUTSIDE)), axis=-1)
    return [tags.tags[k] for k in best[1:]]


def _ner_loss(model: StudentModel, output: Tensor, batch: Sequence[tuple[TokenSequence, np.ndarray]],
              train: bool, rng) -> Tensor:
    ids, lengths = enc.pad_batch([s for s, _ in batch])
    reps = enc.forward(model.params, model.config, ids, lengths, train=train, rng=rng)[-1]
    logp = (reps @ output.T).log_softmax(axis=-1)
    rows, cols, labels = [], [], []
    for b, (_, y) in enumerate(batch):
        n = len(y)
        rows.extend([b] * n)
        cols.extend(range(1, n + 1))  # position 0 is [BOS], pinned to O
        labels.extend(y)
    picked = logp[np.array(rows), np.array(cols), np.array(labels)]
    return -picked.mean()


def ner_loss(model: StudentModel, output, tags: TagSet, data: Sequence[TaggedSentence], vocab: Vocabulary,
             train: bool = False, rng=None) -> Tensor:
    """Mean per-token cross-entropy (the [BOS] position is excluded)."""
    if not data:
        raise InvalidArgumentError("NER loss over an empty dataset")
    batch = [(tokenize(list(ex.tokens), vocab), np.array([tags.index(t) for t in ex.tags])) for ex in data]
    out = output if isinstance(output, Tensor) else Tensor(np.asarray(output, dtype=np.float64))
    return _ner_loss(model, out, batch, train, rng)


@dataclass
class NerHistory:
    initial_loss: float = float("nan")
    epoch_loss: list[float] = field(default_factory=list)


def train_ner(model: StudentModel, output: np.ndarray, tags: TagSet, data: Sequence[TaggedSentence],
              vocab: Vocabulary, hp: TrainConfig = TrainConfig(epochs=5, lr=5e-4, warmup_fraction=0.0),
              batch_size: int = 8, dropout: bool = False) -> tuple[StudentModel, np.ndarray, NerHistory]:
    """Per-token log loss backpropagated through the encoder and the output matrix.

    ``epoch_loss`` holds the full-data loss (eval mode) after each epoch.
    """
    if not data:
        raise InvalidArgumentError("NER training needs at least one sentence")
    for ex in data:
        if len(ex.tokens) != len(ex.tags):
            raise TagValidationError("token and tag counts differ")
        validate_tags(ex.tags, tags)
    out = parameter(np.array(output, dtype=np.float64))
    opt = Adam({"all": model.encoder_params() + [out]}, {"all": hp.lr}, clip_norm=hp.clip_norm,
               weight_decay=hp.weight_decay)
    rng = np.random.default_rng(hp.seed)
    history = NerHistory(initial_loss=ner_loss(model, out.data, tags, data, vocab).item())
    n_batches = -(-len(data) // batch_size)
    total, step = hp.epochs * n_batches, 0
    for epoch in range(hp.epochs):
        order = rng.permutation(len(data))
        for lo in range(0, len(order), batch_size):
            opt.zero_grad()
            loss = ner_loss(model, out, tags, [data[i] for i in order[lo: lo + batch_size]], vocab,
                            train=dropout, rng=rng)
            loss.backward()
            opt.step(hp.lr_scale(step, total))
            step += 1
        history.epoch_loss.append(ner_loss(model, out.data, tags, data, vocab).item())
        log.info("ner epoch %d: loss %.4f", epoch + 1, history.epoch_loss[-1])
    return model, out.data.copy(), history


def evaluate_ner(model: StudentModel, output: np.ndarray, tags: TagSet, data: Sequence[TaggedSentence],
                 vocab: Vocabulary) -> dict:
    pred, gold = [], []
    for k, ex in enumerate(data):
        pred += [(k,) + e for e in bio_decode(predict_tags(model, output, tags, ex.tokens, vocab))]
        gold += [(k,) + e for e in bio_decode(ex.tags)]
    p, r, f = entity_f1(pred, gold)
    return {"precision": p, "recall": r, "f1": f}


# -- sentiment ------------------------------------------------------------------------


@dataclass(frozen=True)
class SentimentPrompt:
    negative: tuple[str, ...]  # asked for label 0
    positive: tuple[str, ...]  # asked for label 1

    def __post_init__(self):
        if tuple(self.negative) == tuple(self.positive):
            raise InvalidArgumentError("the two questions of a prompt must differ")

    def question(self, label: int) -> tuple[str, ...]:
        return self.positive if label == 1 else self.negative


def load_sentiment_prompts(path=None) -> list[SentimentPrompt]:
    raw = _read_json(path, "sentiment_prompts.json")
    try:
        return [SentimentPrompt(tuple(p["negative"]), tuple(p["positive"])) for p in raw]
    except (TypeError, KeyError) as exc:
        raise ConfigurationError(f"malformed sentiment prompt file: {exc}") from None


def substitute_domain(prompt: SentimentPrompt, old: str = "movie", new: str = "product") -> SentimentPrompt:
    def swap(q):
        return tuple(new if w == old else w for w in q)
    return SentimentPrompt(swap(prompt.negative), swap(prompt.positive))


@dataclass(frozen=True)
class CalibrationConstants:
    c0: float
    c1: float
    word_list_id: str

    def __post_init__(self):
        if not (np.isfinite(self.c0) and np.isfinite(self.c1)):
            raise InvalidArgumentError("calibration constants must be finite")

    def offset(self, label: int) -> float:
        return self.c1 if label == 1 else self.c0


def word_list_id(words: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(sorted(words)).encode()).hexdigest()[:12]


def _head_scores(model: StudentModel, x: TokenSequence, q: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    reps = enc.encode(model.params, model.config, x).final
    qe = question_embed_many(model, [q])[0]
    return reps @ qe.start, reps @ qe.end


def scores_from_heads(start: np.ndarray, end: np.ndarray) -> float:
    return float(np.max(start) + np.max(end))


def sentiment_score(model: StudentModel, x: TokenSequence, q: TokenSequence) -> float:
    """How answerable ``q`` looks anywhere in ``x`` ([BOS] included)."""
    if len(x) < 1:
        raise InvalidArgumentError("empty input")
    return scores_from_heads(*_head_scores(model, x, q))


def _require_known(words: Sequence[str], vocab: Vocabulary) -> None:
    unknown = [w for w in words if tokenize([w], vocab).ids[1] == vocab.unk_id]
    if unknown:
        raise InvalidArgumentError(f"words missing from the vocabulary: {unknown}")


def compute_calibration(model: StudentModel, prompt: SentimentPrompt, vocab: Vocabulary,
                        words: Sequence[str] = CONTENT_FREE_WORDS) -> CalibrationConstants:
    """Per-label mean score over single content-free words."""
    if not words:
        raise InvalidArgumentError("calibration needs at least one content-free word")
    _require_known(words, vocab)
    consts = []
    for label in (0, 1):
        q = tokenize(list(prompt.question(label)), vocab)
        consts.append(float(np.mean([sentiment_score(model, tokenize([w], vocab), q) for w in words])))
    return CalibrationConstants(consts[0], consts[1], word_list_id(words))


def decide(score0: float, score1: float, calib: CalibrationConstants) -> tuple[int, float]:
    """Label with the higher calibrated score (ties -> 0) and the signed margin."""
    margin = (score1 - calib.c1) - (score0 - calib.c0)
    return int(margin > 0), float(margin)


def predict_sentiment(model: StudentModel, x: TokenSequence, prompt: SentimentPrompt, calib: CalibrationConstants,
                      vocab: Vocabulary) -> tuple[int, float]:
    s0 = sentiment_score(model, x, tokenize(list(prompt.negative), vocab))
    s1 = sentiment_score(model, x, tokenize(list(prompt.positive), vocab))
    return decide(s0, s1, calib)


def best_span(start_scores, end_scores, max_tokens: int = RATIONALE_TOKENS) -> tuple[Span, float]:
    """Argmax of ``start[i] + end[j]`` over ``1 <= i <= j < i + max_tokens``; ties to smaller i, then j."""
    s = np.asarray(start_scores, dtype=np.float64)
    e = np.asarray(end_scores, dtype=np.float64)
    n = s.shape[0]
    if n < 2:
        raise InvalidArgumentError("need at least one token after [BOS]")
    if max_tokens < 1:
        raise InvalidArgumentError("max_tokens must be at least 1")
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    valid = (i >= 1) & (j >= i) & (j < i + max_tokens)
    scores = np.where(valid, s[:, None] + e[None, :], -np.inf)
    flat = int(np.argmax(scores))
    return Span(flat // n, flat % n), float(scores.flat[flat])


def extract_rationale(model: StudentModel, x: TokenSequence, q: TokenSequence, vocab: Vocabulary,
                      max_tokens: int = RATIONALE_TOKENS) -> tuple[Span, str]:
    """Highest-scoring short answer span for the winning question."""
    span, _ = best_span(*_head_scores(model, x, q), max_tokens=max_tokens)
    return span, detokenize(x.ids[span.start: span.end + 1], vocab)


@dataclass
class SentimentExample:
    tokens: list[str]
    label: int


def load_sentiment(path) -> list[SentimentExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("label") not in (0, 1) or not obj.get("tokens"):
                raise CorpusError(f"line {lineno}: need non-empty tokens and a 0/1 label")
            out.append(SentimentExample(list(obj["tokens"]), int(obj["label"])))
    return out


def evaluate_sentiment(model: StudentModel, data: Sequence[SentimentExample], prompts: Sequence[SentimentPrompt],
                       vocab: Vocabulary, words: Sequence[str] = CONTENT_FREE_WORDS) -> dict:
    """Calibrated zero-shot accuracy per prompt and averaged over prompts."""
    if not prompts or not data:
        raise InvalidArgumentError("need at least one prompt and one example")
    per_prompt = []
    for k, prompt in enumerate(prompts):
        calib = compute_calibration(model, prompt, vocab, words)
        correct, rationales = 0, []
        for ex in data:
            x = tokenize(list(ex.tokens), vocab)
            label, _ = predict_sentiment(model, x, prompt, calib, vocab)
            correct += int(label == ex.label)
            _, text = extract_rationale(model, x, tokenize(list(prompt.question(label)), vocab), vocab)
            rationales.append(text)
        per_prompt.append({"prompt": k, "positive": " ".join(prompt.positive),
                           "negative": " ".join(prompt.negative), "c0": calib.c0, "c1": calib.c1,
                           "accuracy": correct / len(data), "rationales": rationales})
    return {"mean_accuracy": float(np.mean([p["accuracy"] for p in per_prompt])), "per_prompt": per_prompt}
