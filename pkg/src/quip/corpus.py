"""Tokenization, vocabulary, passage chunking and QA dataset ingestion."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

BOS, SEP, UNK, BLANK, PAD = "[BOS]", "[SEP]", "[UNK]", "[BLANK]", "[PAD]"
RESERVED = (PAD, BOS, SEP, UNK, BLANK)

MAX_PASSAGE_TOKENS = 456
MAX_QUESTION_TOKENS = 50


class CorpusError(ValueError):
    """Base class for data-format problems."""


class DatasetParseError(CorpusError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SpanValidationError(CorpusError):
    def __init__(self, qid: str, message: str):
        super().__init__(f"question {qid!r}: {message}")
        self.qid = qid


class OversizedSentenceError(CorpusError):
    pass


class Vocabulary:
    """Bijective token <-> id map with fixed ids for the reserved tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.id_to_token: list[str] = list(RESERVED)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    pad_id = property(lambda self: 0)
    bos_id = property(lambda self: 1)
    sep_id = property(lambda self: 2)
    unk_id = property(lambda self: 3)
    blank_id = property(lambda self: 4)

    def add(self, token: str) -> int:
        token = normalize_token(token)
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return normalize_token(token) in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(normalize_token(token), self.unk_id)

    @classmethod
    def build(cls, texts: Iterable[Sequence[str] | str]) -> "Vocabulary":
        """Vocabulary over every token in ``texts``, ids assigned in sorted order."""
        tokens = set()
        for text in texts:
            words = text.split() if isinstance(text, str) else text
            tokens.update(normalize_token(w) for w in words)
        return cls(sorted(tokens - set(RESERVED)))

    def to_json(self) -> list[str]:
        return list(self.id_to_token)

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise CorpusError("vocabulary does not start with the reserved tokens")
        return cls(tokens[len(RESERVED):])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def normalize_token(token: str) -> str:
    return token if token in RESERVED else token.lower()


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        if not self.ids or self.ids[0] != 1:
            raise CorpusError("token sequences must start with [BOS]")

    def __len__(self) -> int:
        return len(self.ids)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


def tokenize(text: str | Sequence[str], vocab: Vocabulary, max_len: int | None = None) -> TokenSequence:
    """Whitespace-split (unless already split), lowercase, map to ids, prepend [BOS]."""
    words = text.split() if isinstance(text, str) else list(text)
    ids = (vocab.bos_id,) + tuple(vocab.id(w) for w in words)
    if max_len is not None and len(ids) > max_len:
        raise CorpusError(f"sequence of length {len(ids)} exceeds limit {max_len}")
    return TokenSequence(ids)


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return " ".join(vocab.id_to_token[i] for i in ids if i != vocab.bos_id)


@dataclass(frozen=True)
class Span:
    start: int
    end: int

    def validate(self, length: int) -> None:
        if not 0 < self.start <= self.end < length:
            raise CorpusError(f"span [{self.start},{self.end}] invalid for length {length}")


@dataclass
class QARecord:
    passage_id: str
    qid: str
    question: TokenSequence
    answer_text: str
    answer_span: Span | None = None
    answers: list[str] = field(default_factory=list)
    question_words: list[str] | None = None


@dataclass
class Passage:
    id: str
    words: list[str]
    tokens: TokenSequence

    def __len__(self) -> int:
        return len(self.tokens)

    def text(self, span: Span, vocab: Vocabulary) -> str:
        return detokenize(self.tokens.ids[span.start: span.end + 1], vocab)


def chunk_passages(sentence_lengths: Sequence[int], max_len: int = MAX_PASSAGE_TOKENS) -> list[list[int]]:
    """Greedily group contiguous sentences into chunks of at most ``max_len`` tokens."""
    if max_len < 1:
        raise CorpusError("max_len must be positive")
    chunks: list[list[int]] = []
    current: list[int] = []
    total = 0
    for i, n in enumerate(sentence_lengths):
        if n > max_len:
            raise OversizedSentenceError(f"sentence {i} has {n} tokens (limit {max_len})")
        if current and total + n > max_len:
            chunks.append(current)
            current, total = [], 0
        current.append(i)
        total += n
    if current:
        chunks.append(current)
    return chunks


def split_sentences(words: Sequence[str]) -> list[list[str]]:
    sentences, current = [], []
    for w in words:
        current.append(w)
        if w in (".", "?", "!"):
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


def build_passages(documents: Sequence[tuple[str, Sequence[str]]], vocab: Vocabulary,
                   max_len: int = MAX_PASSAGE_TOKENS) -> list[Passage]:
    """Split each ``(doc_id, words)`` into sentence-aligned passages of <= max_len tokens."""
    passages = []
    for doc_id, words in documents:
        sentences = split_sentences(words)
        # one slot per chunk is taken by [BOS]
        chunks = chunk_passages([len(s) for s in sentences], max_len - 1)
        for k, chunk in enumerate(chunks):
            chunk_words = [w for i in chunk for w in sentences[i]]
            pid = doc_id if len(chunks) == 1 else f"{doc_id}-{k}"
            passages.append(Passage(pid, chunk_words, tokenize(chunk_words, vocab)))
    return passages


def _require(cond: bool, line: int, message: str) -> None:
    if not cond:
        raise DatasetParseError(line, message)


def _is_str_list(x) -> bool:
    return isinstance(x, list) and all(isinstance(t, str) for t in x)


def parse_dataset_line(raw: str, lineno: int, vocab: Vocabulary,
                       max_question_len: int = MAX_QUESTION_TOKENS) -> tuple[Passage, list[QARecord]]:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(lineno, f"malformed JSON ({exc.msg})") from None
    _require(isinstance(obj, dict), lineno, "expected a JSON object")
    _require(isinstance(obj.get("id"), str), lineno, "missing string field 'id'")
    _require(_is_str_list(obj.get("context")), lineno, "'context' must be a list of strings")
    _require(isinstance(obj.get("qas"), list), lineno, "'qas' must be a list")
    passage = Passage(obj["id"], list(obj["context"]), tokenize(obj["context"], vocab))
    records = []
    for qa in obj["qas"]:
        _require(isinstance(qa, dict), lineno, "each qa must be an object")
        qid = qa.get("qid")
        _require(isinstance(qid, str), lineno, "qa missing string 'qid'")
        _require(_is_str_list(qa.get("question")), lineno, f"{qid}: 'question' must be a list of strings")
        _require(_is_str_list(qa.get("answers")), lineno, f"{qid}: 'answers' must be a list of strings")
        question = tokenize(qa["question"], vocab)
        if len(question) > max_question_len:
            raise SpanValidationError(qid, f"question has {len(question)} tokens (limit {max_question_len})")
        span = qa.get("span")
        answer_span = None
        if span is not None:
            ok = isinstance(span, list) and len(span) == 2 and all(type(v) is int for v in span)
            _require(ok, lineno, f"{qid}: 'span' must be [start, end] or null")
            answer_span = Span(span[0], span[1])
            try:
                answer_span.validate(len(passage))
            except CorpusError as exc:
                raise SpanValidationError(qid, str(exc)) from None
        answers = list(qa["answers"])
        answer_text = answers[0] if answers else ""
        if answer_span is not None:
            span_ids = passage.tokens.ids[answer_span.start: answer_span.end + 1]
            if answers and all(tokenize(a, vocab).ids[1:] != span_ids for a in answers):
                raise SpanValidationError(qid, f"span tokens match none of the answers {answers}")
            answer_text = passage.text(answer_span, vocab)
        records.append(QARecord(passage.id, qid, question, answer_text, answer_span, answers,
                                list(qa["question"])))
    return passage, records


def load_dataset(path, vocab: Vocabulary, max_question_len: int = MAX_QUESTION_TOKENS
                 ) -> list[tuple[Passage, list[QARecord]]]:
    """Read a JSONL QA dataset, validating every span and question length."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            out.append(parse_dataset_line(raw, lineno, vocab, max_question_len))
    return out


def dataset_to_json(passage: Passage, records: Sequence[QARecord], vocab: Vocabulary) -> dict:
    return {
        "id": passage.id,
        "context": list(passage.words),
        "qas": [
            {
                "qid": r.qid,
                "question": r.question_words if r.question_words is not None
                else detokenize(r.question, vocab).split(),
                "answers": list(r.answers) or [r.answer_text],
                "span": None if r.answer_span is None else [r.answer_span.start, r.answer_span.end],
            }
            for r in records
        ],
    }


def write_dataset(path, entries: Sequence[tuple[Passage, Sequence[QARecord]]], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for passage, records in entries:
            fh.write(json.dumps(dataset_to_json(passage, records, vocab), ensure_ascii=False) + "\n")


def find_unique(haystack: Sequence[int], needle: Sequence[int]) -> int | None:
    """Start index of the unique occurrence of ``needle``; None if absent or repeated."""
    n = len(needle)
    hits = [i for i in range(len(haystack) - n + 1) if tuple(haystack[i:i + n]) == tuple(needle)]
    return hits[0] if len(hits) == 1 else None
