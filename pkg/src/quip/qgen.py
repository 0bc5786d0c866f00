"""Question-answer synthesis over raw passages."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .corpus import BLANK, Passage, QARecord, Span, Vocabulary, find_unique, split_sentences, tokenize
from .numerics import InvalidArgumentError

log = logging.getLogger(__name__)

FUNCTION_WORDS = frozenset(
    "a an the of in on at to for from by with and or but is was are were be been it its this that "
    "these those he she they we i you his her their our my your as into over under".split()
)
DROP_PROB = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    questions_per_passage: int = 10
    nucleus_p: float = 0.6
    seed: int = 0
    unique_answers: bool = False
    drop_prob: float = DROP_PROB

    def __post_init__(self):
        if self.questions_per_passage < 1:
            raise InvalidArgumentError("questions_per_passage must be at least 1")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise InvalidArgumentError("nucleus_p must lie in (0, 1]")


@dataclass
class GeneratedQA:
    passage_id: str
    question: list[str]
    answer_text: str
    answer_span: Span | None

    def record(self, qid: str, vocab: Vocabulary) -> QARecord:
        return QARecord(self.passage_id, qid, tokenize(self.question, vocab), self.answer_text,
                        self.answer_span, [self.answer_text], list(self.question))


@dataclass(frozen=True)
class Candidate:
    sentence: int
    start: int  # word offsets within the sentence, inclusive
    end: int
    kind: str   # "who" | "what" | "when"


def passage_seed(seed: int, passage_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{passage_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _is_capitalized(word: str) -> bool:
    return word[:1].isupper() and word.lower() not in FUNCTION_WORDS


def find_candidates(sentences: Sequence[Sequence[str]]) -> list[Candidate]:
    """Maximal capitalized runs and numeric tokens, in text order."""
    out = []
    for s, words in enumerate(sentences):
        i = 0
        while i < len(words):
            w = words[i]
            if _is_capitalized(w):
                j = i
                while j + 1 < len(words) and _is_capitalized(words[j + 1]):
                    j += 1
                out.append(Candidate(s, i, j, "who" if j > i else "what"))
                i = j + 1
                continue
            if w.isdigit():
                out.append(Candidate(s, i, i, "when" if len(w) == 4 else "what"))
            i += 1
    return out


def _answer(passage: Passage, cand: Candidate, sentences, vocab: Vocabulary) -> tuple[str, Span | None]:
    words = sentences[cand.sentence][cand.start: cand.end + 1]
    text = " ".join(w.lower() for w in words)
    needle = tokenize(words, vocab).ids[1:]
    hit = find_unique(passage.tokens.ids, needle)
    if hit is None:
        log.debug("answer %r in %s is ambiguous; leaving it to the teacher", text, passage.id)
        return text, None
    return text, Span(hit, hit + len(needle) - 1)


def _select(cands: list[Candidate], sentences, n: int, rng: np.random.Generator, unique: bool
            ) -> list[Candidate]:
    if unique:
        seen, kept = set(), []
        for c in cands:
            key = tuple(w.lower() for w in sentences[c.sentence][c.start: c.end + 1])
            if key not in seen:
                seen.add(key)
                kept.append(c)
        cands = kept
    if len(cands) <= n:
        return cands
    chosen = np.sort(rng.choice(len(cands), size=n, replace=False))
    return [cands[i] for i in chosen]


def generate_rule_based(passage: Passage, config: GeneratorConfig, vocab: Vocabulary) -> list[GeneratedQA]:
    """Wh-template questions: the answer span in its sentence is replaced by who/what/when."""
    if len(passage) < 4:
        raise InvalidArgumentError(f"passage {passage.id} is too short for question generation")
    sentences = split_sentences(passage.words)
    cands = find_candidates(sentences)
    if not cands:
        log.info("no answer candidates in passage %s", passage.id)
        return []
    rng = np.random.default_rng(passage_seed(config.seed, passage.id))
    out = []
    for c in _select(cands, sentences, config.questions_per_passage, rng, config.unique_answers):
        words = [w.lower() for w in sentences[c.sentence]]
        question = words[: c.start] + [c.kind] + words[c.end + 1:]
        if question and question[-1] in (".", "!"):
            question[-1] = "?"
        elif not question or question[-1] != "?":
            question.append("?")
        text, span = _answer(passage, c, sentences, vocab)
        out.append(GeneratedQA(passage.id, question, text, span))
    return out


def generate_cloze_noise(passage: Passage, config: GeneratorConfig, vocab: Vocabulary) -> list[GeneratedQA]:
    """Pseudo-questions: the span's sentence with the span blanked and other words randomly dropped."""
    sentences = split_sentences(passage.words)
    cands = find_candidates(sentences)
    if not cands:
        log.info("no answer candidates in passage %s", passage.id)
        return []
    rng = np.random.default_rng(passage_seed(config.seed, passage.id))
    out = []
    for c in _select(cands, sentences, config.questions_per_passage, rng, config.unique_answers):
        words = [w.lower() for w in sentences[c.sentence]]
        question = []
        for i, w in enumerate(words):
            if i == c.start:
                question.append(BLANK)
            elif c.start < i <= c.end:
                continue
            elif rng.random() >= config.drop_prob:
                question.append(w)
        text, span = _answer(passage, c, sentences, vocab)
        out.append(GeneratedQA(passage.id, question, text, span))
    return out


GENERATORS = {"rule": generate_rule_based, "cloze": generate_cloze_noise}


def generate_corpus(passages: Sequence[Passage], config: GeneratorConfig, vocab: Vocabulary,
                    generator: str = "rule") -> list[tuple[Passage, list[QARecord]]]:
    try:
        fn = GENERATORS[generator]
    except KeyError:
        raise InvalidArgumentError(f"unknown generator {generator!r}") from None
    out = []
    for p in passages:
        qas = fn(p, config, vocab)
        out.append((p, [qa.record(f"{p.id}-q{k}", vocab) for k, qa in enumerate(qas)]))
    return out


# -- generative backends --------------------------------------------------------------


def nucleus_filter(probs, p: float) -> np.ndarray:
    """Keep the smallest highest-probability prefix with mass >= p, renormalized."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0.0 < p <= 1.0:
        raise InvalidArgumentError("p must lie in (0, 1]")
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    cut = int(np.searchsorted(cumulative, p, side="left")) + 1
    keep = order[: min(cut, probs.size)]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def sample_nucleus(probs, p: float, rng: np.random.Generator) -> int:
    filtered = nucleus_filter(probs, p)
    return int(rng.choice(filtered.size, p=filtered))


class TokenDistributionModel(Protocol):
    """A generative backend: next-token distribution given a prefix of token ids."""

    def next_token_probs(self, prefix: Sequence[int]) -> np.ndarray: ...


def nucleus_decode(model: TokenDistributionModel, prefix: Sequence[int], stop_id: int, max_tokens: int,
                   p: float, rng: np.random.Generator) -> list[int]:
    """Sample a continuation with top-p filtering at every step (stops at ``stop_id``)."""
    out = list(prefix)
    for _ in range(max_tokens):
        tok = sample_nucleus(model.next_token_probs(out), p, rng)
        out.append(tok)
        if tok == stop_id:
            break
    return out[len(prefix):]
