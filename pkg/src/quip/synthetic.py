"""Deterministic toy world used for the bundled desk-scale datasets.

People, places, organizations and discoveries are sampled from small name
lists; each document states a handful of facts about them.  The same facts
yield gold QA pairs (for the teacher), BIO-tagged NER sentences, paraphrase
pairs with graded judgments, and a small sentiment set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .qgen import find_candidates

FIRST = ["marie", "albert", "ada", "isaac", "rosalind", "niels", "grace", "alan", "lise", "enrico",
         "emmy", "max", "dorothy", "paul", "barbara", "werner", "chien", "james", "katherine", "louis",
         "hedy", "carl", "vera", "ernest"]
LAST = ["curie", "weber", "lovell", "norton", "franks", "bohr", "hopper", "turing", "meitner", "fermi",
        "noether", "planck", "hodge", "dirac", "mcclain", "heisen", "wu", "maxwell", "johnson", "pasteur",
        "lamarr", "sagan", "rubin", "rutter"]
CITIES = ["paris", "warsaw", "vienna", "berlin", "lisbon", "oslo", "geneva", "dublin", "prague", "madrid",
          "boston", "kyoto", "lima", "cairo", "quito", "riga", "turin", "ghent", "bergen", "tartu",
          ("new", "avalon"), ("san", "marco"), ("port", "ellis"), ("saint", "hollow")]
COUNTRIES = ["france", "poland", "austria", "germany", "portugal", "norway", "ireland", "spain", "peru",
             "egypt", "japan", "latvia"]
ORGS = ["nordtek", "helix", "quantix", "orbis", "lumen", "vantage", "solace", "kestrel", "arbor", "zenith",
        "cobalt", "meridian", ("blue", "harbor"), ("red", "summit"), ("iron", "gate"), ("silver", "lake")]
THINGS = ["radium", "penicillin", "insulin", "graphene", "polonium", "neptunium", "quasars", "pulsars",
          "vaccines", "enzymes", "isotopes", "neutrons", "positrons", "plasmids", "ribosomes", "catalysts"]


def _words(x) -> list[str]:
    return list(x) if isinstance(x, tuple) else [x]


def _cap(words: list[str]) -> list[str]:
    return [w.capitalize() for w in words]


@dataclass
class Fact:
    kind: str
    sentence: list[str]
    # (question words, answer words) with well-formed wording
    questions: list[tuple[list[str], list[str]]]
    entities: list[tuple[str, int, int]]  # (type, start, end) inside ``sentence``, inclusive


class World:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def _pick(self, items):
        return items[int(self.rng.integers(len(items)))]

    def person(self) -> list[str]:
        return [self._pick(FIRST), self._pick(LAST)]

    def year(self) -> str:
        return str(int(self.rng.integers(1800, 2000)))

    def fact(self, person: list[str]) -> Fact:
        p = _cap(person)
        kind = self._pick(["discovered", "born", "founded", "moved", "capital", "based"])
        if kind == "discovered":
            thing, year = self._pick(THINGS), self.year()
            s = p + ["discovered", thing, "in", year, "."]
            qs = [(["who", "discovered", thing, "?"], p),
                  (["what", "did"] + p + ["discover", "?"], [thing]),
                  (["when", "did"] + p + ["discover", thing, "?"], [year])]
            ents = [("person", 0, 1)]
        elif kind == "born":
            city = _cap(_words(self._pick(CITIES)))
            s = p + ["was", "born", "in"] + city + ["."]
            qs = [(["where", "was"] + p + ["born", "?"], city),
                  (["who", "was", "born", "in"] + city + ["?"], p)]
            ents = [("person", 0, 1), ("location", 5, 4 + len(city))]
        elif kind == "founded":
            org, year = _cap(_words(self._pick(ORGS))), self.year()
            s = p + ["founded"] + org + ["in", year, "."]
            qs = [(["who", "founded"] + org + ["?"], p),
                  (["when", "was"] + org + ["founded", "?"], [year]),
                  (["what", "did"] + p + ["found", "?"], org)]
            ents = [("person", 0, 1), ("organization", 3, 2 + len(org))]
        elif kind == "moved":
            city, year = _cap(_words(self._pick(CITIES))), self.year()
            s = p + ["moved", "to"] + city + ["in", year, "."]
            qs = [(["where", "did"] + p + ["move", "?"], city),
                  (["when", "did"] + p + ["move", "to"] + city + ["?"], [year])]
            ents = [("person", 0, 1), ("location", 4, 3 + len(city))]
        elif kind == "capital":
            city, country = _cap(_words(self._pick(CITIES))), self._pick(COUNTRIES).capitalize()
            s = city + ["is", "a", "city", "in", country, "."]
            qs = [(["what", "country", "is"] + city + ["in", "?"], [country])]
            n = len(city)
            ents = [("location", 0, n - 1), ("location", n + 4, n + 4)]
        else:
            org, city = _cap(_words(self._pick(ORGS))), _cap(_words(self._pick(CITIES)))
            s = org + ["is", "based", "in"] + city + ["."]
            qs = [(["where", "is"] + org + ["based", "?"], city)]
            n = len(org)
            ents = [("organization", 0, n - 1), ("location", n + 3, n + 2 + len(city))]
        return Fact(kind, s, qs, ents)

    def document(self, n_sentences: int) -> list[Fact]:
        people: list[list[str]] = []
        while len(people) < n_sentences:
            cand = self.person()
            if cand not in people:
                people.append(cand)
        return [self.fact(p) for p in people]


def _find(words: list[str], needle: list[str]) -> list[int]:
    n = len(needle)
    low = [w.lower() for w in words]
    target = [w.lower() for w in needle]
    return [i for i in range(len(words) - n + 1) if low[i:i + n] == target]


def raw_corpus(n_passages: int, seed: int, sentences=(4, 7)) -> list[dict]:
    """Unlabeled passages in the dataset JSONL schema (``qas`` empty)."""
    world = World(seed)
    out = []
    for k in range(n_passages):
        facts = world.document(int(world.rng.integers(sentences[0], sentences[1] + 1)))
        words = [w for f in facts for w in f.sentence]
        out.append({"id": f"p{seed}-{k:04d}", "context": words, "qas": []})
    return out


def _slot_questions(sentence: list[str]) -> list[tuple[list[str], list[str]]]:
    """The sentence with one answer candidate swapped for its wh-word."""
    out = []
    for c in find_candidates([sentence]):
        q = [w.lower() for w in sentence[: c.start]] + [c.kind] + [w.lower() for w in sentence[c.end + 1:]]
        q[-1] = "?"
        out.append((q, sentence[c.start: c.end + 1]))
    return out


def gold_qa(n_passages: int, seed: int, per_passage: int = 6, sentences=(4, 7),
            slot_questions: bool = True) -> list[dict]:
    """Passages with questions and token spans (the labeled QA set).

    Questions mix well-formed wording with wh-slot rewrites of the passage
    sentences, so a reader trained here also handles template questions.
    """
    world = World(seed)
    out = []
    for k in range(n_passages):
        facts = world.document(int(world.rng.integers(sentences[0], sentences[1] + 1)))
        words = [w for f in facts for w in f.sentence]
        qas = []
        candidates = [(q, a) for f in facts for q, a in f.questions]
        if slot_questions:
            candidates += [qa for f in facts for qa in _slot_questions(f.sentence)]
        order = world.rng.permutation(len(candidates))
        for j in order:
            q, a = candidates[j]
            hits = _find(words, a)
            if len(hits) != 1:
                continue
            start = hits[0] + 1  # +1 for [BOS]
            qas.append({"qid": f"g{seed}-{k:04d}-{len(qas)}", "question": [w.lower() for w in q],
                        "answers": [" ".join(a).lower()], "span": [start, start + len(a) - 1]})
            if len(qas) >= per_passage:
                break
        # an unanswerable question keeps the [BOS] slot in use
        if world.rng.random() < 0.3:
            thing = world._pick([t for t in THINGS if t not in words])
            qas.append({"qid": f"g{seed}-{k:04d}-{len(qas)}", "question": ["who", "discovered", thing, "?"],
                        "answers": [""], "span": None})
        out.append({"id": f"g{seed}-{k:04d}", "context": words, "qas": qas})
    return out


def ner_sentences(n: int, seed: int) -> list[dict]:
    world = World(seed)
    out = []
    while len(out) < n:
        f = world.fact(world.person())
        tags = ["O"] * len(f.sentence)
        for typ, s, e in f.entities:
            tags[s] = f"B-{typ}"
            for i in range(s + 1, e + 1):
                tags[i] = f"I-{typ}"
        out.append({"tokens": [w.lower() for w in f.sentence], "tags": tags})
    return out


def few_shot_ner(shots: int, seed: int, types=("person", "location", "organization")) -> list[dict]:
    """At least ``shots`` sentences containing each entity type (greedy cover)."""
    pool = ner_sentences(400, seed)
    counts = {t: 0 for t in types}
    chosen = []
    for ex in pool:
        present = {t[2:] for t in ex["tags"] if t.startswith("B-")}
        if any(counts[t] < shots for t in present if t in counts):
            chosen.append(ex)
            for t in present:
                if t in counts:
                    counts[t] += 1
        if all(c >= shots for c in counts.values()):
            break
    return chosen


def _paraphrase(fact: Fact) -> list[str]:
    s = [w.lower() for w in fact.sentence]
    if fact.kind == "discovered":
        person, thing, year = s[0:2], s[3], s[5]
        return [thing, "was", "discovered", "by"] + person + ["in", year, "."]
    if fact.kind == "founded":
        person, rest = s[0:2], s[3:-3]
        year = s[-2]
        return ["in", year, ","] + person + ["founded"] + rest + ["."]
    if fact.kind == "born":
        return ["the", "birthplace", "of"] + s[0:2] + ["was"] + s[5:-1] + ["."]
    if fact.kind == "moved":
        return ["in", s[-2], ","] + s[0:2] + ["relocated", "to"] + s[4:-3] + ["."]
    if fact.kind == "capital":
        n = s.index("is")
        return ["the", "city", "of"] + s[:n] + ["lies", "in", s[-2], "."]
    n = s.index("is")
    return ["the", "headquarters", "of"] + s[:n] + ["are", "in"] + s[n + 3:-1] + ["."]


def paraphrase_pairs(n: int, seed: int) -> list[dict]:
    """Balanced pairs; negatives keep the template but change one entity."""
    world = World(seed)
    out = []
    for k in range(n):
        f = world.fact(world.person())
        s1 = [w.lower() for w in f.sentence]
        if k % 2 == 0:
            s2, label = _paraphrase(f), 1
        else:
            other = f
            while [w.lower() for w in other.sentence] == s1 or other.kind != f.kind:
                other = world.fact(world.person())
            s2, label = _paraphrase(other), 0
        c1, c2 = set(s1) - {".", ","}, set(s2) - {".", ","}
        jaccard = len(c1 & c2) / len(c1 | c2)
        out.append({"s1": s1, "s2": s2, "label": label, "judgment": round(0.6 * label + 0.4 * jaccard, 6)})
    return out


POSITIVE = ["good", "great", "wonderful", "fun", "brilliant", "charming", "moving", "delightful"]
NEGATIVE = ["bad", "terrible", "boring", "awful", "dull", "tedious", "clumsy", "painful"]
SUBJECTS = [["the", "movie"], ["this", "film"], ["the", "story"], ["the", "acting"], ["the", "ending"]]


def sentiment_set(n: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        label = k % 2
        words = POSITIVE if label else NEGATIVE
        subj = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        a, b = rng.choice(len(words), size=2, replace=False)
        out.append({"tokens": subj + ["was", words[a], "and", words[b], "."], "label": label})
    return out


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def write_bundle(directory, seed: int = 0, n_passages: int = 64, n_gold_passages: int | None = None
                 ) -> dict[str, Path]:
    """Write every toy dataset into ``directory``; returns name -> path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "corpus": (raw_corpus(n_passages, seed + 1000),),
        "gold_train": (gold_qa(n_gold_passages or n_passages, seed + 2000, per_passage=10),),
        "gold_dev": (gold_qa(max(8, n_passages // 4), seed + 3000, per_passage=10),),
        "ner_train": (few_shot_ner(5, seed + 4000),),
        "ner_test": (ner_sentences(40, seed + 5000),),
        "paraphrase_train": (paraphrase_pairs(32, seed + 6000),),
        "paraphrase_test": (paraphrase_pairs(64, seed + 7000),),
        "sentiment": (sentiment_set(20, seed + 8000),),
    }
    paths = {}
    for name, (rows,) in files.items():
        paths[name] = d / f"{name}.jsonl"
        _write_jsonl(paths[name], rows)
    return paths
