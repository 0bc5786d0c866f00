"""Staged experiment runner with hash-keyed artifact caching.

Every stage writes into ``out/<stage>/``.  ``out/manifest.json`` records, per
stage, the cache key (stage name, the config fields it reads, and the hashes
of its input artifacts) and the SHA-256 of every file it produced.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import shutil
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import bertscore, encoder as enc, prompts, qgen, student, synthetic, teacher
from .config import RunConfig, config_hash
from .corpus import CorpusError, Vocabulary, load_dataset, tokenize, write_dataset
from .encoder import ConfigurationError
from .metrics import exact_match, token_f1
from .numerics import InvalidArgumentError, entropy
from .training import TrainConfig

log = logging.getLogger(__name__)

STAGES = ("synth", "teacher", "relabel", "distill", "eval-qa", "eval-paraphrase", "eval-ner", "eval-sentiment")
DEPENDS = {
    "synth": (),
    "teacher": ("synth",),
    "relabel": ("synth", "teacher"),
    "distill": ("synth", "teacher", "relabel"),
    "eval-qa": ("synth", "teacher", "distill"),
    "eval-paraphrase": ("synth", "distill"),
    "eval-ner": ("synth", "distill"),
    "eval-sentiment": ("synth", "distill"),
}
DATA_FILES = ("corpus", "gold_train", "gold_dev", "ner_train", "ner_test", "paraphrase_train",
              "paraphrase_test", "sentiment")
RUNTIME_KEY = "runtime"
VALIDATION_ERRORS = (ConfigurationError, CorpusError, InvalidArgumentError)


class StaleArtifactError(RuntimeError):
    """A cached artifact no longer matches the hash recorded when it was made."""


class LockedError(RuntimeError):
    pass


class ReportVerificationError(ValueError):
    pass


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


@contextlib.contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out} is in use by another run (remove {lock} if that run died)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def stage_config(cfg: RunConfig, stage: str) -> dict:
    """The config fields a stage reads; the seed is part of every stage's key."""
    c = cfg.to_dict()
    sub = {
        "synth": {"data": c["data"], "generator": c["generator"],
                  "n_gold_passages": c["teacher"]["n_gold_passages"], "prompts": c["sentiment"]["prompts"]},
        "teacher": {"encoder": c["encoder"], "teacher": c["teacher"]},
        "relabel": {"labels": c["distill"]["labels"], "top_k": c["distill"]["top_k"]},
        "distill": {"encoder": c["encoder"], "distill": c["distill"]},
        "eval-qa": {},
        "eval-paraphrase": {"paraphrase": c["paraphrase"]},
        "eval-ner": {"ner": c["ner"]},
        "eval-sentiment": {"sentiment": c["sentiment"]},
    }[stage]
    return {"seed": c["seed"], **sub}


@dataclass
class Context:
    cfg: RunConfig
    out: Path

    def dir(self, stage: str) -> Path:
        return self.out / stage

    def data(self, name: str) -> Path:
        return self.dir("synth") / f"{name}.jsonl"

    def vocab(self) -> Vocabulary:
        return Vocabulary.load(self.dir("synth") / "vocab.json")

    def student(self) -> student.StudentModel:
        """A fresh copy of the distilled student (callers may train it)."""
        params, config, meta = enc.load_checkpoint(self.dir("distill") / "student.ckpt", len(self.vocab()))
        return student.StudentModel(config, params, meta.get("head_activation", "gelu"))

    def teacher(self) -> teacher.TeacherModel:
        params, config, _ = enc.load_checkpoint(self.dir("teacher") / "teacher.ckpt", len(self.vocab()))
        return teacher.TeacherModel(config, params)


# -- stages -------------------------------------------------------------------------


def _vocab_texts(ctx: Context) -> list:
    texts = [["who", "what", "when", "where", "?"], list(prompts.CONTENT_FREE_WORDS)]
    for name in DATA_FILES:
        with open(ctx.data(name), encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                texts.append(obj.get("context", []))
                texts += [qa["question"] for qa in obj.get("qas", [])]
                texts += [obj.get(k, []) for k in ("tokens", "s1", "s2")]
    texts += [list(q) for q in prompts.PromptMap.load().questions.values()]
    for p in prompts.load_sentiment_prompts(ctx.cfg.sentiment.prompts):
        texts += [list(p.positive), list(p.negative)]
        texts += [list(q) for q in (prompts.substitute_domain(p).positive, prompts.substitute_domain(p).negative)]
    return texts


def stage_synth(ctx: Context) -> dict:
    cfg, d = ctx.cfg, ctx.dir("synth")
    if cfg.data.dir is None:
        synthetic.write_bundle(d, seed=cfg.seed, n_passages=cfg.data.n_passages,
                               n_gold_passages=cfg.teacher.n_gold_passages)
    else:
        for name in DATA_FILES:
            src = Path(cfg.data.dir) / f"{name}.jsonl"
            if not src.is_file():
                raise ConfigurationError(f"data.dir is missing {src.name}")
            shutil.copyfile(src, ctx.data(name))
    vocab = Vocabulary.build(_vocab_texts(ctx))
    vocab.save(d / "vocab.json")
    passages = [p for p, _ in load_dataset(ctx.data("corpus"), vocab)]
    gen_cfg = qgen.GeneratorConfig(questions_per_passage=cfg.generator.questions_per_passage,
                                   nucleus_p=cfg.generator.nucleus_p, seed=cfg.seed,
                                   unique_answers=cfg.generator.unique_answers)
    generated = qgen.generate_corpus(passages, gen_cfg, vocab, cfg.generator.kind)
    write_dataset(d / "generated.jsonl", generated, vocab)
    n_q = sum(len(rs) for _, rs in generated)
    return {"vocab_size": len(vocab), "passages": len(passages), "generated_questions": n_q,
            "generated_without_span": sum(r.answer_span is None for _, rs in generated for r in rs),
            "generator": cfg.generator.kind}


def stage_teacher(ctx: Context) -> dict:
    cfg, vocab = ctx.cfg, ctx.vocab()
    gold = load_dataset(ctx.data("gold_train"), vocab)
    model = teacher.TeacherModel.init(cfg.encoder_config(len(vocab)), cfg.seed)
    hp = TrainConfig(epochs=cfg.teacher.epochs, lr=cfg.teacher.lr, warmup_fraction=cfg.teacher.warmup_fraction,
                     seed=cfg.seed)
    model, hist = teacher.train_teacher(model, gold, hp, cfg.teacher.heldout_fraction)
    digest = enc.save_checkpoint(model.params, model.config, ctx.dir("teacher") / "teacher.ckpt")
    return {"initial_loss": hist.initial_loss, "train_loss": hist.train_loss, "heldout_loss": hist.heldout_loss,
            "checkpoint_sha256": digest}


def _one_hot_labels(entries) -> list[teacher.SparseSpanLabels]:
    out = []
    for _, records in entries:
        for r in records:
            if r.answer_span is None:
                out.append(teacher.SparseSpanLabels.one_hot(r.qid, 0, 0))
            else:
                out.append(teacher.SparseSpanLabels.one_hot(r.qid, r.answer_span.start, r.answer_span.end))
    return out


def stage_relabel(ctx: Context) -> dict:
    cfg, vocab, d = ctx.cfg, ctx.vocab(), ctx.dir("relabel")
    source = cfg.distill.labels
    dataset = "gold_train" if source == "gold" else "generated"
    path = ctx.data(dataset) if dataset == "gold_train" else ctx.dir("synth") / "generated.jsonl"
    entries = load_dataset(path, vocab)
    dropped = 0
    if source == "teacher":
        labels = teacher.relabel(ctx.teacher(), entries, k=cfg.distill.top_k)
    elif source == "gold":
        labels = _one_hot_labels(entries)
    else:
        # a generated question without a span had an ambiguous answer: nothing to train on
        kept = [(p, [r for r in rs if r.answer_span is not None]) for p, rs in entries]
        dropped = sum(len(rs) for _, rs in entries) - sum(len(rs) for _, rs in kept)
        labels = _one_hot_labels(kept)
    teacher.write_labels(d / "labels.jsonl", labels)
    _write_json(d / "source.json", {"dataset": dataset, "labels": source})
    metrics = {"labels": len(labels), "dropped": dropped, "source": source, "dataset": dataset}
    if labels:
        metrics["mean_start_entropy"] = float(np.mean([entropy([p for _, p in l.start]) for l in labels]))
        metrics["unanswerable_fraction"] = float(np.mean([l.unanswerable for l in labels]))
    if source == "teacher":
        by_qid = {l.qid: l for l in labels}
        spans = [(by_qid[r.qid], r.answer_span) for _, rs in entries for r in rs if r.answer_span is not None]
        if spans:
            metrics["teacher_start_matches_generated_span"] = float(
                np.mean([l.argmax()[0] == s.start for l, s in spans]))
    return metrics


def distill_batches(ctx: Context) -> list[student.TrainBatch]:
    vocab = ctx.vocab()
    source = _read_json(ctx.dir("relabel") / "source.json")
    path = ctx.data("gold_train") if source["dataset"] == "gold_train" else ctx.dir("synth") / "generated.jsonl"
    labels = {l.qid: l for l in teacher.read_labels(ctx.dir("relabel") / "labels.jsonl")}
    batches = []
    for passage, records in load_dataset(path, vocab):
        rs = [r for r in records if r.qid in labels]
        if rs:
            batches.append(student.TrainBatch(passage.tokens, [r.question for r in rs], [labels[r.qid] for r in rs]))
    if not batches:
        raise InvalidArgumentError("no labeled questions to distill")
    return batches


def stage_distill(ctx: Context) -> dict:
    cfg, vocab = ctx.cfg, ctx.vocab()
    batches = distill_batches(ctx)
    model = student.StudentModel.init(cfg.encoder_config(len(vocab)), cfg.seed)
    if cfg.distill.init_from_teacher:
        t = ctx.teacher()
        for name in enc.encoder_names(model.params):
            model.params[name] = enc.parameter(t.params[name].data)
    hp = TrainConfig(epochs=cfg.distill.epochs, lr=cfg.distill.lr, warmup_fraction=cfg.distill.warmup_fraction,
                     seed=cfg.seed)
    model, hist = student.train_distill(model, batches, hp, cfg.distill.loss)
    digest = enc.save_checkpoint(model.params, model.config, ctx.dir("distill") / "student.ckpt",
                                 {"head_activation": model.head_activation})
    return {"epoch_loss": hist.epoch_loss, "passage_encodes": hist.passage_encodes,
            "batches_per_epoch": hist.batches_per_epoch, "questions": sum(len(b.questions) for b in batches),
            "argmax_start_agreement": student.argmax_agreement(model, batches), "loss": cfg.distill.loss,
            "checkpoint_sha256": digest}


def _qa_scores(predict: Callable, entries) -> dict:
    em, f1 = [], []
    for passage, records in entries:
        for r in records:
            text = predict(passage, r)
            golds = r.answers if r.answer_span is not None else [""]
            em.append(exact_match(text, golds))
            f1.append(token_f1(text, golds))
    return {"exact_match": float(np.mean(em)), "f1": float(np.mean(f1)), "questions": len(em)}


def stage_eval_qa(ctx: Context) -> dict:
    vocab = ctx.vocab()
    dev = load_dataset(ctx.data("gold_dev"), vocab)
    model = ctx.student()

    def student_answer(passage, r):
        return student.answer_question(model, passage.tokens, r.question, vocab)[1]

    tm = ctx.teacher()

    def teacher_answer(passage, r):
        span, _ = student.decode_span(teacher.teacher_predict(tm, passage.tokens, r.question))
        return "" if span is None else passage.text(span, vocab)

    return {"student": _qa_scores(student_answer, dev), "teacher": _qa_scores(teacher_answer, dev)}


def stage_eval_paraphrase(ctx: Context) -> dict:
    cfg, vocab = ctx.cfg, ctx.vocab()
    train = bertscore.load_pairs(ctx.data("paraphrase_train"))
    test = bertscore.load_pairs(ctx.data("paraphrase_test"))
    model = ctx.student()
    selection = bertscore.select_layer(model, train, vocab)
    test_scores = bertscore.layer_scores(model, test, vocab)
    y_test = [p.label for p in test]
    per_layer = [{"layer": l, "train_pearson": selection.correlations[l],
                  "test_auroc": bertscore.auroc(test_scores[:, l], y_test)} for l in range(test_scores.shape[1])]
    x_train = bertscore.extract_features(model, train, vocab)
    x_test = bertscore.extract_features(model, test, vocab)
    lr_model = bertscore.train_logreg(x_train, [p.label for p in train], cfg.paraphrase.l2_lambda)
    hp = TrainConfig(epochs=cfg.paraphrase.fine_tune_epochs, lr=cfg.paraphrase.fine_tune_lr,
                     warmup_fraction=0.0, seed=cfg.seed)
    clf, hist = bertscore.fine_tune_paraphrase(ctx.student(), train, vocab, hp, cfg.paraphrase.output_lr_factor)
    test_pairs = [(tokenize(p.s1, vocab), tokenize(p.s2, vocab)) for p in test]
    ft_pred = (clf.predict_proba(test_pairs) >= 0.5).astype(int)
    return {
        "zero_shot": {"selected_layer": selection.layer, "test_auroc": per_layer[selection.layer]["test_auroc"]},
        "few_shot_logreg": {"test_f1": bertscore.f1_positive(lr_model.predict(x_test), y_test)},
        "fine_tune": {"test_f1": bertscore.f1_positive(ft_pred, y_test), "epoch_loss": hist.epoch_loss,
                      "lr_ratio": hist.lr_ratio},
        "per_layer": per_layer,
    }


def stage_eval_ner(ctx: Context) -> dict:
    cfg, vocab = ctx.cfg, ctx.vocab()
    tags = prompts.TagSet.from_types(list(cfg.ner.types))
    train = prompts.load_ner(ctx.data("ner_train"), tags)
    test = prompts.load_ner(ctx.data("ner_test"), tags)
    hp = TrainConfig(epochs=cfg.ner.epochs, lr=cfg.ner.lr, warmup_fraction=0.0, seed=cfg.seed)
    out = {}
    for init in ("prompt", "random"):
        model = ctx.student()
        if init == "prompt":
            m0 = prompts.init_output_from_prompts(model, tags, prompts.PromptMap.load(), vocab)
        else:
            m0 = prompts.init_output_random(len(tags), model.config.d, cfg.seed)
        model, m1, hist = prompts.train_ner(model, m0, tags, train, vocab, hp)
        out[init] = {"initial_loss": hist.initial_loss, "epoch_loss": hist.epoch_loss,
                     **prompts.evaluate_ner(model, m1, tags, test, vocab)}
    out["prompt_minus_random_f1"] = out["prompt"]["f1"] - out["random"]["f1"]
    return out


def stage_eval_sentiment(ctx: Context) -> dict:
    cfg, vocab = ctx.cfg, ctx.vocab()
    pairs = prompts.load_sentiment_prompts(cfg.sentiment.prompts)
    if cfg.sentiment.domain != "movie":
        pairs = [prompts.substitute_domain(p, "movie", cfg.sentiment.domain) for p in pairs]
    data = prompts.load_sentiment(ctx.data("sentiment"))
    return prompts.evaluate_sentiment(ctx.student(), data, pairs, vocab)


RUNNERS: dict[str, Callable[[Context], dict]] = {
    "synth": stage_synth, "teacher": stage_teacher, "relabel": stage_relabel, "distill": stage_distill,
    "eval-qa": stage_eval_qa, "eval-paraphrase": stage_eval_paraphrase, "eval-ner": stage_eval_ner,
    "eval-sentiment": stage_eval_sentiment,
}


# -- orchestration ------------------------------------------------------------------


def resolve(targets) -> list[str]:
    """Targets plus everything they depend on, in pipeline order."""
    need = set()

    def visit(s):
        if s not in DEPENDS:
            raise ConfigurationError(f"unknown stage {s!r}")
        if s not in need:
            need.add(s)
            for dep in DEPENDS[s]:
                visit(dep)

    for t in targets:
        visit(t)
    return [s for s in STAGES if s in need]


def _artifacts(stage_dir: Path) -> dict[str, str]:
    return {p.name: file_hash(p) for p in sorted(stage_dir.iterdir()) if p.is_file() and not p.name.endswith(".tmp")}


def stage_key(cfg: RunConfig, stage: str, manifest: dict) -> str:
    inputs = {dep: manifest[dep]["artifacts"] for dep in DEPENDS[stage]}
    return config_hash({"stage": stage, "config": stage_config(cfg, stage), "inputs": inputs})


def _cached(ctx: Context, stage: str, key: str, manifest: dict) -> bool:
    entry = manifest.get(stage)
    if entry is None or entry["key"] != key:
        return False
    d = ctx.dir(stage)
    for name, digest in entry["artifacts"].items():
        path = d / name
        if not path.is_file():
            return False
        if file_hash(path) != digest:
            raise StaleArtifactError(f"{stage}/{name} changed since it was produced (expected {digest[:12]})")
    return True


def run_pipeline(cfg: RunConfig, out, stages=STAGES) -> dict:
    """Run ``stages`` (plus their prerequisites), reusing cached results.

    Returns the metrics report.  A failing stage ends the run; the report then
    names it under ``failed_stage``.
    """
    out = Path(out)
    plan = resolve(stages)
    with run_lock(out):
        manifest_path = out / "manifest.json"
        manifest = _read_json(manifest_path) if manifest_path.is_file() else {}
        ctx = Context(cfg, out)
        metrics, timing, executed, cached = {}, {}, [], []
        failed = error = None
        for stage in plan:
            key = stage_key(cfg, stage, manifest)
            d = ctx.dir(stage)
            if _cached(ctx, stage, key, manifest):
                metrics[stage] = _read_json(d / "metrics.json")
                cached.append(stage)
                continue
            if d.exists():
                shutil.rmtree(d)
            d.mkdir(parents=True)
            manifest.pop(stage, None)
            t0 = time.perf_counter()
            log.info("stage %s: running", stage)
            try:
                result = RUNNERS[stage](ctx)
            except Exception as exc:  # recorded in the report, then the run stops
                failed = stage
                error = {"type": type(exc).__name__, "message": str(exc),
                         "validation": isinstance(exc, VALIDATION_ERRORS)}
                log.error("stage %s failed:\n%s", stage, traceback.format_exc())
                break
            _write_json(d / "metrics.json", result)
            manifest[stage] = {"key": key, "artifacts": _artifacts(d)}
            _write_json(manifest_path, manifest)
            metrics[stage] = result
            timing[stage] = time.perf_counter() - t0
            executed.append(stage)
        report = build_report(cfg, metrics, manifest, plan, failed, error,
                              {"stage_seconds": timing, "executed_stages": executed, "cached_stages": cached})
        _write_json(out / "report.json", report)
    return report


def build_report(cfg: RunConfig, metrics: dict, manifest: dict, plan, failed, error, runtime: dict) -> dict:
    h = cfg.hash()
    return {
        "run_id": h[:16],
        "config_hash": h,
        "config": cfg.to_dict(),
        "stages": list(plan),
        "status": "failed" if failed else "ok",
        "failed_stage": failed,
        "error": error,
        "metrics": metrics,
        "artifacts": {s: manifest[s]["artifacts"] for s in plan if s in manifest},
        RUNTIME_KEY: runtime,
    }


def report_body(report: dict) -> str:
    """Canonical text of a report without its wall-clock section."""
    body = {k: v for k, v in report.items() if k != RUNTIME_KEY}
    return json.dumps(body, indent=2, sort_keys=True)


def verify_report(report: dict, cfg: RunConfig | None = None) -> None:
    """Raise unless the embedded config hashes to the recorded hash (and matches ``cfg``)."""
    if config_hash(report.get("config")) != report.get("config_hash"):
        raise ReportVerificationError("report config does not match its config hash")
    if cfg is not None and cfg.hash() != report["config_hash"]:
        raise ReportVerificationError("report was produced by a different config")
