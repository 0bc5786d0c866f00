"""Command-line entry point: ``quip <command> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import GENERATORS, LABEL_SOURCES, LOSSES, load_config
from .gradcheck import BOUND, run_grad_checks

EXIT_OK, EXIT_FAILURE, EXIT_VALIDATION = 0, 1, 2

COMMANDS = {
    "synth-data": ("synth",),
    "train-teacher": ("teacher",),
    "relabel": ("relabel",),
    "distill": ("distill",),
    "eval-qa": ("eval-qa",),
    "eval-paraphrase": ("eval-paraphrase",),
    "eval-ner": ("eval-ner",),
    "eval-sentiment": ("eval-sentiment",),
    "run-all": pipeline.STAGES,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", default="out", help="artifact directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log stage progress")

    parser = argparse.ArgumentParser(prog="quip", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"run the pipeline through {name}")
        if name in ("synth-data", "run-all"):
            p.add_argument("--generator", choices=GENERATORS, help="question generator")
        if name in ("distill", "run-all"):
            p.add_argument("--labels", choices=LABEL_SOURCES, help="distillation label source")
            p.add_argument("--loss", choices=LOSSES, help="soft (full top-k) or hard (argmax) targets")
        if name in ("eval-sentiment", "run-all"):
            p.add_argument("--prompts", metavar="FILE", help="JSON list of sentiment prompt pairs")
    g = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every training loss")
    g.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "generator", None):
        out["generator"] = {"kind": args.generator}
    distill = {k: getattr(args, k) for k in ("labels", "loss") if getattr(args, k, None)}
    if distill:
        out["distill"] = distill
    if getattr(args, "prompts", None):
        out["sentiment"] = {"prompts": args.prompts}
    return out


def _print_summary(report: dict) -> None:
    m = report["metrics"]
    print(f"run {report['run_id']}  status={report['status']}")
    for stage in report["stages"]:
        if stage not in m:
            continue
        r = m[stage]
        if stage == "distill":
            losses = ", ".join(f"{x:.4f}" for x in r["epoch_loss"])
            print(f"distill: epoch loss [{losses}]  argmax agreement {r['argmax_start_agreement']:.3f}")
        elif stage == "eval-qa":
            for who in ("student", "teacher"):
                print(f"eval-qa {who}: EM {r[who]['exact_match']:.3f}  F1 {r[who]['f1']:.3f}")
        elif stage == "eval-paraphrase":
            print(f"eval-paraphrase: zero-shot AUROC {r['zero_shot']['test_auroc']:.3f} "
                  f"(layer {r['zero_shot']['selected_layer']})  logreg F1 {r['few_shot_logreg']['test_f1']:.3f}  "
                  f"fine-tune F1 {r['fine_tune']['test_f1']:.3f}")
        elif stage == "eval-ner":
            print(f"eval-ner: prompt-init F1 {r['prompt']['f1']:.3f}  random-init F1 {r['random']['f1']:.3f}")
        elif stage == "eval-sentiment":
            print(f"eval-sentiment: mean accuracy {r['mean_accuracy']:.3f}")
            for p in r["per_prompt"]:
                print(f"  prompt {p['prompt'] + 1}: {p['accuracy']:.3f}  ({p['positive']} / {p['negative']})")
    if report["failed_stage"]:
        print(f"failed at {report['failed_stage']}: {report['error']['type']}: {report['error']['message']}",
              file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "grad-check":
        ok = True
        for r in run_grad_checks(tuple(args.seeds)):
            ok &= r.passed
            print(f"{'PASS' if r.passed else 'FAIL'} {r.loss:<13} seed={r.seed} "
                  f"max_rel_err={r.report.max_relative_error:.2e} ({r.report.worst_parameter})")
        print(f"bound {BOUND:g}: {'all passed' if ok else 'FAILED'}")
        return EXIT_OK if ok else EXIT_FAILURE
    try:
        cfg = load_config(args.config, args.seed)
        overrides = _overrides(args)
        if overrides:
            cfg = cfg.replace(**overrides)
        report = pipeline.run_pipeline(cfg, args.out, COMMANDS[args.command])
    except pipeline.VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (pipeline.StaleArtifactError, pipeline.LockedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    _print_summary(report)
    if report["status"] == "ok":
        return EXIT_OK
    return EXIT_VALIDATION if report["error"]["validation"] else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
