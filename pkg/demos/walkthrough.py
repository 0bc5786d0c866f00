"""Push a small run through every stage, then question the distilled student.

    python demos/walkthrough.py --out /tmp/quip-demo

Uses a 2-layer encoder and a quarter of the corpus so the whole thing takes
about half a minute; drop the overrides below for the default desk-scale run.
"""

import argparse
from pathlib import Path

from quip import pipeline, student
from quip.config import from_dict
from quip.corpus import detokenize, load_dataset

SMALL = {
    "seed": 0,
    "encoder": {"n_layers": 2},
    "data": {"n_passages": 16},
    "teacher": {"epochs": 3, "n_gold_passages": 384},
    "distill": {"epochs": 4},
    "paraphrase": {"fine_tune_epochs": 2},
}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo-out")
    args = parser.parse_args()

    cfg = from_dict(SMALL)
    report = pipeline.run_pipeline(cfg, args.out)
    print(f"run {report['run_id']}: {report['status']}, executed {report['runtime']['executed_stages']}")
    d = report["metrics"]["distill"]
    print(f"distillation loss per epoch: {[round(x, 3) for x in d['epoch_loss']]}; "
          f"{d['passage_encodes']} passage encodes for {d['batches_per_epoch']} batches per epoch")

    ctx = pipeline.Context(cfg, Path(args.out))
    vocab, model = ctx.vocab(), ctx.student()
    passage, records = load_dataset(ctx.data("gold_dev"), vocab)[0]
    print("\npassage:", " ".join(passage.words))
    for r in records[:4]:
        _, answer = student.answer_question(model, passage.tokens, r.question, vocab)
        print(f"  Q: {detokenize(r.question.ids, vocab)}")
        print(f"     gold {r.answers or ['<none>']}  predicted {answer or '<unanswerable>'}")

    # run again: nothing changed, so every stage is served from the cache
    again = pipeline.run_pipeline(cfg, args.out)
    print(f"\nsecond run executed {again['runtime']['executed_stages']} "
          f"(cached {len(again['runtime']['cached_stages'])} stages)")


if __name__ == "__main__":
    main()
