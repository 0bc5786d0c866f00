"""Zero-shot sentiment with question prompts, showing calibration and rationales.

    python demos/sentiment_rationales.py --out demo-out

Expects a finished run in ``--out`` (e.g. from walkthrough.py with the same
config).  Each sentence is scored against "why is it good ?" and "why is it
bad ?"; the content-free calibration offsets are subtracted before comparing.
"""

import argparse
from pathlib import Path

from quip import pipeline, prompts
from quip.config import from_dict
from quip.corpus import tokenize

from walkthrough import SMALL

SENTENCES = [
    "the movie was charming and brilliant .",
    "the plot was tedious and boring .",
    "it was good .",
]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo-out")
    args = parser.parse_args()

    ctx = pipeline.Context(from_dict(SMALL), Path(args.out))
    vocab, model = ctx.vocab(), ctx.student()
    prompt = prompts.load_sentiment_prompts()[0]
    calib = prompts.compute_calibration(model, prompt, vocab)
    print(f"calibration offsets: C0={calib.c0:.3f}  C1={calib.c1:.3f}")

    for text in SENTENCES:
        x = tokenize(text, vocab)
        label, margin = prompts.predict_sentiment(model, x, prompt, calib, vocab)
        q = tokenize(list(prompt.question(label)), vocab)
        span, why = prompts.extract_rationale(model, x, q, vocab)
        print(f"{text!r}: {'positive' if label else 'negative'} (margin {margin:+.3f}), rationale {why!r}")


if __name__ == "__main__":
    main()
