"""Greedy-matching BERTScore, layer selection and few-shot paraphrase classification."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import encoder as enc
from .corpus import TokenSequence, Vocabulary, tokenize
from .numerics import Adam, DegenerateInputError, InvalidArgumentError, Tensor, parameter, sigmoid, stack
from .student import StudentModel
from .training import TrainConfig

log = logging.getLogger(__name__)

N_FEATURES = 8
OUTPUT_LR_FACTOR = 1e3


@dataclass
class PairExample:
    s1: list[str]
    s2: list[str]
    label: int | None = None
    judgment: float | None = None


def load_pairs(path) -> list[PairExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if not (isinstance(obj.get("s1"), list) and isinstance(obj.get("s2"), list)):
                raise InvalidArgumentError(f"line {lineno}: s1 and s2 must be token lists")
            out.append(PairExample(obj["s1"], obj["s2"], obj.get("label"), obj.get("judgment")))
    return out


def _content_rows(reps: np.ndarray) -> np.ndarray:
    rows = np.asarray(reps, dtype=np.float64)[1:]
    if rows.shape[0] == 0:
        raise InvalidArgumentError("need at least one token besides [BOS]")
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero token vector in greedy matching")
    return rows / norms[:, None]


def greedy_match(x1: np.ndarray, x2: np.ndarray) -> float:
    """Mean over x1's tokens of the best cosine match in x2 ([BOS] rows excluded)."""
    a, b = _content_rows(x1), _content_rows(x2)
    return float(np.clip(a @ b.T, -1.0, 1.0).max(axis=1).mean())


def f_bert_reps(x1: np.ndarray, x2: np.ndarray) -> float:
    """Harmonic mean of both matching directions; 0 when their sum is not positive.

    Directions of opposite sign can push the raw value outside [-1, 1], so it is clipped.
    """
    b12, b21 = greedy_match(x1, x2), greedy_match(x2, x1)
    if b12 + b21 <= 0:
        return 0.0
    return float(np.clip(2 * b12 * b21 / (b12 + b21), -1.0, 1.0))


def f_bert(r1: enc.LayerRepresentations, r2: enc.LayerRepresentations, layer: int) -> float:
    if not -len(r1) <= layer < len(r1):
        raise InvalidArgumentError(f"layer {layer} out of range for {len(r1)} layers")
    return f_bert_reps(r1[layer], r2[layer])


def feature_layers(n_layers: int) -> list[int]:
    """The last min(8, n_layers + 1) layer indices, shallow to deep."""
    total = n_layers + 1
    return list(range(max(0, total - N_FEATURES), total))


def _encode_pairs(model: StudentModel, pairs: Sequence[PairExample], vocab: Vocabulary):
    seqs = [tokenize(w, vocab) for p in pairs for w in (p.s1, p.s2)]
    reps = enc.encode_many(model.params, model.config, seqs)
    return [(reps[2 * i], reps[2 * i + 1]) for i in range(len(pairs))]


def layer_scores(model: StudentModel, pairs: Sequence[PairExample], vocab: Vocabulary) -> np.ndarray:
    """F_BERT for every pair at every layer, shape (n_pairs, n_layers + 1)."""
    encoded = _encode_pairs(model, pairs, vocab)
    return np.array([[f_bert(r1, r2, l) for l in range(len(r1))] for r1, r2 in encoded])


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise InvalidArgumentError("pearson needs two equal-length vectors of at least 2 values")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("pearson correlation of a constant vector")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("auroc needs both classes")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class LayerSelection:
    layer: int
    correlations: list[float]


def select_layer_from_scores(scores: np.ndarray, judgments: Sequence[float]) -> LayerSelection:
    judgments = np.asarray(judgments, dtype=np.float64)
    if judgments.size < 3:
        raise InvalidArgumentError("layer selection needs at least 3 judged pairs")
    if np.ptp(judgments) == 0.0:
        raise DegenerateInputError("judgments have zero variance")
    corr = []
    for l in range(scores.shape[1]):
        col = scores[:, l]
        corr.append(pearson(col, judgments) if np.ptp(col) > 0 else float("-inf"))
    best = max(range(len(corr)), key=lambda l: (corr[l], l))  # ties -> deeper layer
    return LayerSelection(best, corr)


def select_layer(model: StudentModel, pairs: Sequence[PairExample], vocab: Vocabulary) -> LayerSelection:
    """Layer whose F_BERT correlates best (Pearson) with the pairs' judgments."""
    judgments = [p.judgment for p in pairs]
    if len(pairs) < 3:
        raise InvalidArgumentError("layer selection needs at least 3 judged pairs")
    if any(j is None for j in judgments):
        raise InvalidArgumentError("every pair needs a judgment")
    if np.ptp(judgments) == 0.0:
        raise DegenerateInputError("judgments have zero variance")
    return select_layer_from_scores(layer_scores(model, pairs, vocab), judgments)


def extract_features(model: StudentModel, pairs: Sequence[PairExample], vocab: Vocabulary) -> np.ndarray:
    """F_BERT at the final eight (or all, if fewer) layers, shallow to deep."""
    layers = feature_layers(model.config.n_layers)
    encoded = _encode_pairs(model, pairs, vocab)
    return np.array([[f_bert(r1, r2, l) for l in layers] for r1, r2 in encoded])


# -- logistic regression ----------------------------------------------------------------


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    l2_lambda: float

    def decision(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.decision(x))

    def predict(self, x, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(x) >= threshold).astype(int)


def logreg_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2_lambda: float) -> float:
    """Summed logistic loss plus (lambda/2)||w||^2; the bias is not penalized."""
    z = x @ w + b
    return float(np.logaddexp(0.0, -np.where(y == 1, z, -z)).sum() + 0.5 * l2_lambda * (w @ w))


def train_logreg(x, y, l2_lambda: float = 1.0, tol: float = 1e-8, max_iter: int = 200) -> LogRegModel:
    """Damped Newton's method until the gradient norm drops below ``tol``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if set(np.unique(y)) - {0, 1}:
        raise InvalidArgumentError("labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise InvalidArgumentError("logistic regression needs examples of both classes")
    if l2_lambda <= 0:
        raise InvalidArgumentError("l2_lambda must be positive")
    n, k = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    theta = np.zeros(k + 1)
    reg = np.full(k + 1, l2_lambda)
    reg[-1] = 0.0

    def objective(t):
        return logreg_objective(t[:-1], t[-1], x, y, l2_lambda)

    for _ in range(max_iter):
        p = sigmoid(xb @ theta)
        grad = xb.T @ (p - y) + reg * theta
        if np.linalg.norm(grad) < tol:
            break
        hess = (xb * (p * (1 - p))[:, None]).T @ xb + np.diag(reg)
        step = np.linalg.solve(hess + 1e-12 * np.eye(k + 1), grad)
        f0, t = objective(theta), 1.0
        while objective(theta - t * step) > f0 - 1e-4 * t * (grad @ step) and t > 1e-10:
            t *= 0.5
        theta = theta - t * step
    return LogRegModel(theta[:-1].copy(), float(theta[-1]), l2_lambda)


def f1_positive(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    tp = int(((pred == 1) & (gold == 1)).sum())
    fp = int(((pred == 1) & (gold == 0)).sum())
    fn = int(((pred == 0) & (gold == 1)).sum())
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


# -- fine-tuning through the encoder ----------------------------------------------------------


def _cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    an = a / (a * a).sum(axis=-1, keepdims=True).sqrt()
    bn = b / (b * b).sum(axis=-1, keepdims=True).sqrt()
    return an @ bn.T


def _pair_features(model: StudentModel, pair: tuple[TokenSequence, TokenSequence], layers: Sequence[int],
                   train: bool, rng) -> Tensor:
    ids, lengths = enc.pad_batch(list(pair))
    out = enc.forward(model.params, model.config, ids, lengths, train=train, rng=rng)
    n1, n2 = int(lengths[0]), int(lengths[1])
    feats = []
    for l in layers:
        sim = _cosine_matrix(out[l][0, 1:n1], out[l][1, 1:n2])
        b12, b21 = sim.max(axis=1).mean(), sim.max(axis=0).mean()
        feats.append(b12 * b21 * 2.0 / (b12 + b21))
    return stack(feats)


@dataclass
class FineTuneHistory:
    epoch_loss: list[float] = field(default_factory=list)
    lr_ratio: float = OUTPUT_LR_FACTOR


@dataclass
class ParaphraseClassifier:
    model: StudentModel
    head: dict[str, Tensor]
    layers: list[int]
    disable_dropout: bool = True

    def logits(self, pairs: Sequence[tuple[TokenSequence, TokenSequence]], train: bool = False,
               rng=None) -> Tensor:
        # dropout lowers every cosine similarity, so it stays off even while training
        use_dropout = train and not self.disable_dropout
        feats = stack([_pair_features(self.model, p, self.layers, use_dropout, rng) for p in pairs])
        return feats @ self.head["w"] + self.head["b"]

    def loss(self, pairs, labels, train: bool = False, rng=None) -> Tensor:
        z = self.logits(pairs, train, rng)
        y = np.asarray(labels, dtype=np.float64)
        # -log sigmoid(s z) with s = +1 for positives, -1 for negatives
        signed = z * (2 * y - 1)
        return -(signed.sigmoid().log()).mean()

    def predict_proba(self, pairs) -> np.ndarray:
        return sigmoid(self.logits(pairs).data)


def fine_tune_paraphrase(model: StudentModel, pairs: Sequence[PairExample], vocab: Vocabulary,
                         hp: TrainConfig = TrainConfig(epochs=20, lr=1e-5, warmup_fraction=0.0),
                         output_lr_factor: float = OUTPUT_LR_FACTOR, batch_size: int = 8
                         ) -> tuple[ParaphraseClassifier, FineTuneHistory]:
    """Backpropagate the logistic loss through the encoder (dropout off).

    The output layer learns ``output_lr_factor`` times faster than the encoder.
    """
    labels = [p.label for p in pairs]
    if any(l not in (0, 1) for l in labels) or len(set(labels)) < 2:
        raise InvalidArgumentError("fine-tuning needs 0/1 labels from both classes")
    encoded = [(tokenize(p.s1, vocab), tokenize(p.s2, vocab)) for p in pairs]
    layers = feature_layers(model.config.n_layers)
    head = {"w": parameter(np.zeros(len(layers))), "b": parameter(0.0)}
    clf = ParaphraseClassifier(model, head, layers)
    opt = Adam({"encoder": model.encoder_params(), "output": list(head.values())},
               {"encoder": hp.lr, "output": hp.lr * output_lr_factor}, clip_norm=hp.clip_norm)
    rng = np.random.default_rng(hp.seed)
    history = FineTuneHistory(lr_ratio=opt.lrs["output"] / opt.lrs["encoder"])
    n_batches = -(-len(pairs) // batch_size)
    total = hp.epochs * n_batches
    step = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(len(pairs))
        weighted = 0.0
        for lo in range(0, len(order), batch_size):
            idx = order[lo: lo + batch_size]
            opt.zero_grad()
            loss = clf.loss([encoded[i] for i in idx], [labels[i] for i in idx], train=True, rng=rng)
            loss.backward()
            opt.step(hp.lr_scale(step, total))
            step += 1
            weighted += loss.item() * len(idx)
        history.epoch_loss.append(weighted / len(pairs))
    return clf, history
