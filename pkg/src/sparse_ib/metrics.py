"""Task metrics, rationale agreement, sparsity statistics and the IB-bound check."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Document, iterate_batches
from .rng import Rng


@dataclass
class MetricsReport:
    task_metric: float
    iou_f1: float
    token_precision: float
    token_recall: float
    token_f1: float
    sparsity_mean: float
    sparsity_var: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- rationale agreement ------------------------------------------------------

def spans(mask: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal runs of ones as half-open ``(start, end)`` ranges."""
    out, start = [], None
    for i, v in enumerate(mask):
        if v and start is None:
            start = i
        elif not v and start is not None:
            out.append((start, i))
            start = None
    if start is not None:
        out.append((start, len(mask)))
    return out


def _iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _check_lengths(pred, gold) -> None:
    if len(pred) != len(gold):
        raise ValueError(f"mask lengths differ: {len(pred)} vs {len(gold)}")


def iou_counts(pred_mask, gold_mask, threshold: float = 0.1) -> tuple[int, int, int, int]:
    """(matched predicted spans, predicted spans, matched gold spans, gold spans)."""
    _check_lengths(pred_mask, gold_mask)
    ps, gs = spans(pred_mask), spans(gold_mask)
    mp = sum(any(_iou(p, g) >= threshold for g in gs) for p in ps)
    mg = sum(any(_iou(p, g) >= threshold for p in ps) for g in gs)
    return mp, len(ps), mg, len(gs)


def _f1_from_counts(mp, np_, mg, ng) -> float:
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    return _f1(mp / np_, mg / ng)


def iou_f1(pred_mask, gold_mask, threshold: float = 0.1) -> float:
    """Span-level F1 where a span matches if its token IOU with some other-side span >= threshold."""
    return _f1_from_counts(*iou_counts(pred_mask, gold_mask, threshold))


def corpus_iou_f1(pairs, threshold: float = 0.1) -> float:
    """Micro-averaged IOU F1 over (pred, gold) token-mask pairs."""
    tot = np.zeros(4, dtype=np.int64)
    for pred, gold in pairs:
        tot += iou_counts(pred, gold, threshold)
    return _f1_from_counts(*tot)


def token_f1(pred_mask, gold_mask) -> tuple[float, float, float]:
    _check_lengths(pred_mask, gold_mask)
    return corpus_token_f1([(pred_mask, gold_mask)])


def corpus_token_f1(pairs) -> tuple[float, float, float]:
    """Micro-averaged token precision, recall and F1."""
    tp = npred = ngold = 0
    for pred, gold in pairs:
        _check_lengths(pred, gold)
        p = np.asarray(pred, dtype=bool)
        g = np.asarray(gold, dtype=bool)
        tp += int(np.sum(p & g))
        npred += int(p.sum())
        ngold += int(g.sum())
    if npred == 0 and ngold == 0:
        return 1.0, 1.0, 1.0
    prec = tp / npred if npred else 0.0
    rec = tp / ngold if ngold else 0.0
    return prec, rec, _f1(prec, rec)


# -- task metrics -------------------------------------------------------------

def weighted_f1(preds, labels) -> float:
    """Per-class F1 averaged with weights proportional to class support."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        total += f1 * np.sum(labels == c)
    return float(total / len(labels))


def mse(preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return float(np.mean((preds - labels) ** 2))


def task_metric(preds, labels, kind: str = "classification") -> float:
    if kind == "classification":
        return weighted_f1(preds, labels)
    if kind == "regression":
        return mse(preds, labels)
    raise ValueError(f"unknown task kind {kind!r}")


# -- sparsity -----------------------------------------------------------------

def sparsity_from_logits(logits: np.ndarray, valid: np.ndarray, runs: int, rng: Rng,
                         tau: float = 0.7, distribution: str = "concrete",
                         noise: str = "logistic", stretch=None) -> tuple[float, float]:
    """Mean proportion and count variance of ``m* > 0.5`` over sampled training masks."""
    from .model import sample_mask
    from .distributions import StretchParams

    stretch = stretch or StretchParams()
    logits = np.atleast_2d(logits)
    valid = np.atleast_2d(valid)
    n = valid.sum(axis=1)
    props, counts = [], []
    for _ in range(runs):
        m = sample_mask(logits, tau, rng, distribution, noise, stretch).data
        c = ((m > 0.5) & (valid > 0)).sum(axis=1)
        counts.append(c)
        props.append(c / np.maximum(n, 1))
    counts = np.concatenate(counts).astype(np.float64)
    props = np.concatenate(props)
    return float(props.mean()), float(counts.var())


def sparsity_stats(model, docs: Sequence[Document], runs: int = 100, rng: Rng | None = None,
                   tau: float = 0.7, distribution: str = "concrete", noise: str = "logistic",
                   stretch=None, batch_size: int = 256) -> tuple[float, float]:
    from . import tensor as T

    rng = rng or Rng(0, "sparsity")
    all_logits, all_valid = [], []
    with T.no_tape():
        for b in iterate_batches(docs, batch_size, model.vocab, model.config.granularity,
                                 model.classes or None):
            all_logits.append(model.explain(b).data)
            all_valid.append(b.unit_valid)
    U = max(x.shape[1] for x in all_logits)
    logits = np.concatenate([np.pad(x, ((0, 0), (0, U - x.shape[1]))) for x in all_logits])
    valid = np.concatenate([np.pad(x, ((0, 0), (0, U - x.shape[1]))) for x in all_valid])
    return sparsity_from_logits(logits, valid, runs, rng, tau, distribution, noise, stretch)


def unit_to_token_mask(unit_mask: Sequence[float], unit_lengths: Sequence[int]) -> list[int]:
    return [int(m > 0.5) for m, length in zip(unit_mask, unit_lengths) for _ in range(length)]


# -- information bottleneck check ---------------------------------------------

@dataclass
class ToyJoint:
    """Finite input distribution with one mask variable per symbol.

    ``p_x`` are input probabilities, ``theta`` the inclusion probability
    p(m = 1 | x) and ``prior_pi`` the prior r(m = 1).  ``symbols`` name the
    inputs; the masked variable z = m * x takes values in {0} and the symbols.
    """
    p_x: Sequence[float]
    theta: Sequence[float]
    prior_pi: float
    symbols: Sequence[int] | None = None

    def validate(self) -> None:
        p = np.asarray(self.p_x, dtype=np.float64)
        th = np.asarray(self.theta, dtype=np.float64)
        if p.ndim != 1 or p.size == 0 or p.size > 16:
            raise ValueError("p_x must have between 1 and 16 entries")
        if th.shape != p.shape:
            raise ValueError("theta must have one entry per symbol")
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("p_x must be positive and sum to 1")
        if np.any(th <= 0) or np.any(th >= 1) or not 0 < self.prior_pi < 1:
            raise ValueError("theta and prior_pi must lie in (0, 1)")
        syms = list(range(1, p.size + 1)) if self.symbols is None else list(self.symbols)
        if len(syms) != p.size:
            raise ValueError("need one symbol per input")
        if 0 in syms or len(set(syms)) != len(syms):
            raise ValueError("symbols must be distinct and non-zero so z = m*x is unambiguous")

    @classmethod
    def random(cls, rng: Rng, max_symbols: int = 16) -> "ToyJoint":
        k = 1 + rng.integers(max_symbols)
        w = rng.uniform(k) + 0.05
        p = w / w.sum()
        p = p / p.sum()
        theta = 0.02 + 0.96 * rng.uniform(k)
        return cls(list(p), list(theta), 0.02 + 0.96 * rng.uniform())


@dataclass
class IBReport:
    mi: float
    bound: float
    decomposition_residual: float

    def to_dict(self) -> dict:
        return asdict(self)


def ib_verify(joint: ToyJoint) -> IBReport:
    """Exact I(Z;X) and E_x KL(p(z|x) || r(z)) by enumerating the joint.

    The prior on z is induced by m ~ Bernoulli(prior_pi) and x ~ p_x.  The
    residual is the largest per-symbol gap between the enumerated
    KL(p(z|x) || r(z)) and KL_bern(theta, pi) - theta * log p(x).
    """
    joint.validate()
    p = np.asarray(joint.p_x, dtype=np.float64)
    th = np.asarray(joint.theta, dtype=np.float64)
    pi = joint.prior_pi
    syms = list(range(1, p.size + 1)) if joint.symbols is None else list(joint.symbols)
    z_values = [0] + syms
    zi = {z: i for i, z in enumerate(z_values)}
    K, Z = p.size, len(z_values)

    cond = np.zeros((K, Z))  # p(z | x)
    prior = np.zeros(Z)      # r(z)
    for k, x in enumerate(syms):
        for m, pm_post, pm_prior in ((0, 1 - th[k], 1 - pi), (1, th[k], pi)):
            z = m * x
            cond[k, zi[z]] += pm_post
            prior[zi[z]] += p[k] * pm_prior
    joint_xz = p[:, None] * cond
    pz = joint_xz.sum(axis=0)

    mi = 0.0
    kl_per_x = np.zeros(K)
    for k in range(K):
        for j in range(Z):
            if cond[k, j] > 0:
                mi += joint_xz[k, j] * math.log(cond[k, j] / pz[j])
                kl_per_x[k] += cond[k, j] * math.log(cond[k, j] / prior[j])
    bound = float(np.dot(p, kl_per_x))

    kl_m = th * np.log(th / pi) + (1 - th) * np.log((1 - th) / (1 - pi))
    closed = kl_m - th * np.log(p)
    residual = float(np.max(np.abs(kl_per_x - closed)))
    return IBReport(mi=float(mi), bound=bound, decomposition_residual=residual)
