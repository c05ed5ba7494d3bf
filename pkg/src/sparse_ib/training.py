"""Training loop, Adam updates and dataset-level evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import objectives as O
from . import tensor as T
from .data import Document, Vocab, class_names, encode_docs, iterate_batches
from .metrics import (MetricsReport, corpus_iou_f1, corpus_token_f1, sparsity_stats,
                      task_metric, unit_to_token_mask)
from .model import ModelConfig, RationaleModel, infer_mask, sample_mask
from .objectives import ObjectiveConfig, ObjectiveError
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    patience: int = 10
    eval_batch_size: int = 256


class Adam:
    def __init__(self, params: Sequence[T.Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EpochLog:
    epoch: int
    total_loss: float
    task_loss: float
    info_loss: float
    val_task_metric: float
    val_iou_f1: float
    mean_sparsity: float
    phase: str = "joint"
    prior_pi: float = float("nan")

    HEADER = ("epoch", "phase", "total_loss", "task_loss", "info_loss", "val_task_metric",
              "val_iou_f1", "mean_sparsity", "prior_pi")

    def row(self) -> str:
        d = asdict(self)
        return "\t".join(str(d[k]) if k in ("epoch", "phase") else repr(float(d[k]))
                         for k in self.HEADER)


@dataclass
class TrainResult:
    model: RationaleModel
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def learned_pi(self) -> float | None:
        return self.model.prior_pi


def build_model(train_docs: Sequence[Document], model_cfg: dict | None, obj: ObjectiveConfig,
                seed: int, regression: bool = False) -> RationaleModel:
    """Model sized for the training split: train-built vocab, sorted class names."""
    vocab = Vocab.build(train_docs)
    classes = [] if regression else class_names(train_docs)
    cfg = ModelConfig(vocab_size=len(vocab), num_classes=max(2, len(classes)), regression=regression,
                      has_query=any(d.query is not None for d in train_docs),
                      learnable_pi=obj.learnable_pi, **(model_cfg or {}))
    return RationaleModel.init(cfg, seed, vocab, classes)


def supervised_ids(docs: Sequence[Document], fraction: float) -> set[str]:
    """Ids of the first ceil(fraction * N) documents with gold masks, in id order."""
    with_gold = sorted((d.id for d in docs if d.gold_mask is not None or d.gold_token_mask is not None))
    k = math.ceil(fraction * len(with_gold) - 1e-9) if fraction > 0 else 0
    return set(with_gold[:k])


def _mask_for_training(model: RationaleModel, logits, batch, obj: ObjectiveConfig, rng: Rng):
    if obj.kind == "full":
        return T.Tensor(batch.unit_valid)
    return sample_mask(logits, obj.tau, rng, obj.distribution, obj.noise, obj.stretch,
                       valid=batch.unit_valid)


def compute_loss(model: RationaleModel, batch, obj: ObjectiveConfig, rng: Rng) -> O.LossBreakdown:
    """One Monte Carlo mask sample per example, then the configured objective."""
    logits = model.explain(batch)
    mask = _mask_for_training(model, logits, batch, obj, rng)
    return _loss_given(model, batch, obj, logits, mask)


# -- evaluation ---------------------------------------------------------------

@dataclass
class Predictions:
    preds: np.ndarray
    labels: np.ndarray
    unit_masks: list[np.ndarray]
    logits: list[np.ndarray]


def predict_docs(model: RationaleModel, docs: Sequence[Document], pi: float,
                 full_context: bool = False, batch_size: int = 256) -> Predictions:
    """Deterministic inference with the top-k mask (or every unit when ``full_context``)."""
    preds, labels, masks, logits_out = [], [], [], []
    with T.no_tape():
        for b in iterate_batches(docs, batch_size, model.vocab, model.config.granularity,
                                 model.classes or None):
            logits = model.explain(b).data
            hard = b.unit_valid.copy() if full_context else infer_mask(logits, pi, b.unit_valid)
            out = model.predict(b, hard).data
            preds.append(out if model.config.regression else out.argmax(axis=-1))
            labels.append(b.labels)
            for i in range(b.size):
                n = int(b.n_units[i])
                masks.append(hard[i, :n])
                logits_out.append(logits[i, :n])
    return Predictions(np.concatenate(preds), np.concatenate(labels), masks, logits_out)


def rationale_scores(docs: Sequence[Document], unit_masks, granularity: str):
    """Corpus IOU F1 and token P/R/F1 over documents that carry gold."""
    from .data import doc_units

    pairs = []
    for doc, mask in zip(docs, unit_masks):
        gold = doc.token_gold()
        if gold is None:
            continue
        units, _ = doc_units(doc, granularity)
        pairs.append((unit_to_token_mask(mask, [len(u) for u in units]), gold))
    if not pairs:
        return float("nan"), (float("nan"),) * 3
    return corpus_iou_f1(pairs), corpus_token_f1(pairs)


def evaluate(model: RationaleModel, docs: Sequence[Document], obj: ObjectiveConfig,
             seed: int = 0, runs: int = 100, batch_size: int = 256) -> MetricsReport:
    pi = _inference_pi(model, obj)
    res = predict_docs(model, docs, pi, full_context=obj.kind == "full", batch_size=batch_size)
    kind = "regression" if model.config.regression else "classification"
    tm = task_metric(res.preds, res.labels, kind)
    iou, (tp, tr, tf) = rationale_scores(docs, res.unit_masks, model.config.granularity)
    s_mean, s_var = sparsity_stats(model, docs, runs, Rng(seed, "sparsity"), obj.tau,
                                   obj.distribution, obj.noise, obj.stretch, batch_size)
    return MetricsReport(task_metric=tm, iou_f1=iou, token_precision=tp, token_recall=tr,
                         token_f1=tf, sparsity_mean=s_mean, sparsity_var=s_var)


def _inference_pi(model: RationaleModel, obj: ObjectiveConfig) -> float:
    learned = model.prior_pi
    return obj.pi if learned is None else float(np.clip(learned, 0.01, 0.99))


def _validation(model, val_docs, obj, pi, full_context=False):
    res = predict_docs(model, val_docs, pi, full_context)
    kind = "regression" if model.config.regression else "classification"
    tm = task_metric(res.preds, res.labels, kind)
    iou, _ = rationale_scores(val_docs, res.unit_masks, model.config.granularity)
    return tm, iou


def _selection_score(model, tm, iou, by_task: bool) -> float:
    if by_task or math.isnan(iou):
        return -tm if model.config.regression else tm
    return iou


# -- training -----------------------------------------------------------------

def _run_epochs(model, params, train_docs, val_docs, obj, tcfg, rng, step_loss, phase,
                by_task=False, hide_gold=None) -> tuple[list[EpochLog], int]:
    opt = Adam(params, tcfg.lr)
    encoded = encode_docs(train_docs, model.vocab, model.config.granularity)
    best, best_state, best_epoch, waited = -np.inf, model.state(), 0, 0
    logs = []
    full = obj.kind == "full"
    for epoch in range(1, tcfg.epochs + 1):
        sums = np.zeros(3)
        count = 0
        spars = []
        for b in iterate_batches(train_docs, tcfg.batch_size, model.vocab, model.config.granularity,
                                 model.classes or None, rng.split(f"{phase}-shuffle-{epoch}"),
                                 hide_gold, encoded):
            opt.zero_grad()
            with T.Tape() as tape:
                lb, m = step_loss(b, rng.split(f"{phase}-noise-{epoch}-{count}"))
                tape.backward(lb.total)
            opt.step()
            sums += np.array([lb.total.item(), lb.task_term.item(), lb.info_term.item()]) * b.size
            count += b.size
            if m is not None:
                spars.append(((m > 0.5) * b.unit_valid).sum() / b.unit_valid.sum())
        tm, iou = _validation(model, val_docs, obj, _inference_pi(model, obj), full)
        mean = sums / max(count, 1)
        learned = model.prior_pi
        logs.append(EpochLog(epoch, *mean, tm, iou, float(np.mean(spars)) if spars else float("nan"),
                             phase, float("nan") if learned is None else learned))
        score = _selection_score(model, tm, iou, by_task or full)
        if score > best:
            best, best_state, best_epoch, waited = score, model.state(), epoch, 0
        else:
            waited += 1
            if waited >= tcfg.patience:
                break
    model.load_state(best_state)
    return logs, best_epoch


def train(train_docs: Sequence[Document], val_docs: Sequence[Document], model: RationaleModel,
          obj: ObjectiveConfig, seed: int, tcfg: TrainConfig | None = None) -> TrainResult:
    """Train ``model`` in place; the best validation epoch is restored at the end.

    Model selection uses validation IOU F1 when validation gold exists,
    otherwise the task metric.
    """
    obj.validate()
    tcfg = tcfg or TrainConfig()
    rng = Rng(seed, "train")
    has_any_gold = any(d.token_gold() is not None for d in train_docs)
    if obj.kind in ("semi", "pipeline") and not has_any_gold:
        raise ObjectiveError(f"objective {obj.kind!r} needs gold rationales in the training data")

    hide = None
    if obj.kind in ("semi", "pipeline"):
        keep = supervised_ids(train_docs, obj.supervision_fraction)
        hide = {d.id for d in train_docs} - keep

    if obj.kind == "pipeline":
        return _train_pipeline(train_docs, val_docs, model, obj, tcfg, rng, hide)

    def step(b, r):
        logits = model.explain(b)
        mask = _mask_for_training(model, logits, b, obj, r)
        return _loss_given(model, b, obj, logits, mask), mask.data

    logs, best = _run_epochs(model, model.parameters(), train_docs, val_docs, obj, tcfg, rng,
                             step, "joint", hide_gold=hide)
    for row in logs:
        log.debug(row.row())
    return TrainResult(model, logs, best)


def _loss_given(model, batch, obj, logits, mask) -> O.LossBreakdown:
    reg = model.config.regression
    pred = model.predict(batch, mask)
    v = batch.unit_valid
    y = batch.labels
    if obj.kind == "sib":
        if obj.learnable_pi:
            return O.loss_learnable_pi(pred, y, logits, obj, model.params["prior.pi_logit"],
                                       valid=v, regression=reg)
        return O.loss_sib(pred, y, logits, obj, valid=v, regression=reg)
    if obj.kind == "sl0":
        return O.loss_sl0(pred, y, mask, obj, valid=v, regression=reg, logits=logits)
    if obj.kind == "sl0c":
        return O.loss_sl0c(pred, y, mask, obj, valid=v, regression=reg, logits=logits)
    if obj.kind == "semi":
        return O.loss_semi(pred, y, logits, batch.gold, obj, valid=v, has_gold=batch.has_gold,
                           regression=reg)
    return O.loss_none(pred, y, regression=reg)


def _train_pipeline(train_docs, val_docs, model, obj, tcfg, rng, hide) -> TrainResult:
    """Explainer on gold masks first, then the predictor on its frozen top-k masks."""
    sup = [d for d in train_docs if d.id not in (hide or set())]

    def explainer_step(b, r):
        logits = model.explain(b)
        bce = O.rationale_supervision(logits, b.gold, O.ObjectiveConfig(semi_loss="full_bce"),
                                      b.unit_valid)
        zero = T.Tensor(np.zeros(b.size))
        lb = O.LossBreakdown(T.mean(bce), T.mean(zero), T.mean(bce), zero.data, bce.data.copy())
        return lb, None

    logs1, _ = _run_epochs(model, model.parameters("exp."), sup, val_docs, obj, tcfg, rng,
                           explainer_step, "explainer")

    def predictor_step(b, r):
        with T.no_tape():
            logits = model.explain(b).data
        hard = infer_mask(logits, obj.pi, b.unit_valid)
        pred = model.predict(b, hard)
        return O.loss_none(pred, b.labels, model.config.regression), hard

    logs2, best = _run_epochs(model, model.parameters("pred."), train_docs, val_docs, obj, tcfg, rng,
                              predictor_step, "predictor", by_task=True)
    return TrainResult(model, logs1 + logs2, best)
