"""Training objectives for rationale extraction.

Every loss returns a :class:`LossBreakdown` whose ``info_term`` already
includes its weight (beta, lambda or gamma), so ``total = task + info``.
Unit-level terms only run over valid units: padding and the query never
enter a KL sum, a norm or a supervised rationale loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import distributions as D
from . import tensor as T
from .tensor import Tensor

KINDS = ("sib", "sl0", "sl0c", "semi", "none", "pipeline", "full")
SEMI_LOSSES = ("full_bce", "paper_positive_only")
DEFAULT_PI_GRID = tuple(round(0.05 * i, 2) for i in range(1, 11))
# plain SL0 collapses to empty masks at larger weights; SL0-C only acts above the budget
DEFAULT_LAM = {"sl0": 0.01, "sl0c": 1.0}


class ObjectiveError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    kind: str = "sib"
    pi: float = 0.2
    beta: float = 1.0
    lam: float | None = None
    gamma: float = 1.0
    tau: float = 0.7
    distribution: str = "concrete"
    noise: str = "logistic"
    l0: float = -0.1
    l1: float = 1.1
    entropy_lambda: float = 0.0
    learnable_pi: bool = False
    semi_loss: str = "full_bce"
    supervision_fraction: float = 1.0

    def validate(self) -> "ObjectiveConfig":
        if self.kind not in KINDS:
            raise ObjectiveError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        if not 0.0 < self.pi < 1.0:
            raise ObjectiveError(f"pi must be in (0, 1), got {self.pi}")
        for name in ("beta", "lam", "gamma", "entropy_lambda"):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise ObjectiveError(f"{name} must be >= 0")
        if not self.tau > 0:
            raise ObjectiveError("tau must be positive")
        if self.distribution not in ("concrete", "hard_concrete", "kuma", "hard_kuma"):
            raise ObjectiveError(f"unknown distribution {self.distribution!r}")
        if self.noise not in D.NOISE_KINDS:
            raise ObjectiveError(f"unknown noise {self.noise!r}")
        if self.semi_loss not in SEMI_LOSSES:
            raise ObjectiveError(f"unknown semi_loss {self.semi_loss!r}")
        if not 0.0 <= self.supervision_fraction <= 1.0:
            raise ObjectiveError("supervision_fraction must be in [0, 1]")
        if self.learnable_pi and self.kind != "sib":
            raise ObjectiveError("learnable_pi only applies to kind=sib")
        D.StretchParams(self.l0, self.l1)
        return self

    @property
    def norm_weight(self) -> float:
        """lam, or the per-kind default when unset."""
        return self.lam if self.lam is not None else DEFAULT_LAM.get(self.kind, 1.0)

    @property
    def stretch(self) -> D.StretchParams:
        return D.StretchParams(self.l0, self.l1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LossBreakdown:
    total: Tensor
    task_term: Tensor
    info_term: Tensor
    per_example_task: np.ndarray
    per_example_info: np.ndarray

    def floats(self) -> dict[str, float]:
        return {"total": self.total.item(), "task": self.task_term.item(), "info": self.info_term.item()}


def _valid(logits_or_mask: Tensor, valid) -> np.ndarray:
    if valid is None:
        return np.ones(logits_or_mask.shape)
    return np.asarray(valid, dtype=np.float64)


def task_loss(pred: Tensor, y, regression: bool = False) -> Tensor:
    """Per-example cross-entropy on log-probabilities, or squared error."""
    y = np.asarray(y)
    if regression:
        diff = T.sub(pred, y.astype(np.float64))
        return T.mul(diff, diff)
    onehot = np.zeros(pred.shape)
    onehot[np.arange(len(y)), y.astype(np.int64)] = 1.0
    return T.scalar_mul(T.sum(T.mul(pred, onehot), axis=-1), -1.0)


def _assemble(task_pe: Tensor, info_pe: Tensor | None) -> LossBreakdown:
    task = T.mean(task_pe)
    if info_pe is None:
        info_pe = Tensor(np.zeros(task_pe.shape))
    info = T.mean(info_pe)
    return LossBreakdown(T.add(task, info), task, info, task_pe.data.copy(), info_pe.data.copy())


def kl_sum(logits, pi, valid=None) -> Tensor:
    """Per-example sum over valid units of KL(Bernoulli(sigmoid(logit)) || Bernoulli(pi))."""
    logits = T.as_tensor(logits)
    theta = T.sigmoid(T.clamp(logits, -D.LOGIT_LIMIT, D.LOGIT_LIMIT))
    kl = D.kl_bernoulli(theta, pi if isinstance(pi, Tensor) else Tensor(pi))
    return T.sum(T.mul(kl, _valid(logits, valid)), axis=-1)


def normalized_norm(mask, valid=None) -> Tensor:
    """Per-example (1/n) * sum of mask values over valid units."""
    mask = T.as_tensor(mask)
    v = _valid(mask, valid)
    n = np.maximum(v.sum(axis=-1), 1.0)
    return T.mul(T.sum(T.mul(mask, v), axis=-1), 1.0 / n)


def _l0_norm(mask, cfg: ObjectiveConfig, valid, logits) -> Tensor:
    if cfg.distribution == "hard_concrete":
        if logits is None:
            raise ObjectiveError("hard_concrete norm needs the gate logits")
        gates = D.expected_l0_hard_concrete(T.as_tensor(logits), cfg.tau, cfg.stretch)
        return normalized_norm(gates, valid)
    return normalized_norm(mask, valid)


def loss_sib(pred, y, logits, cfg: ObjectiveConfig, valid=None, regression: bool = False,
             pi: Tensor | float | None = None) -> LossBreakdown:
    """Task loss plus beta * sum_j KL(p(m_j|x) || Bernoulli(pi))."""
    prior = cfg.pi if pi is None else pi
    if not isinstance(prior, Tensor) and not 0.0 < prior < 1.0:
        raise ObjectiveError(f"pi must be in (0, 1), got {prior}")
    info = T.scalar_mul(kl_sum(logits, prior, valid), cfg.beta)
    return _assemble(task_loss(pred, y, regression), info)


def loss_sl0(pred, y, mask, cfg: ObjectiveConfig, valid=None, regression: bool = False,
             logits=None) -> LossBreakdown:
    info = T.scalar_mul(_l0_norm(mask, cfg, valid, logits), cfg.norm_weight)
    return _assemble(task_loss(pred, y, regression), info)


def loss_sl0c(pred, y, mask, cfg: ObjectiveConfig, valid=None, regression: bool = False,
              logits=None) -> LossBreakdown:
    """Norm penalty only above the budget: lambda * max(0, norm - pi)."""
    excess = T.clamp(T.sub(_l0_norm(mask, cfg, valid, logits), cfg.pi), 0.0, np.inf)
    return _assemble(task_loss(pred, y, regression), T.scalar_mul(excess, cfg.norm_weight))


def rationale_supervision(logits, gold, cfg: ObjectiveConfig, valid=None) -> Tensor:
    """Per-example supervised rationale loss (full BCE, or the positive-only term)."""
    logits = T.as_tensor(logits)
    gold = np.asarray(gold, dtype=np.float64)
    v = _valid(logits, valid)
    theta = T.sigmoid(T.clamp(logits, -D.LOGIT_LIMIT, D.LOGIT_LIMIT))
    nll = T.mul(T.log(theta), gold)
    if cfg.semi_loss == "full_bce":
        nll = T.add(nll, T.mul(T.log(T.sub(1.0, theta)), 1.0 - gold))
    return T.scalar_mul(T.sum(T.mul(nll, v), axis=-1), -1.0)


def loss_semi(pred, y, logits, gold_mask, cfg: ObjectiveConfig, valid=None,
              has_gold=None, regression: bool = False) -> LossBreakdown:
    """Task loss plus gamma * rationale supervision on examples that have gold."""
    logits = T.as_tensor(logits)
    sup = rationale_supervision(logits, gold_mask, cfg, valid)
    has = np.ones(logits.shape[0]) if has_gold is None else np.asarray(has_gold, dtype=np.float64)
    info = T.scalar_mul(T.mul(sup, has), cfg.gamma)
    return _assemble(task_loss(pred, y, regression), info)


def pi_from_free(free: Tensor) -> Tensor:
    return T.sigmoid(free)


def loss_learnable_pi(pred, y, logits, cfg: ObjectiveConfig, pi_free: Tensor, valid=None,
                      regression: bool = False) -> LossBreakdown:
    """SIB with a trained prior: beta * sum_j KL(p || Bernoulli(pi)) + entropy_lambda * pi."""
    pi = pi_from_free(pi_free)  # shape (1,)
    kl = T.scalar_mul(kl_sum(logits, pi, valid), cfg.beta)
    info = T.add(kl, T.scalar_mul(pi, cfg.entropy_lambda))
    return _assemble(task_loss(pred, y, regression), info)


def loss_none(pred, y, regression: bool = False) -> LossBreakdown:
    return _assemble(task_loss(pred, y, regression), None)
