"""Finite-difference checks for every primitive op and every training loss.

Noise is drawn once and frozen so each checked function is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import objectives as O
from . import tensor as T
from .model import sample_mask
from .rng import Rng

PRIMITIVE_TOL = 1e-4
LOSS_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def row(self) -> str:
        return f"{self.name:<28} {self.error:.3e}  {'pass' if self.passed else 'FAIL'}"


def _weighted(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    # a fixed random projection makes every output coordinate matter
    return T.sum(T.mul(out, w))


def primitive_cases(seed: int = 0) -> list[tuple[str, Callable, np.ndarray]]:
    rng = Rng(seed, "gradcheck-primitives")

    def u(*shape, lo=-1.0, hi=1.0):
        return lo + (hi - lo) * rng.uniform(shape)

    a23, b23, b34 = u(2, 3), u(2, 3), u(3, 4)
    w23, w24, w2, w26 = u(2, 3), u(2, 4), u(2), u(2, 6)
    b3 = u(3)
    batch_b = u(2, 3, 4)
    w234 = u(2, 2, 4)
    table = u(5, 3)
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    w_emb = u(2, 3, 3)
    # keep clamp inputs away from the kinks
    clamp_x = np.array([[-0.9, -0.3, 0.2], [0.35, 0.8, 1.4]])

    return [
        ("add", lambda x: _weighted(T.add(x, b23), w23), a23),
        ("add_broadcast", lambda x: _weighted(T.add(a23, x), w23), b3),
        ("sub", lambda x: _weighted(T.sub(b23, x), w23), a23),
        ("mul", lambda x: _weighted(T.mul(x, b23), w23), a23),
        ("mul_self", lambda x: _weighted(T.mul(x, x), w23), a23),
        ("mul_broadcast", lambda x: _weighted(T.mul(a23, x), w23), b3),
        ("scalar_mul", lambda x: _weighted(T.scalar_mul(x, -2.5), w23), a23),
        ("matmul_left", lambda x: _weighted(T.matmul(x, b34), w24), a23),
        ("matmul_right", lambda x: _weighted(T.matmul(a23, x), w24), b34),
        ("matmul_batched", lambda x: _weighted(T.matmul(T.reshape(x, (2, 2, 3)), batch_b), w234),
         u(4, 3)),
        ("sigmoid", lambda x: _weighted(T.sigmoid(x), w23), a23 * 3),
        ("tanh", lambda x: _weighted(T.tanh(x), w23), a23 * 2),
        ("exp", lambda x: _weighted(T.exp(x), w23), a23),
        ("log", lambda x: _weighted(T.log(x), w23), u(2, 3, lo=0.5, hi=2.0)),
        ("clamp", lambda x: _weighted(T.clamp(x, -0.5, 1.0), w23), clamp_x),
        ("sum_axis", lambda x: _weighted(T.sum(x, axis=-1), w2), a23),
        ("mean", lambda x: T.mean(T.mul(x, w23)), a23),
        ("mean_axis", lambda x: _weighted(T.mean(x, axis=0), b3), a23),
        ("reshape", lambda x: _weighted(T.reshape(x, (3, 2)), w23.reshape(3, 2)), a23),
        ("concat", lambda x: _weighted(T.concat([x, T.mul(x, b23)]), w26), a23),
        ("softmax", lambda x: _weighted(T.softmax(x), w23), a23 * 2),
        ("log_softmax", lambda x: _weighted(T.log_softmax(x), w23), a23 * 2),
        ("embedding_lookup", lambda x: _weighted(T.embedding_lookup(x, ids), w_emb), table),
    ]


def loss_cases(seed: int = 0) -> list[tuple[str, Callable, np.ndarray]]:
    """Full objectives as functions of the explainer logits (and of the free prior)."""
    rng = Rng(seed, "gradcheck-losses")
    B, U, C = 3, 5, 2
    logits0 = 2.0 * rng.uniform((B, U)) - 1.0
    valid = np.ones((B, U))
    valid[1, 4] = valid[2, 3:] = 0.0
    u = rng.uniform((B, U))
    W = rng.uniform((U, C)) - 0.5
    y = np.array([0, 1, 1])
    gold = (rng.uniform((B, U)) < 0.4).astype(np.float64) * valid
    has_gold = np.array([True, False, True])

    def pred_from(mask):
        return T.log_softmax(T.matmul(mask, W))

    def mask_of(logits, cfg):
        return sample_mask(logits, cfg.tau, u, cfg.distribution, cfg.noise, cfg.stretch, valid)

    def make(kind, **kw):
        cfg = O.ObjectiveConfig(kind=kind, pi=0.2, **kw).validate()

        def f(logits):
            mask = mask_of(logits, cfg)
            pred = pred_from(mask)
            if kind == "sib":
                return O.loss_sib(pred, y, logits, cfg, valid).total
            if kind == "sl0":
                return O.loss_sl0(pred, y, mask, cfg, valid, logits=logits).total
            if kind == "sl0c":
                return O.loss_sl0c(pred, y, mask, cfg, valid, logits=logits).total
            if kind == "semi":
                return O.loss_semi(pred, y, logits, gold, cfg, valid, has_gold).total
            return O.loss_none(pred, y).total
        return f

    lp_cfg = O.ObjectiveConfig(kind="sib", learnable_pi=True, entropy_lambda=0.7).validate()
    free0 = np.array([0.3])

    def learnable_wrt_logits(logits):
        pred = pred_from(mask_of(logits, lp_cfg))
        return O.loss_learnable_pi(pred, y, logits, lp_cfg, T.Tensor(free0), valid).total

    def learnable_wrt_prior(free):
        pred = pred_from(mask_of(T.Tensor(logits0), lp_cfg))
        return O.loss_learnable_pi(pred, y, T.Tensor(logits0), lp_cfg, free, valid).total

    return [
        ("loss_sib", make("sib"), logits0),
        ("loss_sib_kuma", make("sib", distribution="kuma"), logits0),
        ("loss_sl0", make("sl0", lam=0.5), logits0),
        ("loss_sl0_hard_concrete", make("sl0", lam=0.5, distribution="hard_concrete"), logits0),
        ("loss_sl0c", make("sl0c"), logits0),
        ("loss_semi", make("semi"), logits0),
        ("loss_semi_positive_only", make("semi", semi_loss="paper_positive_only"), logits0),
        ("loss_none", make("none"), logits0),
        ("loss_learnable_pi_logits", learnable_wrt_logits, logits0),
        ("loss_learnable_pi_prior", learnable_wrt_prior, free0),
    ]


def run_all(seed: int = 0) -> list[CheckResult]:
    out = [CheckResult(n, T.grad_check(f, x), PRIMITIVE_TOL) for n, f, x in primitive_cases(seed)]
    out += [CheckResult(n, T.grad_check(f, x), LOSS_TOL) for n, f, x in loss_cases(seed)]
    return out
