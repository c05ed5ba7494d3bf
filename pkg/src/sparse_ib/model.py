"""Toy explainer and end-task predictor.

The explainer maps every unit (sentence or token) to a Bernoulli logit.
The predictor has its own encoder and sees the document only through the
mask-weighted sum of its unit representations, so a unit with mask 0
contributes nothing to the prediction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import distributions as D
from . import tensor as T
from .data import Batch, Vocab
from .rng import Rng
from .tensor import Tensor

DISTRIBUTIONS = ("concrete", "hard_concrete", "kuma", "hard_kuma")
CHECKPOINT_FORMAT = "sparse-ib-checkpoint"
CHECKPOINT_VERSION = 1
_ZERO_INIT = {"b1", "b2", "b3", "head_b", "out_b", "pi_logit"}


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 64
    granularity: str = "sentence"
    num_classes: int = 2
    regression: bool = False
    has_query: bool = False
    learnable_pi: bool = False

    def validate(self) -> None:
        if min(self.vocab_size, self.embed_dim, self.hidden_dim) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.granularity not in ("sentence", "token"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not self.regression and self.num_classes < 2:
            raise ValueError("classification needs num_classes >= 2")

    @property
    def output_dim(self) -> int:
        return 1 if self.regression else self.num_classes


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.embed_dim, cfg.hidden_dim
    shapes = {}
    for side in ("exp", "pred"):
        shapes[f"{side}.embed"] = (cfg.vocab_size, d)
        shapes[f"{side}.w1"] = (3 * d, h)
        shapes[f"{side}.b1"] = (h,)
        shapes[f"{side}.w2"] = (h, h)
        shapes[f"{side}.b2"] = (h,)
    ctx = 3 * h if cfg.has_query else 2 * h
    shapes["exp.head_w"] = (ctx, 1)
    shapes["exp.head_b"] = (1,)
    pin = 2 * h if cfg.has_query else h
    shapes["pred.w3"] = (pin, h)
    shapes["pred.b3"] = (h,)
    shapes["pred.out_w"] = (h, cfg.output_dim)
    shapes["pred.out_b"] = (cfg.output_dim,)
    if cfg.learnable_pi:
        shapes["prior.pi_logit"] = (1,)
    return shapes


@dataclass
class RationaleModel:
    config: ModelConfig
    params: dict[str, Tensor]
    vocab: Vocab = field(default_factory=Vocab)
    classes: list[str] = field(default_factory=list)

    @classmethod
    def init(cls, config: ModelConfig, seed: int, vocab: Vocab | None = None,
             classes: list[str] | None = None) -> "RationaleModel":
        """Weights and embeddings uniform in [-0.1, 0.1]; biases and the prior logit zero."""
        config.validate()
        rng = Rng(seed, "model-init")
        params = {}
        for name, shape in sorted(_param_shapes(config).items()):
            if name.rsplit(".", 1)[1] in _ZERO_INIT:
                data = np.zeros(shape)
            else:
                data = rng.split(name).uniform(shape) * 0.2 - 0.1
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params, vocab or Vocab(), list(classes or []))

    # -- parameters -----------------------------------------------------------

    def parameters(self, prefix: str = "") -> list[Tensor]:
        return [p for n, p in sorted(self.params.items()) if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self.params[n].data = arr.copy()

    @property
    def prior_pi(self) -> float | None:
        p = self.params.get("prior.pi_logit")
        return None if p is None else float(1.0 / (1.0 + np.exp(-p.data[0])))

    # -- forward --------------------------------------------------------------

    def _unit_features(self, side: str, ids: np.ndarray, valid: np.ndarray,
                       first: np.ndarray, last: np.ndarray) -> Tensor:
        """Mean, first and last token embeddings, then a 2-layer tanh MLP."""
        B, U, L = ids.shape
        emb = self.params[f"{side}.embed"]
        counts = valid.sum(axis=2, keepdims=True)
        weights = np.where(counts > 0, valid / np.maximum(counts, 1.0), 0.0)
        weights[:, :, 0] = np.where(counts[:, :, 0] > 0, weights[:, :, 0], 1.0)  # empty -> PAD row
        tok = T.embedding_lookup(emb, ids.reshape(B * U, L))
        pooled = T.sum(T.mul(tok, weights.reshape(B * U, L, 1)), axis=1)
        pooled = T.reshape(pooled, (B, U, emb.shape[1]))
        feats = T.concat([pooled, T.embedding_lookup(emb, first), T.embedding_lookup(emb, last)])
        p = self.params
        h = T.tanh(T.add(T.matmul(feats, p[f"{side}.w1"]), p[f"{side}.b1"]))
        return T.tanh(T.add(T.matmul(h, p[f"{side}.w2"]), p[f"{side}.b2"]))

    def _query_rep(self, side: str, batch: Batch) -> Tensor | None:
        if not self.config.has_query:
            return None
        B = batch.size
        if batch.query_ids is None:
            ids = np.zeros((B, 1, 1), dtype=np.int64)
            valid = np.zeros((B, 1, 1))
        else:
            ids, valid = batch.query_ids, batch.query_valid
        counts = valid.sum(axis=2).astype(np.int64)
        last = np.take_along_axis(ids, np.maximum(counts - 1, 0)[:, :, None], axis=2)[:, :, 0]
        return self._unit_features(side, ids, valid, ids[:, :, 0], last)  # (B, 1, H)

    def encode(self, batch: Batch, side: str = "exp") -> tuple[Tensor, Tensor | None]:
        """Per-unit representations (B, U, H) and the query representation (B, 1, H)."""
        if batch.size == 0:
            raise ValueError("cannot encode an empty batch")
        reps = self._unit_features(side, batch.token_ids, batch.token_valid,
                                   batch.first_ids, batch.last_ids)
        return reps, self._query_rep(side, batch)

    def explain(self, batch: Batch) -> Tensor:
        """Bernoulli logits (B, U) clamped to +-15; each unit sees the doc mean and query."""
        reps, query = self.encode(batch, "exp")
        B, U, _ = reps.shape
        n = np.maximum(batch.n_units, 1).astype(np.float64)
        avg = np.broadcast_to((batch.unit_valid / n[:, None])[:, None, :], (B, U, U))
        parts = [reps, T.matmul(avg, reps)]
        if query is not None:
            parts.append(T.matmul(np.ones((B, U, 1)), query))
        logits = T.add(T.matmul(T.concat(parts), self.params["exp.head_w"]), self.params["exp.head_b"])
        return T.clamp(T.reshape(logits, (B, U)), -D.LOGIT_LIMIT, D.LOGIT_LIMIT)

    def predict(self, batch: Batch, mask) -> Tensor:
        """Class log-probabilities (B, C), or regression outputs (B,).

        Input enters only through ``sum_j mask_j * h_j / n`` and the unmasked query.
        """
        reps, query = self.encode(batch, "pred")
        B, U, H = reps.shape
        mask = T.as_tensor(mask)
        agg = T.sum(T.mul(reps, T.reshape(mask, (B, U, 1))), axis=1)
        inv_n = (1.0 / np.maximum(batch.n_units, 1)).reshape(B, 1)
        z = T.mul(agg, inv_n)
        if query is not None:
            z = T.concat([z, T.reshape(query, (B, H))])
        p = self.params
        hidden = T.tanh(T.add(T.matmul(z, p["pred.w3"]), p["pred.b3"]))
        out = T.add(T.matmul(hidden, p["pred.out_w"]), p["pred.out_b"])
        if self.config.regression:
            return T.reshape(out, (B,))
        return T.log_softmax(out)

    # -- checkpoints ----------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        """Write a versioned JSON checkpoint (see README for the layout)."""
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "vocab": self.vocab.itos,
            "classes": self.classes,
            "extra": extra or {},
            "params": {n: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                       for n, p in sorted(self.params.items())},
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> tuple["RationaleModel", dict]:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        payload = json.loads(path.read_text(encoding="utf-8"))
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        config = ModelConfig(**payload["config"])
        vocab = Vocab(payload["vocab"][2:])
        params = {n: Tensor(np.array(v["data"], dtype=np.float64).reshape(v["shape"]),
                            requires_grad=True, name=n)
                  for n, v in payload["params"].items()}
        expected = _param_shapes(config)
        if set(params) != set(expected):
            raise ValueError(f"{path}: parameter names do not match the config")
        return cls(config, params, vocab, payload["classes"]), payload.get("extra", {})


# -- masks --------------------------------------------------------------------

def sample_mask(logits, tau: float, rng: Rng | np.ndarray, distribution: str = "concrete",
                noise: str = "logistic", stretch: D.StretchParams = D.StretchParams(),
                valid: np.ndarray | None = None) -> Tensor:
    """Relaxed training mask; ``rng`` may also be a frozen array of uniforms."""
    logits = T.as_tensor(logits)
    if distribution not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {distribution!r}; expected one of {DISTRIBUTIONS}")
    u = rng.uniform(logits.shape) if isinstance(rng, Rng) else np.asarray(rng, dtype=np.float64)
    if distribution == "concrete":
        m = D.sample_concrete(logits, tau, u, noise)
    elif distribution == "hard_concrete":
        m = D.sample_hard_concrete(logits, tau, u, stretch, noise)
    elif distribution == "kuma":
        m = D.sample_kuma(D.kuma_from_logit(logits), u)
    else:
        m = D.sample_hard_kuma(D.kuma_from_logit(logits), u, stretch)
    if valid is not None:
        m = T.mul(m, valid)
    return m


def budget(pi: float, n: int) -> int:
    """k = clamp(ceil(pi * n), 1, n); the epsilon absorbs products like 0.7 * 10."""
    return min(n, max(1, math.ceil(pi * n - 1e-9)))


def infer_mask(logits, pi: float, valid: np.ndarray | None = None) -> np.ndarray:
    """Hard top-k mask; larger logit first, lower index on ties."""
    if not 0.0 < pi < 1.0:
        raise ValueError(f"pi must be in (0, 1), got {pi}")
    arr = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    valid = np.ones_like(arr) if valid is None else np.atleast_2d(np.asarray(valid, dtype=np.float64))
    out = np.zeros_like(arr)
    for b in range(arr.shape[0]):
        idx = np.flatnonzero(valid[b] > 0)
        if idx.size == 0:
            continue
        k = budget(pi, idx.size)
        order = idx[np.lexsort((idx, -arr[b, idx]))]
        out[b, order[:k]] = 1.0
    return out[0] if single else out
