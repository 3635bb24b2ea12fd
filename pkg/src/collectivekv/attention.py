"""Host CTR models that consume the (K, V) built by :mod:`collectivekv.collective`.

Two single-head, single-layer models:

* ``target``: the candidate item is projected to the query and attends over
  the history's K/V (SIM-style).
* ``self``: the candidate is appended to the history and the causal
  self-attention output at its position is used (HSTU-style). Only that last
  row feeds the prediction, so it is computed directly.

Either way the head is ``sigmoid(w . (attn_out * query) + b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import collective as ckv
from .collective import CollectiveConfig, CollectiveForward, Mode
from .errors import ShapeError, UndefinedMetricError, UsageError
from .numkit import Rng, sigmoid, softmax_rows, softplus

AttnMode = Literal["target", "self"]
PROB_CLAMP = 1e-7
FLAG_SELF_ATTENTION = 8


@dataclass(frozen=True)
class AttentionConfig:
    mode: AttnMode = "target"

    def validate(self) -> None:
        if self.mode not in ("target", "self"):
            raise UsageError(f"attention mode must be 'target' or 'self', got {self.mode!r}")


@dataclass(frozen=True)
class ModelConfig:
    collective: CollectiveConfig
    attention: AttentionConfig = AttentionConfig()

    @property
    def attn_dim(self) -> int:
        return self.collective.attn_dim

    def validate(self) -> None:
        self.collective.validate()
        self.attention.validate()


@dataclass
class SequenceBatch:
    """One user's history plus the candidates scored against it."""

    user_id: str
    history: np.ndarray          # n x d_e
    targets: np.ndarray          # T x d_e
    labels: np.ndarray           # T, in {0, 1}
    target_items: Optional[np.ndarray] = None


@dataclass
class PredictionBatch:
    probs: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray

    @classmethod
    def concat(cls, parts: Sequence["PredictionBatch"]) -> "PredictionBatch":
        return cls(np.concatenate([p.probs for p in parts]), np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.user_ids for p in parts]))


# ---------------------------------------------------------------------------
# Attention primitives

def target_attention(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(q)
    if q.shape[0] != 1 or K.ndim != 2 or V.ndim != 2 or q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ShapeError(f"target attention shapes q {q.shape}, K {K.shape}, V {V.shape}")
    if K.shape[0] == 0:
        raise ShapeError("target attention needs at least one key")
    weights = softmax_rows(q @ K.T / np.sqrt(K.shape[1]))
    return weights @ V


def self_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, causal: bool = True) -> np.ndarray:
    if not (Q.shape[0] == K.shape[0] == V.shape[0]) or Q.shape[1] != K.shape[1]:
        raise ShapeError(f"self attention shapes Q {Q.shape}, K {K.shape}, V {V.shape}")
    scores = Q @ K.T / np.sqrt(K.shape[1])
    if causal:
        scores = np.where(np.tril(np.ones(scores.shape, dtype=bool)), scores, -np.inf)
    return softmax_rows(scores) @ V


# ---------------------------------------------------------------------------
# CTR model

def head_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    da = config.attn_dim
    return {"query.W": (config.collective.embed_dim, da), "head.w": (da,), "head.b": (1,)}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = dict(ckv.param_shapes(config.collective))
    shapes.update(head_shapes(config))
    return shapes


def init_model(config: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    config.validate()
    params = ckv.init_collective_params(config.collective, rng.spawn("collective"))
    head_rng = rng.spawn("head")
    de, da = config.collective.embed_dim, config.attn_dim
    params["query.W"] = head_rng.uniform(-1 / np.sqrt(de), 1 / np.sqrt(de), (de, da))
    params["head.w"] = head_rng.uniform(-1 / np.sqrt(da), 1 / np.sqrt(da), (da,))
    params["head.b"] = np.zeros(1)
    return params


@dataclass
class CTRForward:
    batch: SequenceBatch
    config: ModelConfig
    mode: Mode
    kv: CollectiveForward
    query: np.ndarray
    weights: np.ndarray       # T x n (target) or T x (n+1) (self)
    attn_out: np.ndarray      # T x d_a
    logits: np.ndarray
    probs: np.ndarray

    @property
    def aux(self) -> float:
        return self.kv.aux

    def predictions(self) -> PredictionBatch:
        return PredictionBatch(self.probs, self.batch.labels.astype(np.float64),
                               np.full(self.probs.shape, self.batch.user_id, dtype=object))


def _kv_input(batch: SequenceBatch, config: ModelConfig) -> np.ndarray:
    if config.attention.mode == "self":
        return np.vstack([batch.history, batch.targets])
    return batch.history


def attend(query: np.ndarray, K: np.ndarray, V: np.ndarray, K_self=None, V_self=None):
    """Batched attention of T queries over shared history K/V.

    With ``K_self``/``V_self`` each query also attends to its own extra row,
    which is the last row of causal self-attention over ``[history; target]``.
    Returns ``(weights, output)``.
    """
    scale = 1.0 / np.sqrt(K.shape[1])
    scores = query @ K.T * scale
    if K_self is not None:
        scores = np.concatenate([scores, np.sum(query * K_self, axis=1, keepdims=True) * scale], axis=1)
    if scores.shape[1] == 0:
        raise ShapeError("attention over an empty history")
    weights = softmax_rows(scores)
    n = K.shape[0]
    out = weights[:, :n] @ V
    if V_self is not None:
        out = out + weights[:, n:] * V_self
    return weights, out


def ctr_forward(batch: SequenceBatch, params: dict, config: ModelConfig, mode: Mode) -> CTRForward:
    if batch.targets.shape[0] == 0:
        raise UsageError("batch has no targets")
    kv = ckv.collective_forward(_kv_input(batch, config), config.collective, params, mode)
    query = batch.targets @ params["query.W"]
    n = batch.history.shape[0]
    if config.attention.mode == "self":
        weights, out = attend(query, kv.K[:n], kv.V[:n], kv.K[n:], kv.V[n:])
    else:
        weights, out = attend(query, kv.K, kv.V)
    logits = (out * query) @ params["head.w"] + params["head.b"][0]
    return CTRForward(batch=batch, config=config, mode=mode, kv=kv, query=query, weights=weights,
                      attn_out=out, logits=logits, probs=sigmoid(logits))


def ctr_backward(fwd: CTRForward, d_logits: np.ndarray, params: dict, aux_scale: float = 1.0) -> dict:
    """Parameter gradients of ``<d_logits, logits> + aux_scale * aux``."""
    n = fwd.batch.history.shape[0]
    kv = fwd.kv
    q, out, w = fwd.query, fwd.attn_out, fwd.weights
    scale = 1.0 / np.sqrt(fwd.config.attn_dim)
    feat = out * q
    grads = {"head.w": feat.T @ d_logits, "head.b": np.array([d_logits.sum()])}
    d_feat = d_logits[:, None] * params["head.w"][None, :]
    d_out = d_feat * q
    dq = d_feat * out

    K_h, V_h = kv.K[:n], kv.V[:n]
    w_h = w[:, :n]
    d_w = d_out @ V_h.T
    dV = np.zeros_like(kv.V)
    dK = np.zeros_like(kv.K)
    dV[:n] = w_h.T @ d_out
    if fwd.config.attention.mode == "self":
        K_t, V_t = kv.K[n:], kv.V[n:]
        w_t = w[:, n:]
        d_w = np.concatenate([d_w, np.sum(d_out * V_t, axis=1, keepdims=True)], axis=1)
        dV[n:] = w_t * d_out
    d_scores = w * (d_w - np.sum(w * d_w, axis=1, keepdims=True))
    dq += d_scores[:, :n] @ K_h * scale
    dK[:n] = d_scores[:, :n].T @ q * scale
    if fwd.config.attention.mode == "self":
        dq += d_scores[:, n:] * K_t * scale
        dK[n:] = d_scores[:, n:] * q * scale
    grads["query.W"] = fwd.batch.targets.T @ dq
    _, kv_grads = ckv.collective_backward(kv, dK, dV, params, aux_scale=aux_scale)
    grads.update(kv_grads)
    return grads


def bce_from_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example binary cross-entropy computed stably from logits."""
    return softplus(logits) - labels * logits


def training_loss(fwds: Sequence[CTRForward]) -> tuple[float, float]:
    """Mean BCE over all examples and mean aux loss over users."""
    logits = np.concatenate([f.logits for f in fwds])
    labels = np.concatenate([f.batch.labels for f in fwds]).astype(np.float64)
    return float(bce_from_logits(logits, labels).mean()), float(np.mean([f.aux for f in fwds]))


def loss_and_grads(batches: Sequence[SequenceBatch], params: dict, config: ModelConfig):
    """Training-mode objective ``mean BCE + mean aux`` and its gradients."""
    fwds = [ctr_forward(b, params, config, "training") for b in batches]
    total_examples = sum(f.logits.size for f in fwds)
    bce, aux = training_loss(fwds)
    grads = {name: np.zeros(shape) for name, shape in param_shapes(config).items()}
    for f in fwds:
        d_logits = (sigmoid(f.logits) - f.batch.labels) / total_examples
        for name, g in ctr_backward(f, d_logits, params, aux_scale=1.0 / len(fwds)).items():
            grads[name] += g
    return bce + aux, {"bce": bce, "aux": aux, "peak": float(np.mean([f.kv.peak for f in fwds])),
                       "balance": float(np.mean([f.kv.balance for f in fwds]))}, grads


# ---------------------------------------------------------------------------
# Metrics

def _clamped(probs: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(pred: PredictionBatch) -> float:
    p = _clamped(pred.probs)
    y = np.asarray(pred.labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def auc(pred: PredictionBatch) -> float:
    """Rank-sum AUC; tied scores share their average rank (count one half)."""
    y = np.asarray(pred.labels, dtype=np.float64)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(np.asarray(pred.probs, dtype=np.float64), method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(pred: PredictionBatch) -> float:
    """Per-user AUC weighted by example count; single-class users are skipped."""
    users = np.asarray(pred.user_ids)
    labels = np.asarray(pred.labels)
    weights, aucs = [], []
    _, first = np.unique(users, return_index=True)
    for u in users[np.sort(first)]:
        mask = users == u
        ys = labels[mask]
        if ys.min() == ys.max():
            continue
        weights.append(int(mask.sum()))
        aucs.append(auc(PredictionBatch(pred.probs[mask], ys, users[mask])))
    if not weights:
        raise UndefinedMetricError("GAUC needs at least one user with both classes")
    if len(weights) == 1:
        # w * a / w can differ from a in the last bit
        return aucs[0]
    return float(np.dot(weights, aucs) / sum(weights))


@dataclass
class MetricsReport:
    run_id: str
    mode: str
    user_dim: int
    global_dim: int
    pool_size: int
    auc: float
    gauc: float
    logloss: float
    compression_rate: float
    extra: dict = field(default_factory=dict)

    CSV_COLUMNS = ("run_id", "mode", "d_u", "d_g", "m", "auc", "gauc", "logloss", "compression_rate")

    def row(self) -> list:
        return [self.run_id, self.mode, self.user_dim, self.global_dim, self.pool_size,
                f"{self.auc:.6f}", f"{self.gauc:.6f}", f"{self.logloss:.6f}", f"{self.compression_rate:.6f}"]


def evaluate_predictions(pred: PredictionBatch) -> dict:
    return {"auc": auc(pred), "gauc": gauc(pred), "logloss": bce_loss(pred)}


def predict(batches: Sequence[SequenceBatch], params: dict, config: ModelConfig,
            mode: Mode = "inference") -> PredictionBatch:
    return PredictionBatch.concat([ctr_forward(b, params, config, mode).predictions() for b in batches])


def encode_model(config: ModelConfig, params: dict) -> bytes:
    extra = FLAG_SELF_ATTENTION if config.attention.mode == "self" else 0
    return ckv.encode_checkpoint(config.collective, params, extra_names=list(head_shapes(config)),
                                 extra_flags=extra)


def decode_model(data: bytes, **collective_overrides) -> tuple[ModelConfig, dict]:
    def extra(cfg, flags):
        mode = "self" if flags & FLAG_SELF_ATTENTION else "target"
        return head_shapes(ModelConfig(cfg, AttentionConfig(mode)))

    cfg, params, flags = ckv.decode_checkpoint(data, extra_shapes=extra, **collective_overrides)
    mode = "self" if flags & FLAG_SELF_ATTENTION else "target"
    return ModelConfig(cfg, AttentionConfig(mode)), params
