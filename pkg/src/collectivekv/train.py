"""Mini-batch Adam trainer for the CTR models."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .attention import ModelConfig, SequenceBatch, init_model, loss_and_grads, predict, evaluate_predictions
from .errors import NumericError
from .numkit import AdamState, Rng, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.01
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    loss: float
    bce: float
    aux: float
    peak: float
    balance: float
    mean_gate: float


@dataclass
class TrainResult:
    params: dict
    history: list[EpochLog] = field(default_factory=list)
    steps: int = 0


class Trainer:
    """Owns the parameters and optimizer state of a single run."""

    def __init__(self, config: ModelConfig, train_cfg: TrainConfig, params: Optional[dict] = None,
                 trainable: Optional[Callable[[str], bool]] = None):
        config.validate()
        self.config = config
        self.train_cfg = train_cfg
        self.rng = Rng(train_cfg.seed)
        self.params = params if params is not None else init_model(config, self.rng.spawn("init"))
        self.opt = {k: AdamState.for_param(v, learning_rate=train_cfg.learning_rate) for k, v in self.params.items()}
        self.trainable = trainable or (lambda name: True)
        self.history: list[EpochLog] = []
        self.steps = 0
        self._order_rng = self.rng.spawn("order")

    def step(self, batches: Sequence[SequenceBatch]) -> dict:
        loss, parts, grads = loss_and_grads(batches, self.params, self.config)
        if not math.isfinite(loss):
            raise NumericError(f"training loss became non-finite at step {self.steps}")
        for name, g in grads.items():
            if not self.trainable(name):
                continue
            self.params[name], _ = adam_step(self.params[name], g, self.opt[name])
        self.steps += 1
        parts["loss"] = loss
        return parts

    def epoch(self, data: Sequence[SequenceBatch]) -> EpochLog:
        order = self._order_rng.permutation(len(data))
        bs = self.train_cfg.batch_size
        totals = {"loss": 0.0, "bce": 0.0, "aux": 0.0, "peak": 0.0, "balance": 0.0}
        n_steps = 0
        for start in range(0, len(order), bs):
            parts = self.step([data[i] for i in order[start:start + bs]])
            for k in totals:
                totals[k] += parts[k]
            n_steps += 1
        entry = EpochLog(epoch=len(self.history) + 1, mean_gate=mean_gate(data, self.params, self.config),
                         **{k: v / max(n_steps, 1) for k, v in totals.items()})
        self.history.append(entry)
        log.info("epoch %d loss=%.5f bce=%.5f peak=%.5f balance=%.5f gate=%.4f", entry.epoch, entry.loss,
                 entry.bce, entry.peak, entry.balance, entry.mean_gate)
        return entry

    def fit(self, data: Sequence[SequenceBatch], epochs: Optional[int] = None,
            until: Optional[Callable[[EpochLog], bool]] = None) -> TrainResult:
        for _ in range(self.train_cfg.epochs if epochs is None else epochs):
            entry = self.epoch(data)
            if until is not None and until(entry):
                break
        return TrainResult(self.params, self.history, self.steps)


def mean_gate(data: Sequence[SequenceBatch], params: dict, config: ModelConfig) -> float:
    """Average sigmoid of the selected router logit over all routed items."""
    from .collective import collective_forward
    from .numkit import sigmoid

    if not config.collective.active_sides:
        return 1.0
    vals = []
    for b in data:
        x = np.vstack([b.history, b.targets]) if config.attention.mode == "self" else b.history
        fwd = collective_forward(x, config.collective, params, "inference")
        for side in config.collective.active_sides:
            vals.append(sigmoid(fwd.sides[side].rmap.selected_logits))
    return float(np.mean(np.concatenate(vals)))


def train(config: ModelConfig, data: Sequence[SequenceBatch], train_cfg: TrainConfig) -> TrainResult:
    return Trainer(config, train_cfg).fit(data)


def evaluate(data: Sequence[SequenceBatch], params: dict, config: ModelConfig) -> dict:
    return evaluate_predictions(predict(data, params, config, "inference"))
