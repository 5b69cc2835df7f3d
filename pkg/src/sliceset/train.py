"""Initialization, optimizers, and the epoch loop with best-model selection.

The loop trains on stacked per-volume forward passes, validates after every
epoch, and keeps the checkpoint that optimizes the selection metric (lowest
mean absolute error for regression, highest balanced accuracy for
classification), breaking ties toward the earliest epoch.  Runs are fully
deterministic given (seed, data, config); the per-epoch wall-clock entry is
the only field allowed to differ between identical runs.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import Volume
from .metrics import EvalReport, classification_report, mae, regression_report
from .model import SliceSetModel
from .tensor import Tensor, no_grad, stack

OPTIMIZER_KINDS = ("adam", "sgd")
LOSS_KINDS = ("l1", "mse", "cross_entropy")
SELECTION_METRICS = ("mae", "balanced_accuracy")


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss goes non-finite; names the epoch and batch."""


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    momentum: float = 0.0

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZER_KINDS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    """Loop hyperparameters; loss/selection default from the task when None."""

    epochs: int = 100
    batch_size: int = 8
    loss: str | None = None
    selection_metric: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss is not None and self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSS_KINDS}")
        if self.selection_metric is not None and self.selection_metric not in SELECTION_METRICS:
            raise ValueError(
                f"unknown selection metric {self.selection_metric!r}; choose from {SELECTION_METRICS}")

    def resolved(self, task: str) -> "TrainConfig":
        loss = self.loss or ("cross_entropy" if task == "classification" else "mse")
        metric = self.selection_metric or (
            "balanced_accuracy" if task == "classification" else "mae")
        if task == "classification" and loss != "cross_entropy":
            raise ValueError(f"loss {loss!r} does not fit classification")
        if task == "regression" and loss == "cross_entropy":
            raise ValueError("cross_entropy does not fit regression")
        if task == "classification" and metric != "balanced_accuracy":
            raise ValueError(f"selection metric {metric!r} does not fit classification")
        if task == "regression" and metric != "mae":
            raise ValueError(f"selection metric {metric!r} does not fit regression")
        return replace(self, loss=loss, selection_metric=metric)


@dataclass
class Checkpoint:
    """Snapshot of every parameter and buffer at one epoch."""

    epoch: int
    val_metric: float
    state: dict[str, np.ndarray]

    def restore(self, module: nn.Module):
        nn.load_state(module, self.state)


def snapshot_state(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr, _ in module.named_state()}


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def he_init(model: nn.Module, seed: int = 0) -> nn.Module:
    """Draw conv/linear weights from Normal(0, sqrt(2/fan_in)), biases zero.

    Uses one generator over a deterministic module traversal, so a given
    (model shape, seed) pair always produces bit-identical parameters.
    Normalization gains/offsets and the positional table keep their
    construction values (ones/zeros).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    for _, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            std = math.sqrt(2.0 / module.fan_in)
            module.weight.data = rng.normal(0.0, std, module.weight.shape).astype(np.float32)
            if getattr(module, "bias", None) is not None:
                module.bias.data = np.zeros(module.bias.shape, dtype=np.float32)
    return model


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Momentum SGD; update math in float64, parameters stored float32."""

    def __init__(self, parameters, config: OptimizerConfig):
        self.params = list(parameters)
        self.lr = float(config.learning_rate)
        self.momentum = float(config.momentum)
        self.velocity = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            v *= self.momentum
            v += g
            p.data = (p.data.astype(np.float64) - self.lr * v).astype(p.data.dtype)


class Adam:
    """Adam with bias-corrected first/second moments kept in float64."""

    def __init__(self, parameters, config: OptimizerConfig):
        self.params = list(parameters)
        self.lr = float(config.learning_rate)
        self.beta1 = float(config.beta1)
        self.beta2 = float(config.beta2)
        self.epsilon = float(config.epsilon)
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = (p.data.astype(np.float64)
                      - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(p.data.dtype)


def build_optimizer(parameters, config: OptimizerConfig):
    return Adam(parameters, config) if config.kind == "adam" else SGD(parameters, config)


# ---------------------------------------------------------------------------
# losses on stacked batch outputs
# ---------------------------------------------------------------------------

def batch_loss(model: SliceSetModel, batch: list[Volume], loss_kind: str) -> Tensor:
    """Forward every volume in the batch and reduce to one scalar loss."""
    outputs = [model.forward_volume(v) for v in batch]
    if model.config.task == "classification":
        logits = stack(outputs, axis=0)
        labels = np.array([int(v.target) for v in batch], dtype=np.int64)
        return nn.cross_entropy(logits, labels)
    preds = stack(outputs, axis=0)
    targets = Tensor(np.array([float(v.target) for v in batch], dtype=np.float32))
    if loss_kind == "l1":
        return nn.l1_loss(preds, targets)
    return nn.mse_loss(preds, targets)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(model: SliceSetModel, volumes: list[Volume]):
    """Eval-mode forward over a dataset.

    Regression → (predictions, targets) float arrays.  Classification →
    (class-1 probabilities, predicted labels, true labels).
    """
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            if model.config.task == "regression":
                preds = np.array([model.forward_volume(v).item() for v in volumes])
                targets = np.array([float(v.target) for v in volumes])
                return preds, targets
            scores, labels, truths = [], [], []
            for v in volumes:
                logits = model.forward_volume(v).numpy().astype(np.float64)
                shifted = np.exp(logits - logits.max())
                scores.append(float(shifted[1] / shifted.sum()))
                labels.append(int(np.argmax(logits)))
                truths.append(int(v.target))
            return np.array(scores), np.array(labels), np.array(truths)
    finally:
        if was_training:
            model.train()


def evaluate(model: SliceSetModel, volumes: list[Volume]) -> EvalReport:
    if not volumes:
        raise ValueError("cannot evaluate on an empty dataset")
    if model.config.task == "regression":
        preds, targets = predict(model, volumes)
        return regression_report(preds, targets)
    scores, labels, truths = predict(model, volumes)
    return classification_report(scores, labels, truths)


def _validation_metric(model: SliceSetModel, volumes: list[Volume], metric: str) -> float:
    if metric == "mae":
        preds, targets = predict(model, volumes)
        return mae(preds, targets)
    return evaluate(model, volumes).balanced_accuracy


# ---------------------------------------------------------------------------
# the epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    log: list[dict] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return self.best.epoch


def train(model: SliceSetModel, train_volumes: list[Volume], val_volumes: list[Volume],
          train_config: TrainConfig, optimizer_config: OptimizerConfig,
          log_path=None, progress=None) -> TrainResult:
    """Run the epoch loop and return the best checkpoint plus the epoch log.

    Each log record is {epoch, train_loss, val_metric, wall_ms}; when
    ``log_path`` is given the records are also appended there as JSON lines.
    ``progress`` is an optional callable receiving each record.
    """
    if not train_volumes:
        raise ValueError("training split is empty")
    if not val_volumes:
        raise ValueError("validation split is empty")
    cfg = train_config.resolved(model.config.task)
    rng = np.random.default_rng(cfg.seed)
    optimizer = build_optimizer(model.parameters(), optimizer_config)
    lower_is_better = cfg.selection_metric == "mae"

    log_file = open(log_path, "w") if log_path is not None else None
    best: Checkpoint | None = None
    log: list[dict] = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            model.train()
            order = rng.permutation(len(train_volumes))
            loss_sum = 0.0
            seen = 0
            for batch_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train_volumes[i] for i in order[start:start + cfg.batch_size]]
                optimizer.zero_grad()
                loss = batch_loss(model, batch, cfg.loss)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite training loss {value} at epoch {epoch}, batch {batch_idx}")
                loss.backward()
                optimizer.step()
                loss_sum += value * len(batch)
                seen += len(batch)

            val_metric = _validation_metric(model, val_volumes, cfg.selection_metric)
            record = {
                "epoch": epoch,
                "train_loss": loss_sum / seen,
                "val_metric": val_metric,
                "wall_ms": int(round((time.perf_counter() - started) * 1000.0)),
            }
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if progress is not None:
                progress(record)

            improved = best is None or (
                val_metric < best.val_metric if lower_is_better else val_metric > best.val_metric)
            if improved:
                best = Checkpoint(epoch=epoch, val_metric=val_metric,
                                  state=snapshot_state(model))
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(best=best, log=log)


def read_epoch_log(path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            records.append(json.loads(line))
    return records
