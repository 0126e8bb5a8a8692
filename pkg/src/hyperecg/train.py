"""Mini-batch BCE training with Adam or SGD and early stopping on validation AUC."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import DivergenceDetected, EmptyDataset, InvalidSpec, SingleClass
from .evaluation import roc_auc
from .model import ModelConfig, ModelParams, init_params, model_forward, predict
from .signal import SegmentSet


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 50
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidSpec("batch_size, max_epochs and patience must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidSpec("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidSpec(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    wall_time_s: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time_s")
        return d


# ---------------------------------------------------------------- optimizers


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    """In place: ``w <- w - lr * g``."""
    for name, w in params.items():
        g = grads.get(name)
        if g is not None:
            w -= lr * g


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias-corrected moments."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- loop


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    pc = np.clip(p, T.BCE_EPS, 1.0 - T.BCE_EPS)
    return float(-(y * np.log(pc) + (1 - y) * np.log1p(-pc)).mean())


def _as_batch(values: np.ndarray, config: ModelConfig) -> np.ndarray:
    if values.shape[1] != config.width:
        raise InvalidSpec(f"segments are {values.shape[1]} wide, model expects {config.width}")
    return values.reshape(len(values), config.in_channels, config.width)


def _selection_key(auc: float, loss: float) -> tuple[float, float]:
    return (-math.inf if math.isnan(auc) else auc, -loss)


def train(model_config: ModelConfig, train_segments: SegmentSet, val_segments: SegmentSet,
          cfg: TrainConfig = TrainConfig(), init: ModelParams | None = None,
          log: Callable[[str], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """Fit the CBAM-CNN; returns the parameters of the best validation epoch.

    Epochs are ranked by validation AUC, with lower validation loss breaking
    ties.  Training stops after ``cfg.patience`` epochs without improvement.
    """
    if len(train_segments) == 0 or len(val_segments) == 0:
        raise EmptyDataset("training and validation sets must be non-empty")
    xs = _as_batch(train_segments.values, model_config)
    ys = train_segments.labels.astype(np.float64)
    xv = _as_batch(val_segments.values, model_config)
    yv = val_segments.labels.astype(np.float64)
    if np.any((ys < 0) | (ys > 1)) or np.any((yv < 0) | (yv > 1)):
        raise EmptyDataset("training needs labelled segments")

    params = init.copy() if init is not None else init_params(model_config, seed=cfg.seed)
    names = params.names()
    arrays = {k: params[k].data for k in names}
    state = AdamState()
    report = TrainReport()
    best, best_key, since_best = params.copy(), None, 0
    start = time.perf_counter()
    tape = T.get_tape()

    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(xs))
        total_loss, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            tape.clear()
            params.zero_grad()
            p = model_forward(T.Tensor(xs[idx]), params)
            loss = T.bce_loss(p, ys[idx])
            if not np.isfinite(loss.data):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch + 1}")
            T.backward(loss)
            grads = {k: params[k].grad for k in names}
            if cfg.optimizer == "adam":
                adam_step(arrays, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            else:
                sgd_step(arrays, grads, cfg.learning_rate)
            total_loss += float(loss.data) * len(idx)
            correct += int(np.sum((p.data >= 0.5) == (ys[idx] >= 0.5)))
        if not all(np.isfinite(a).all() for a in arrays.values()):
            raise DivergenceDetected(f"non-finite parameters after epoch {epoch + 1}")

        pv = predict(params, xv)
        val_loss = _bce(pv, yv)
        try:
            _, val_auc = roc_auc(pv, yv.astype(np.int64))
        except SingleClass:
            val_auc = math.nan
        report.train_loss.append(total_loss / len(xs))
        report.train_accuracy.append(correct / len(xs))
        report.val_loss.append(val_loss)
        report.val_auc.append(val_auc)

        key = _selection_key(val_auc, val_loss)
        if best_key is None or key > best_key:
            best_key, best, since_best = key, params.copy(), 0
            report.best_epoch = epoch + 1
        else:
            since_best += 1
        if log:
            log(f"epoch {epoch + 1:3d}  train_loss {report.train_loss[-1]:.4f}  "
                f"train_acc {report.train_accuracy[-1]:.3f}  val_loss {val_loss:.4f}  val_auc {val_auc:.4f}"
                + ("  *" if since_best == 0 else ""))
        if since_best >= cfg.patience:
            break

    report.wall_time_s = time.perf_counter() - start
    tape.clear()
    return best, report
