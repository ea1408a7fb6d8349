"""MSE training with Adam, reduce-on-plateau learning rate and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import WindowSet
from .nn import Module

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    max_epochs: int = 150
    early_stop_patience: int = 15
    lr: float = 1e-3
    plateau_patience: int = 4
    plateau_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0
    min_delta: float = 1e-8

    def __post_init__(self):
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def mse_loss(pred, target) -> ad.Node:
    return ad.mse(ad.as_node(pred), target)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[ad.Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from the accumulated ``p.grad``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p in params:
        g = p.grad.astype(np.float64)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = (p.value - update).astype(p.value.dtype)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 4, factor: float = 0.1, min_delta: float = 1e-8):
        self.lr, self.patience, self.factor, self.min_delta = lr, patience, factor, min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


class EarlyStopping:
    def __init__(self, patience: int = 15, min_delta: float = 1e-8):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.best_epoch = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        """Returns True when training should stop after ``epoch``."""
        if val_loss < self.best - self.min_delta:
            self.best, self.best_epoch = val_loss, epoch
        return epoch - self.best_epoch >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    seconds: float


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val: float
    log: list[EpochRecord]
    stopped_early: bool


def evaluate_loss(model, windows: WindowSet, batch_size: int = 16) -> float:
    """Mean squared error over every window (64-bit accumulation)."""
    sse, count = 0.0, 0
    for x, y in windows.batches(batch_size):
        pred = model.predict(x)
        d = pred.astype(np.float64) - y
        sse += float(np.sum(d * d))
        count += d.size
    return sse / count


def _first_bad_gradient(params) -> str | None:
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            return p.name
    return None


def fit(
    model: Module,
    train: WindowSet,
    val: WindowSet,
    config: TrainConfig,
    log_path: str | Path | None = None,
    on_epoch=None,
) -> FitResult:
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be nonempty")
    params = model.parameters()
    adam = AdamState()
    sched = PlateauScheduler(config.lr, config.plateau_patience, config.plateau_factor, config.min_delta)
    stopper = EarlyStopping(config.early_stop_patience, config.min_delta)
    rng = np.random.default_rng(config.seed)
    records: list[EpochRecord] = []
    best_state, best_val, best_epoch = model.state_dict(), math.inf, 0
    stopped = False

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        order = rng.permutation(len(train))
        sse, count = 0.0, 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            x, y = train.batch(order[start : start + config.batch_size])
            model.zero_grad()
            pred = model(x)
            loss = ad.mse(pred, y)
            value = float(loss.value[0])
            if not math.isfinite(value):
                raise NumericAbort(f"non-finite loss at epoch {epoch}, batch {bi}")
            ad.backward(loss)
            bad = _first_bad_gradient(params)
            if bad is not None:
                raise NumericAbort(f"non-finite gradient in {bad} at epoch {epoch}, batch {bi}")
            adam_step(params, adam, lr)
            sse += value * y.size
            count += y.size
        train_mse = sse / count
        val_mse = evaluate_loss(model, val)
        if not math.isfinite(val_mse):
            raise NumericAbort(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, train_mse, val_mse, lr, time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_mse, val_mse, lr)
        if val_mse < best_val - config.min_delta:
            best_val, best_epoch, best_state = val_mse, epoch, model.state_dict()
        if on_epoch is not None:
            on_epoch(rec)
        sched.step(val_mse)
        if stopper.step(epoch, val_mse):
            stopped = True
            break

    if log_path is not None:
        write_log(log_path, records)
    model.load_state_dict(best_state)
    return FitResult(best_state, best_epoch, best_val, records, stopped)


def write_log(path: str | Path, records: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse", "lr", "seconds"])
        for r in records:
            w.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse), repr(r.lr), f"{r.seconds:.3f}"])
