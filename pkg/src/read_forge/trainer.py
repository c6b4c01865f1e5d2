"""Teacher-forced training with Adam, early stopping and a log-spaced lr grid."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingError
from .tasks import Split, TaskSpec, make_task
from .tunable import TunableModel

log = logging.getLogger(__name__)

LR_RANGE = (1e-6, 3e-3)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 5
    batch_size: int = 32
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs, patience and batch_size must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")

    @property
    def canonical(self) -> bool:
        return LR_RANGE[0] <= self.lr <= LR_RANGE[1]

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam without weight decay. Updates replace ``.data`` (never in place)."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: T.GradientMap) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]  # moments are private, so update them in place
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_token_acc: float
    val_seq_acc: float
    tape_bytes_max: int
    tape_bytes_mean: float


@dataclass
class RunMetrics:
    method: str
    lr: float
    initial_val_token_acc: float
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_token_acc: float = 0.0
    test_token_acc: float = 0.0
    test_seq_acc: float = 0.0
    steps: int = 0
    steps_to_best: int = 0
    wall_time: float = 0.0  # not written to metric files (non-deterministic)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("epochs")
        out.pop("wall_time")
        return out


def evaluate(model: TunableModel, split: Split, batch_size: int = 256) -> tuple[float, float]:
    """Teacher-forced (token accuracy, sequence accuracy) without recording."""
    correct = total = seq_ok = 0
    with T.frozen():
        for start in range(0, len(split), batch_size):
            b = split.batch(np.arange(start, min(start + batch_size, len(split))))
            pred = model.logits(b.X, b.Y_in, b.src_mask, b.tgt_mask).data.argmax(axis=-1)
            hit = (pred == b.Y_out) & b.tgt_mask
            correct += int(hit.sum())
            total += int(b.tgt_mask.sum())
            seq_ok += int(np.all(hit | ~b.tgt_mask, axis=1).sum())
    return correct / total, seq_ok / len(split)


def train_step(model: TunableModel, batch: Split, optimizer: Adam) -> tuple[float, int]:
    tape = T.Tape()
    with tape:
        loss = model.loss(batch.X, batch.Y_in, batch.Y_out, batch.src_mask, batch.tgt_mask)
    saved = tape.saved_bytes
    grads = T.backward(tape, loss)
    optimizer.step(grads)
    return loss.item(), saved


def train(model: TunableModel, task: dict[str, Split] | TaskSpec, cfg: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> RunMetrics:
    """Optimise ``model`` in place; the best-validation parameters are restored at the end."""
    splits = make_task(task) if isinstance(task, TaskSpec) else task
    train_split, val_split = splits["train"], splits["val"]
    params = model.trainable()
    if not params:
        raise ConfigError("model has no trainable parameters")
    optimizer = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    started = time.perf_counter()

    init_acc, _ = evaluate(model, val_split)
    metrics = RunMetrics(model.method, cfg.lr, init_acc, best_val_token_acc=init_acc)
    best_state = model.snapshot()
    step, stale = 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_split))
        losses, saved = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = train_split.batch(order[start:start + cfg.batch_size])
            loss, nbytes = train_step(model, batch, optimizer)
            step += 1
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at step {step}")
            losses.append(loss)
            saved.append(nbytes)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        val_tok, val_seq = evaluate(model, val_split)
        record = EpochRecord(epoch, step, float(np.mean(losses)), val_tok, val_seq,
                             int(max(saved)), float(np.mean(saved)))
        metrics.epochs.append(record)
        log.info("%s epoch %d step %d loss %.4f val_acc %.4f", model.method, epoch, step,
                 record.train_loss, val_tok)
        if on_epoch is not None:
            on_epoch(record)
        if val_tok > metrics.best_val_token_acc:
            metrics.best_val_token_acc = val_tok
            metrics.best_epoch = epoch
            metrics.steps_to_best = step
            best_state = model.snapshot()
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience or val_tok == 1.0:
            break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    model.restore(best_state)
    metrics.steps = step
    metrics.test_token_acc, metrics.test_seq_acc = evaluate(model, splits["test"])
    metrics.wall_time = time.perf_counter() - started
    return metrics


def lr_grid(grid_size: int, low: float = LR_RANGE[0], high: float = LR_RANGE[1]) -> list[float]:
    if grid_size < 2:
        raise ConfigError("grid_size must be >= 2")
    grid = list(np.geomspace(low, high, grid_size))
    grid[0], grid[-1] = low, high
    return [float(x) for x in grid]


def lr_search(model_factory: Callable[[], TunableModel], task: dict[str, Split] | TaskSpec,
              grid_size: int, base: TrainConfig | None = None) -> tuple[TrainConfig, list[RunMetrics]]:
    """Train a fresh model per grid point; best validation wins, ties go to the smaller lr."""
    base = base or TrainConfig()
    splits = make_task(task) if isinstance(task, TaskSpec) else task
    runs, best_cfg, best_score = [], None, -np.inf
    for lr in lr_grid(grid_size):
        cfg = TrainConfig(**{**base.to_dict(), "lr": lr})
        metrics = train(model_factory(), splits, cfg)
        runs.append(metrics)
        if metrics.best_val_token_acc > best_score:
            best_cfg, best_score = cfg, metrics.best_val_token_acc
    return best_cfg, runs
