"""Maximum-likelihood training: gradients, Adam, learning-rate schedule and early stopping.

Reverse-mode gradients come from torch autograd; the optimizer and schedule
are implemented here so that clamping and decay follow the training protocol
exactly.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .qpc import PC_CLAMP, ParamMode, QpcModel

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A loss or gradient became NaN."""


def _as_long(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.long()
    return torch.from_numpy(np.array(x, dtype=np.int64))


def backward(loss: torch.Tensor, params) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``."""
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def lr_at(step: int, lr_max: float = 5e-3, lr_min: float = 1e-4, period: int = 500) -> float:
    """Cosine annealing from ``lr_max`` to ``lr_min`` with a warm restart every ``period`` steps."""
    t = step % period
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / period))


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        params = list(params)
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
              clamp_min: float | None = None) -> None:
    """In-place Adam update with decoupled weight decay and optional post-update clamping."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        if weight_decay:
            p.mul_(1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
        if clamp_min is not None:
            p.clamp_(min=clamp_min)


@dataclass
class TrainConfig:
    """Training protocol.  ``cycle_steps`` optimizer steps make one cycle, after
    which the validation set is scored; training stops once ``patience``
    cycles pass without the total validation NLL improving by ``delta`` nats."""

    batch_size: int = 256
    cycle_steps: int = 250
    delta: float = 0.0
    patience: int = 5
    max_epochs: int = 200
    max_steps: int | None = None
    lr_max: float = 5e-3
    lr_min: float = 1e-4
    lr_period: int = 500
    weight_decay: float = 0.01
    pc_lr: float = 0.01
    seed: int = 0
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.cycle_steps < 1:
            raise ValueError("cycle_steps must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class CycleRecord:
    cycle: int
    step: int
    train_nll: float
    valid_nll: float
    valid_bpd: float
    lr: float
    wall_seconds: float


HISTORY_COLUMNS = ("cycle", "step", "train_nll", "valid_nll", "valid_bpd", "lr", "wall_seconds")


@dataclass
class TrainHistory:
    records: list[CycleRecord] = field(default_factory=list)
    best_cycle: int = 0
    best_valid_nll: float = math.inf
    stopped_early: bool = False

    @property
    def valid_nll(self) -> list[float]:
        return [r.valid_nll for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([r.cycle, r.step, repr(r.train_nll), repr(r.valid_nll), repr(r.valid_bpd),
                            repr(r.lr), f"{r.wall_seconds:.3f}"])


@torch.no_grad()
def mean_nll(model: QpcModel, x, batch_size: int = 1024, mask=None) -> float:
    """Mean negative normalized log-likelihood over the rows of ``x``."""
    x = _as_long(x)
    if len(x) == 0:
        raise ValueError("cannot score an empty dataset")
    mat = model.materialize()
    log_z = model.log_partition(mat)
    total = 0.0
    for start in range(0, len(x), batch_size):
        total += float((model.forward(x[start:start + batch_size], mask, mat) - log_z).sum())
    return -total / len(x)


def _bpd(nll: float, D: int) -> float:
    return nll / (D * math.log(2))


def train(model: QpcModel, train_x, valid_x, config: TrainConfig = TrainConfig(), progress=None) -> TrainHistory:
    """Minimize the mean negative log-likelihood; restores the best-validation parameters.

    ``progress``, if given, is called with each :class:`CycleRecord`.
    """
    train_x = _as_long(train_x)
    valid_x = _as_long(valid_x)
    if len(train_x) == 0 or len(valid_x) == 0:
        raise ValueError("training and validation sets must be non-empty")
    model.request(train_x[:1])  # shape/range check
    D = train_x.shape[1]
    pc = model.mode is ParamMode.PC
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train_x) / config.batch_size)
    max_steps = config.max_epochs * steps_per_epoch
    if config.max_steps is not None:
        max_steps = min(max_steps, config.max_steps)

    history = TrainHistory()
    start = time.perf_counter()
    v0 = mean_nll(model, valid_x, config.eval_batch_size)
    lr0 = config.pc_lr if pc else lr_at(0, config.lr_max, config.lr_min, config.lr_period)
    rec = CycleRecord(0, 0, math.nan, v0, _bpd(v0, D), lr0, time.perf_counter() - start)
    history.records.append(rec)
    history.best_valid_nll, history.best_cycle = v0, 0
    best_state = copy.deepcopy(model.state_dict())
    reference = v0 * len(valid_x)
    stale = 0
    if progress:
        progress(rec)

    step, cycle, order, cursor = 0, 0, rng.permutation(len(train_x)), 0
    while step < max_steps:
        cycle += 1
        losses = []
        for _ in range(config.cycle_steps):
            if step >= max_steps:
                break
            if cursor >= len(order):
                order, cursor = rng.permutation(len(train_x)), 0
            idx = order[cursor:cursor + config.batch_size]
            cursor += config.batch_size
            lr = config.pc_lr if pc else lr_at(step, config.lr_max, config.lr_min, config.lr_period)
            mat = model.materialize()
            loss = -(model.forward(train_x[idx], None, mat) - model.log_partition(mat)).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}")
            grads = backward(loss, params)
            adam_step(params, grads, state, lr, 0.0 if pc else config.weight_decay, PC_CLAMP if pc else None)
            losses.append(loss.item())
            step += 1
        v = mean_nll(model, valid_x, config.eval_batch_size)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite validation NLL after cycle {cycle}")
        rec = CycleRecord(cycle, step, float(np.mean(losses)) if losses else math.nan, v, _bpd(v, D), lr,
                          time.perf_counter() - start)
        history.records.append(rec)
        logger.info("cycle %d step %d train %.4f valid %.4f bpd %.4f", cycle, step, rec.train_nll, v, rec.valid_bpd)
        if progress:
            progress(rec)
        if v < history.best_valid_nll:
            history.best_valid_nll, history.best_cycle = v, cycle
            best_state = copy.deepcopy(model.state_dict())
        total = v * len(valid_x)
        if total < reference - config.delta:
            reference, stale = total, 0
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                break
    model.load_state_dict(best_state)
    return history
