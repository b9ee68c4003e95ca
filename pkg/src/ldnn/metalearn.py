"""Alternating two-timescale training: stochastic gradient steps on the
layer weights, with periodic steps on the activation sub-network weights
against the same loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

OPTIMIZERS = ("plain", "momentum", "adam")

SNAPSHOT_GRID = np.linspace(-6.0, 6.0, 201)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""


@dataclass
class TrainSchedule:
    """Cadence and step sizes for the inner/outer loops.

    ``outer_period`` is the number of inner steps between outer events;
    ``outer_steps`` how many outer updates fire per event.  ``optimizer``
    is one of plain (SGD), momentum, adam.
    """

    inner_lr: float = 1e-2
    outer_lr: float = 1e-3
    outer_period: int = 5
    outer_steps: int = 1
    batch_size: int = 100
    epochs: int = 20
    optimizer: str = "adam"
    seed: int = 0
    freeze_activations: bool = False
    snapshot_every: int = 0  # 0: pick ~16 evenly spaced snapshots

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.outer_period < 1 or self.outer_steps < 1:
            raise ValueError("outer_period and outer_steps must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


# ---------------------------------------------------------------------------
# Optimizers.

class PlainSgd:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, param: Tensor, grad: np.ndarray) -> None:
        param.assign(param.data - self.lr * grad)


class MomentumSgd:
    def __init__(self, lr: float, beta: float = 0.9):
        self.lr = lr
        self.beta = beta
        self._velocity = {}

    def update(self, param: Tensor, grad: np.ndarray) -> None:
        v = self._velocity.get(id(param))
        v = grad if v is None else self.beta * v + grad
        self._velocity[id(param)] = v
        param.assign(param.data - self.lr * v)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state = {}

    def update(self, param: Tensor, grad: np.ndarray) -> None:
        m, v, t = self._state.get(id(param), (0.0, 0.0, 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self._state[id(param)] = (m, v, t)
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        param.assign(param.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(kind: str, lr: float):
    if kind == "plain":
        return PlainSgd(lr)
    if kind == "momentum":
        return MomentumSgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


# ---------------------------------------------------------------------------
# Losses.

def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch."""
    return ad.softmax_cross_entropy(logits, labels)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over all elements."""
    return ad.mse(pred, target)


def batch_loss(params, config, xb, yb) -> Tensor:
    out, _, _ = nn.forward(params, config, xb)
    if config.task == "classification":
        return cross_entropy_loss(out, np.asarray(yb))
    return mse_loss(out, Tensor(np.asarray(yb, dtype=np.float64)))


def _checked_loss(params, config, xb, yb, where: str) -> tuple:
    loss = batch_loss(params, config, xb, yb)
    value = float(loss.data)
    if not np.isfinite(value):
        loss.node = None
        raise TrainingDiverged(f"non-finite training loss ({value}) during {where}")
    return loss, value


def inner_step(params, config, batch, schedule: TrainSchedule, optimizer=None) -> float:
    """One stochastic gradient update of the layer weights; sub-network
    weights receive gradients but are never touched."""
    xb, yb = batch
    loss, value = _checked_loss(params, config, xb, yb, "inner step")
    grads = ad.backward(loss)
    opt = optimizer if optimizer is not None else make_optimizer(schedule.optimizer, schedule.inner_lr)
    for p in params.theta():
        opt.update(p, grads[p])
    return value


def outer_step(params, config, batch, schedule: TrainSchedule, optimizer=None) -> float:
    """One gradient update of the activation sub-network weights on the same
    loss; layer weights stay bitwise unchanged."""
    xb, yb = batch
    loss, value = _checked_loss(params, config, xb, yb, "outer step")
    grads = ad.backward(loss)
    opt = optimizer if optimizer is not None else make_optimizer(schedule.optimizer, schedule.outer_lr)
    for p in params.theta_a():
        opt.update(p, grads[p])
    return value


# ---------------------------------------------------------------------------
# Full training loop and its history.

@dataclass
class TrainHistory:
    """Per-step losses, per-epoch validation metric, and periodic tabulated
    snapshots of every activation type (the evolution traces)."""

    records: list = field(default_factory=list)  # (step, epoch, phase, loss)
    val: list = field(default_factory=list)      # (epoch, metric)
    snapshot_grid: np.ndarray = None
    snapshots: dict = field(default_factory=dict)  # type index -> [(step, values)]


def _snapshot(history: TrainHistory, params, config, type_indices, step: int) -> None:
    for t in type_indices:
        values = nn.eval_activation(config.activations[t], history.snapshot_grid,
                                    params.subnets.get(t))
        history.snapshots.setdefault(t, []).append((step, np.asarray(values)))


def evaluate(params, config, dataset, task_kind: str = None) -> float:
    """Validation accuracy for classification, mean squared error for regression."""
    kind = config.task if task_kind is None else task_kind
    if kind not in nn.TASKS:
        raise ValueError(f"task_kind must be one of {nn.TASKS}")
    with ad.no_grad():
        out, _, _ = nn.forward(params, config, dataset.inputs)
        if kind == "classification":
            preds = np.argmax(out.data, axis=1)
            return float(np.mean(preds == np.asarray(dataset.targets)))
        return float(mse_loss(out, Tensor(dataset.targets)).data)


def train(config, schedule: TrainSchedule, train_set, val_set):
    """Run the alternating loop: shuffle each epoch, take ``outer_period``
    inner steps, then ``outer_steps`` outer steps on the current batch.

    Returns (params, history).  Deterministic given the schedule seed.
    """
    m = train_set.inputs.shape[0]
    if m == 0 or val_set.inputs.shape[0] == 0:
        raise ValueError("datasets must be nonempty")
    s_init, s_shuffle = np.random.SeedSequence(schedule.seed).spawn(2)
    params = nn.init_network(config, seed=s_init)
    rng = np.random.default_rng(s_shuffle)

    inner_opt = make_optimizer(schedule.optimizer, schedule.inner_lr)
    outer_opt = make_optimizer(schedule.optimizer, schedule.outer_lr)

    type_indices = sorted({idx for layer in config.layers for idx in layer.assignment})
    n_batches = (m + schedule.batch_size - 1) // schedule.batch_size
    total_steps = schedule.epochs * n_batches
    every = schedule.snapshot_every if schedule.snapshot_every > 0 else max(1, total_steps // 16)

    history = TrainHistory(snapshot_grid=SNAPSHOT_GRID.copy())
    _snapshot(history, params, config, type_indices, step=0)

    run_outer = bool(params.subnets) and not schedule.freeze_activations
    step = 0
    for epoch in range(schedule.epochs):
        perm = rng.permutation(m)
        for start in range(0, m, schedule.batch_size):
            idx = perm[start:start + schedule.batch_size]
            batch = (train_set.inputs[idx], train_set.targets[idx])
            loss = inner_step(params, config, batch, schedule, inner_opt)
            step += 1
            history.records.append((step, epoch, "inner", loss))
            if run_outer and step % schedule.outer_period == 0:
                for _ in range(schedule.outer_steps):
                    loss = outer_step(params, config, batch, schedule, outer_opt)
                    history.records.append((step, epoch, "outer", loss))
            if step % every == 0:
                _snapshot(history, params, config, type_indices, step)
        history.val.append((epoch, evaluate(params, config, val_set)))
    if type_indices and history.snapshots[type_indices[0]][-1][0] != step:
        _snapshot(history, params, config, type_indices, step)
    return params, history


def write_history_csv(history: TrainHistory, path) -> None:
    """Columns: step, epoch, train_loss, val_metric, phase.  The validation
    metric appears on each epoch's final row."""
    val_by_epoch = dict(history.val)
    last_row = {}
    for i, (_, epoch, _, _) in enumerate(history.records):
        last_row[epoch] = i
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,epoch,train_loss,val_metric,phase\n")
        for i, (step, epoch, phase, loss) in enumerate(history.records):
            metric = ""
            if last_row.get(epoch) == i and epoch in val_by_epoch:
                metric = repr(float(val_by_epoch[epoch]))
            fh.write(f"{step},{epoch},{repr(float(loss))},{metric},{phase}\n")


def write_activation_trace_csv(history: TrainHistory, type_idx: int, path) -> None:
    """Long-format evolution trace of one activation type: step, input, value."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,a,sigma\n")
        for step, values in history.snapshots[type_idx]:
            for a, v in zip(history.snapshot_grid, values):
                fh.write(f"{step},{repr(float(a))},{repr(float(v))}\n")
