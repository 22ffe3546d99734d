"""Training: cross-entropy with an L2 penalty on the dense kernel, Adam,
reduce-on-plateau learning rate and early stopping on the training loss."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import Sample, stack_samples
from .nn import ModelParams, ShapeMismatch, init_params, model_backward, model_forward

log = logging.getLogger(__name__)

P_CLAMP = 1e-12


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    lr_factor: float = 0.1
    plateau_patience: int = 5
    stop_patience: int = 10
    max_epochs: int = 200
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    lambda_l2: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_init:
            raise ValueError("need 0 < lr_min <= lr_init")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""
    best_loss: float = float("inf")
    best_epoch: int = 0
    adam_epsilon: float = 1e-7
    seed: int = 0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def lrs(self) -> list[float]:
        return [e.lr for e in self.epochs]

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].loss if self.epochs else float("nan")

    def summary(self) -> dict:
        return {"stop_reason": self.stop_reason, "best_loss": self.best_loss,
                "best_epoch": self.best_epoch, "final_loss": self.final_loss,
                "epochs": len(self.epochs), "adam_epsilon": self.adam_epsilon,
                "seed": self.seed}

    def to_jsonl(self, with_timing: bool = False) -> str:
        """One JSON object per epoch.

        Wall time is left out unless asked for so that runs with the same seed
        serialize identically. The run summary is kept apart, see :meth:`summary`.
        """
        lines = []
        for e in self.epochs:
            d = asdict(e)
            if not with_timing:
                d.pop("wall_time")
            lines.append(json.dumps(d, sort_keys=True) + "\n")
        return "".join(lines)

    def write(self, path: str | Path, with_timing: bool = False) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(with_timing))
        return path

    def write_summary(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------
# loss

def loss(probs, labels, dense_weights=None, lam: float = 0.0) -> float:
    """Mean binary cross-entropy on the IMI probability plus ``lam * sum(w**2)``.

    ``1 - p`` is read from the HC column of ``probs`` rather than formed by
    subtraction; both are clamped to [1e-12, 1 - 1e-12] before the log.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(probs[:, 1], P_CLAMP, 1 - P_CLAMP)
    q = np.clip(probs[:, 0], P_CLAMP, 1 - P_CLAMP)
    data = float(np.mean(-y * np.log(p) - (1 - y) * np.log(q)))
    if dense_weights is not None and lam:
        data += lam * float(np.sum(np.square(dense_weights)))
    return data


def loss_grad(probs, labels) -> np.ndarray:
    """Gradient of the data term of :func:`loss` with respect to ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)[:, None]
    target = np.concatenate([1 - y, y], axis=1)
    inside = (probs > P_CLAMP) & (probs < 1 - P_CLAMP)
    safe = np.clip(probs, P_CLAMP, 1 - P_CLAMP)
    return np.where(inside, -target / safe, 0.0) / len(y)


# ---------------------------------------------------------------------------
# optimizer and schedule

def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, cfg: TrainConfig = TrainConfig()):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if set(grads) - set(params):
        raise ShapeMismatch(f"gradients for unknown tensors {sorted(set(grads) - set(params))}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)
    return params, state


def epochs_since_improvement(history: Sequence[float]) -> int:
    """Epochs since the best-so-far loss last strictly decreased."""
    if not history:
        return 0
    best_idx = int(np.argmin(history))     # first occurrence of the minimum
    return len(history) - 1 - best_idx


def lr_schedule(history: Sequence[float], current_lr: float,
                cfg: TrainConfig = TrainConfig()) -> float:
    """Learning rate for the next epoch given the per-epoch training losses so far.

    The rate drops by ``lr_factor`` (floored at ``lr_min``) each time
    ``plateau_patience`` epochs pass without a new best loss; the waiting
    counter restarts after every drop.
    """
    stale = epochs_since_improvement(history)
    if stale > 0 and stale % cfg.plateau_patience == 0:
        return max(current_lr * cfg.lr_factor, cfg.lr_min)
    return current_lr


def should_stop(history: Sequence[float], cfg: TrainConfig = TrainConfig()) -> bool:
    return epochs_since_improvement(history) >= cfg.stop_patience


# ---------------------------------------------------------------------------
# loop

def train_step(params: ModelParams, xb, yb, state: AdamState, lr: float,
               cfg: TrainConfig) -> tuple[float, int]:
    probs, _, cache = model_forward(xb, params, "train")
    batch_loss = loss(probs, yb, params["dense/kernel"], cfg.lambda_l2)
    grads = model_backward(loss_grad(probs, yb), cache)
    grads["dense/kernel"] = grads["dense/kernel"] + 2 * cfg.lambda_l2 * params["dense/kernel"]
    adam_step(params.trainables(), grads, state, lr, cfg)
    correct = int(np.sum((probs[:, 1] >= probs[:, 0]) == (yb == 1)))
    return batch_loss, correct


def fit(dataset: Sequence[Sample] | tuple[np.ndarray, np.ndarray],
        params: ModelParams | None = None, cfg: TrainConfig = TrainConfig(),
        ) -> tuple[ModelParams, TrainLog]:
    """Mini-batch training; returns end-of-training parameters and the epoch log.

    ``dataset`` is a list of samples or an ``(x, y)`` pair of arrays. ``params``
    is trained in place; when omitted a model is initialised from ``cfg.seed``.
    """
    if isinstance(dataset, tuple):
        x, y = (np.asarray(a) for a in dataset)
    else:
        if len(dataset) == 0:
            raise EmptyDataset("cannot train on an empty dataset")
        x, y = stack_samples(dataset)
    if len(x) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(rng)
    state = AdamState.zeros_like(params.trainables())
    log_ = TrainLog(adam_epsilon=cfg.adam_epsilon, seed=cfg.seed)
    lr = cfg.lr_init
    n = len(x)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch_loss, ok = train_step(params, x[idx], y[idx], state, lr, cfg)
            total += batch_loss * len(idx)
            correct += ok
        rec = EpochRecord(epoch, total / n, correct / n, lr, time.perf_counter() - t0)
        log_.epochs.append(rec)
        log.debug("epoch %d loss %.6f acc %.4f lr %.1e", epoch, rec.loss, rec.accuracy, lr)
        if rec.loss < log_.best_loss:
            log_.best_loss, log_.best_epoch = rec.loss, epoch
        history = log_.losses
        if should_stop(history, cfg):
            log_.stop_reason = "early_stop"
            break
        lr = lr_schedule(history, lr, cfg)
    else:
        log_.stop_reason = "max_epochs"
    return params, log_
