"""MSE objective, AdamW, cosine schedule and the early-stopped train loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .data import WindowSet
from .model import ForecastModel, forward
from .seeding import stream
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, history: list[dict]):
        super().__init__(msg)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-6
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    clip_norm: float = 1.0
    min_lr_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError(f"invalid TrainConfig: {self}")
        if self.max_epochs < 0 or self.weight_decay < 0:
            raise ValueError(f"invalid TrainConfig: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def mse_loss(pred, target):
    return T.mean_squared_error(pred if isinstance(pred, Tensor) else Tensor(pred), target)


def decays(name: str) -> bool:
    """Norm gains/biases and the positional table are excluded from weight decay."""
    if name == "pos":
        return False
    parts = name.split(".")
    return not (len(parts) >= 2 and parts[-2].startswith("ln"))


def cosine_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return cfg.lr
    frac = min(step, total_steps - 1) / (total_steps - 1)
    floor = cfg.min_lr_ratio * cfg.lr
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})  # fmt: skip


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    lr: float | None = None,
) -> tuple[dict[str, Tensor], AdamState]:
    """One decoupled-weight-decay Adam update; returns new params and state.

    Pure: inputs are not modified.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    lr = cfg.lr if lr is None else lr
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * (g * g)
        w = p.data
        if cfg.weight_decay and decays(k):
            w = w * (1.0 - lr * cfg.weight_decay)
        w = w - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_params[k] = Tensor._wrap(w, requires_grad=p.requires_grad)
        new_params[k].name = k
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(t, new_m, new_v)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def loss_and_grads(model: ForecastModel, batch: WindowSet) -> tuple[float, dict[str, np.ndarray]]:
    names = list(model.params)
    with T.GradTape() as tape:
        pred, _ = forward(model, batch.inputs)
        loss = T.mean_squared_error(pred, batch.targets.astype(model.dtype))
    gs = tape.gradient(loss, [model.params[k] for k in names])
    return float(loss.data), dict(zip(names, gs))


def evaluate_mse(model: ForecastModel, windows: WindowSet, batch_size: int = 256) -> float:
    total = 0.0
    count = 0
    for b in windows.batches(batch_size):
        pred, _ = forward(model, b.inputs)
        diff = pred.data - b.targets
        total += float((diff * diff).sum())
        count += diff.size
    return total / count


def train(
    model: ForecastModel,
    windows_train: WindowSet,
    windows_val: WindowSet,
    cfg: TrainConfig,
    history_path=None,
) -> tuple[ForecastModel, list[dict]]:
    """Mini-batch AdamW with early stopping on validation MSE.

    The best-on-validation parameters are restored before returning.
    ``history_path``, if given, receives one JSON line per epoch.
    """
    if len(windows_train) == 0 or len(windows_val) == 0:
        raise ValueError("train and validation windows must be nonempty")
    history: list[dict] = []
    if cfg.max_epochs == 0:
        return model, history
    rng = stream(cfg.seed, "train:shuffle")
    n = len(windows_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    state = AdamState.zeros(model.params)
    best_val = math.inf
    best_params = model.params
    bad_epochs = 0
    step = 0
    fh = open(history_path, "w") if history_path else None
    try:
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(n)
            running = 0.0
            lr = cfg.lr
            for s in range(steps_per_epoch):
                idx = np.sort(order[s * cfg.batch_size : (s + 1) * cfg.batch_size])
                loss, grads = loss_and_grads(model, windows_train.subset(idx))
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", history)
                grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
                lr = cosine_lr(cfg, step, total_steps)
                params, state = adamw_step(model.params, grads, state, cfg, lr)
                model = model.with_params(params)
                running += loss * len(idx)
                step += 1
            val = evaluate_mse(model, windows_val)
            rec = {"epoch": epoch, "train_mse": running / n, "val_mse": val, "lr": lr}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            log.info("epoch %d train %.6f val %.6f", epoch, rec["train_mse"], val)
            if not math.isfinite(val):
                raise TrainingDiverged(f"validation loss diverged at epoch {epoch}", history)
            if val < best_val:
                best_val, best_params, bad_epochs = val, model.params, 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
    finally:
        if fh:
            fh.close()
    return model.with_params(best_params), history


def finetune_config(cfg: TrainConfig) -> TrainConfig:
    """Fine-tuning reuses the training recipe with half the epoch budget."""
    return replace(cfg, max_epochs=max(1, cfg.max_epochs // 2) if cfg.max_epochs else 0)


def finetune(
    model: ForecastModel,
    windows_train: WindowSet,
    windows_val: WindowSet,
    cfg: TrainConfig,
    history_path=None,
) -> tuple[ForecastModel, list[dict]]:
    """Post-prune realignment: the ``train`` loop with every retained parameter trainable.

    Pass ``finetune_config(cfg)`` for the halved epoch budget used by the pipeline.
    """
    if model.config.layers >= 2 and model.n_layers < 2:
        raise ValueError("fine-tuning expects at least 2 retained layers")
    return train(model, windows_train, windows_val, cfg, history_path)
