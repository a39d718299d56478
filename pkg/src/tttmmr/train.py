"""Joint training of encoder, task decoder and modality decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import tensorcore as tc
from .datamodel import MULTILABEL, REGRESSION_PIXEL, LABEL_NO_DATA
from .metrics import mean_average_precision, r_squared
from .model import (ModelConfig, ModelParams, batch_recon_losses, encode_graph, make_batch,
                    modality_graph, predict, prepare_samples, register, task_graph, task_loss_graph)

FINETUNE, LINEAR_PROBE = "finetune", "linear-probe"


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    max_lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    seed: int = 0
    mode: str = FINETUNE

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        if not 0 <= self.min_lr <= self.max_lr:
            raise ValueError("need 0 <= min_lr <= max_lr")
        if self.mode not in (FINETUNE, LINEAR_PROBE):
            raise ValueError(f"unknown mode {self.mode!r}")


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warm-up to ``max_lr`` then cosine decay to ``min_lr`` at the last step.

    The first update already uses ``max_lr / warmup_steps``.
    """
    total = config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside schedule of {total} steps")
    if step < warm:
        return config.max_lr * (step + 1) / warm
    span = total - warm - 1
    progress = 1.0 if span == 0 else (step - warm) / span
    return config.min_lr + 0.5 * (config.max_lr - config.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(params, grads, state: AdamState, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8):
    """One AdamW update with decoupled weight decay. Returns ``(params, state)``."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or state.m.shape != p.shape:
        raise ValueError("params, grads and optimizer state must align")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    p = p * (1 - lr * weight_decay)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p, AdamState(m, v, t)


@dataclass
class Checkpoint:
    params: ModelParams
    epoch: int
    val_metric: float
    history: list


def task_metric(preds: dict, samples: dict, cfg: ModelConfig) -> float:
    """R^2 (regression; pixel tasks over labeled pixels) or mAP (multilabel)."""
    ids = sorted(preds)
    if cfg.task.kind == MULTILABEL:
        return mean_average_precision(np.stack([samples[i].label for i in ids]),
                                      np.stack([preds[i] for i in ids]))
    if cfg.task.kind == REGRESSION_PIXEL:
        y = np.concatenate([samples[i].label for i in ids])
        f = np.concatenate([np.ravel(preds[i]) for i in ids])
        ok = y != LABEL_NO_DATA
        return r_squared(y[ok], f[ok])
    return r_squared([samples[i].label for i in ids], [preds[i] for i in ids])


def loss_terms(params: ModelParams, batch, cfg: ModelConfig, train_encoder: bool = True):
    """Build the JT graph. Returns ``(tape, task_loss, recon_mean, per_modality)``.

    Parameters are registered as ``enc.*``, ``task.*`` and ``mod.*``.
    """
    tape = tc.Tape()
    th = register(tape, params.encoder, "enc.", train_encoder)
    g = register(tape, params.task_decoder, "task.")
    a = register(tape, params.modality_decoder, "mod.")
    emb = encode_graph(tape.constant(batch.x), th)
    lt = task_loss_graph(task_graph(emb, g, cfg), batch, cfg)
    per = batch_recon_losses(modality_graph(emb, a, cfg), batch, cfg)
    rec = None
    for name in sorted(per):
        rec = per[name] if rec is None else tc.add(rec, per[name])
    if rec is not None:
        rec = tc.scale(rec, 1.0 / len(per))
    return tape, lt, rec, per


def joint_train(dataset, splits, params: ModelParams, cfg: ModelConfig, config: TrainConfig,
                stats, subset: int = 100, on_epoch: Optional[Callable] = None,
                samples: Optional[dict] = None) -> Checkpoint:
    """Train with task loss + mean reconstruction loss; keep the best-validation epoch.

    Task decoder sees only the task loss and the modality decoder only the
    reconstruction mean, so a single backward pass through their sum gives
    every store its own gradient. In linear-probe mode the encoder is held
    constant.
    """
    train_ids = sorted(splits.train(subset))
    val_ids = sorted(splits.validation)
    if not train_ids:
        raise ValueError("training split is empty")
    if samples is None:
        samples = prepare_samples(dataset, train_ids + val_ids, stats, cfg)
    train_s = [samples[i] for i in train_ids]
    val_s = {i: samples[i] for i in val_ids}

    finetune = config.mode == FINETUNE
    params = params.copy()
    stores = ["encoder", "task_decoder", "modality_decoder"] if finetune else ["task_decoder", "modality_decoder"]
    prefix = {"encoder": "enc.", "task_decoder": "task.", "modality_decoder": "mod."}
    states = {k: AdamState.zeros(getattr(params, k).size) for k in stores}

    n = len(train_s)
    steps_per_epoch = math.ceil(n / config.batch_size)
    step = 0
    best = None
    history = []
    for epoch in range(config.epochs):
        order = np.random.default_rng(config.seed + epoch).permutation(n)
        sums = {"task": 0.0, "recon": 0.0}
        per_sums: dict = {}
        lr = 0.0
        for j in range(steps_per_epoch):
            idx = order[j * config.batch_size:(j + 1) * config.batch_size]
            batch = make_batch([train_s[i] for i in idx], cfg, with_labels=True)
            lr = lr_at(step, config, steps_per_epoch)
            try:
                tape, lt, rec, per = loss_terms(params, batch, cfg, finetune)
                total = lt if rec is None else tc.add(lt, rec)
                grads = tc.backward(tape, total)
            except tc.NonFiniteError as exc:
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {exc}") from exc
            for k in stores:
                store = getattr(params, k)
                flat, states[k] = adamw_step(store.flat(), store.flatten_grads(grads, prefix[k]),
                                             states[k], lr, config.weight_decay)
                setattr(params, k, store.from_flat(flat))
            sums["task"] += float(lt.value)
            sums["recon"] += float(rec.value) if rec is not None else 0.0
            for name, t in per.items():
                per_sums[name] = per_sums.get(name, 0.0) + float(t.value)
            step += 1
        val = task_metric(predict(params, list(val_s.values()), cfg), val_s, cfg) if val_s else float("nan")
        entry = {
            "epoch": epoch, "lr": lr,
            "train_task_loss": sums["task"] / steps_per_epoch,
            "train_recon_loss": sums["recon"] / steps_per_epoch,
            "train_modality_losses": {k: v / steps_per_epoch for k, v in sorted(per_sums.items())},
            "val_metric": val,
        }
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if best is None or (val > best.val_metric) or (math.isnan(best.val_metric) and not math.isnan(val)):
            best = Checkpoint(params.copy(), epoch, val, history)
    best.history = history
    return best


def train_config_json(config: TrainConfig) -> dict:
    return asdict(config)
