"""Test-time training with multimodal reconstruction.

For each test batch the encoder takes a few SGD steps along the average of
per-modality *unit* reconstruction gradients (task-modality decoder frozen,
task decoder untouched), predicts, and is then reset to its post-JT state.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensorcore as tc
from .model import (ModelConfig, ModelParams, batch_recon_losses, encode_graph, make_batch,
                    modality_graph, register, task_graph, task_loss_graph)
from .splits import geographic_partition, random_partition

log = logging.getLogger(__name__)

RANDOM, GEOGRAPHIC = "random", "geographic"
ZERO_NORM = 1e-30


@dataclass(frozen=True)
class TttConfig:
    batch_size: int = 8
    lr: float = 1e-2
    max_iters: int = 5
    batching: str = RANDOM
    seed: int = 0
    select_by: str = "loss"

    def __post_init__(self):
        if self.batch_size < 1 or self.lr < 0 or self.max_iters < 1:
            raise ValueError("need batch_size >= 1, lr >= 0 and max_iters >= 1")
        if self.batching not in (RANDOM, GEOGRAPHIC):
            raise ValueError(f"unknown batching {self.batching!r}")
        if self.select_by not in ("loss", "metric"):
            raise ValueError("select_by must be 'loss' or 'metric'")


@dataclass
class BatchTrace:
    batch_id: int
    tile_ids: list
    bbox: Optional[tuple]
    recon_losses: list = field(default_factory=list)  # per iteration {modality: R_m}
    task_losses: list = field(default_factory=list)
    chosen_iteration: int = 0
    failed: bool = False
    encoder_checksum: str = ""
    prediction_digest: str = ""

    def to_json(self) -> dict:
        return {
            "batch_id": self.batch_id, "tile_ids": self.tile_ids,
            "bbox": list(self.bbox) if self.bbox is not None else None,
            "recon_losses": self.recon_losses, "task_losses": self.task_losses,
            "chosen_iteration": self.chosen_iteration, "failed": self.failed,
            "encoder_checksum": self.encoder_checksum,
            "prediction_digest": self.prediction_digest,
        }


# --------------------------------------------------------------------------
# the update rule


def batch_reconstruction_losses(batch, params: ModelParams, cfg: ModelConfig):
    """Per-modality batch losses ``R_m`` on a tape with the encoder as the only leaves.

    Returns ``(tape, {modality: Tensor}, absent, predictions)``. A modality
    is averaged over the tiles where it is present; ``absent`` lists those
    present on no tile.
    """
    if not batch.ids:
        raise ValueError("empty batch")
    tape = tc.Tape()
    th = register(tape, params.encoder, "enc.")
    emb = encode_graph(tape.constant(batch.x), th)
    rec = modality_graph(emb, register(tape, params.modality_decoder, "", False), cfg)
    losses = batch_recon_losses(rec, batch, cfg)
    if not losses:
        raise ValueError("every task modality is absent on every tile of the batch")
    pred = task_graph(emb, register(tape, params.task_decoder, "", False), cfg)
    return tape, losses, batch.absent, pred


def modality_gradients(tape: tc.Tape, losses: dict, params: ModelParams) -> dict:
    """Flat encoder gradient of each ``R_m``."""
    names = ["enc." + k for k in params.encoder.names]
    return {m: params.encoder.flatten_grads(tc.backward(tape, losses[m], wrt=names), "enc.")
            for m in sorted(losses)}


def normalized_mean_gradient(grads: dict, absent=frozenset()) -> np.ndarray:
    """Mean over present modalities of ``g_m / ||g_m||``.

    Zero-norm gradients are skipped; if nothing is left the result is zero.
    """
    units = []
    size = None
    for m in sorted(grads):
        g = np.asarray(grads[m], dtype=np.float64)
        size = g.size
        if m in absent:
            continue
        norm = tc.grad_norm(g)
        if norm <= ZERO_NORM:
            continue
        units.append(g / norm)
    if size is None:
        raise ValueError("no gradients given")
    if not units:
        return np.zeros(size)
    return np.mean(units, axis=0)


def ttt_update(theta, direction, lr: float) -> np.ndarray:
    """SGD step on the flat encoder vector: ``theta - lr * direction``."""
    theta = np.asarray(theta, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if theta.shape != direction.shape:
        raise ValueError("direction does not align with the encoder parameters")
    return theta - lr * direction


# --------------------------------------------------------------------------
# batching


def make_batches(ids, locations: dict, config: TttConfig) -> list:
    """``[(tile_ids, bbox | None)]`` per the configured batching mode."""
    ids = sorted(ids)
    if len(ids) < config.batch_size:
        return [(ids, None)] if ids else []
    if config.batching == GEOGRAPHIC:
        return [(b.tile_ids, b.bbox) for b in
                geographic_partition([(i, locations[i]) for i in ids], config.batch_size)]
    return [(b, None) for b in random_partition(ids, config.batch_size, config.seed)]


# --------------------------------------------------------------------------
# adaptation


def _batch_task_loss(pred: tc.Tensor, batch, cfg) -> float:
    return float(task_loss_graph(pred, batch, cfg).value)


def adapt_batch(params: ModelParams, batch, cfg: ModelConfig, lr: float, iters: int,
                with_labels: bool = False):
    """Run ``iters`` adaptation steps from ``params``.

    Returns ``(predictions per iteration, recon losses per iteration, task
    losses per iteration or [])``; index ``i`` is the state after ``i``
    updates. ``params`` is not modified.
    """
    enc = params.encoder
    current = ModelParams(enc, params.task_decoder, params.modality_decoder)
    preds, recs, tasks = [], [], []
    for i in range(iters + 1):
        tape, losses, absent, pred = batch_reconstruction_losses(batch, current, cfg)
        preds.append(pred.value.copy())
        recs.append({m: float(t.value) for m, t in sorted(losses.items())})
        if with_labels:
            tasks.append(_batch_task_loss(pred, batch, cfg))
        if i == iters:
            break
        direction = normalized_mean_gradient(modality_gradients(tape, losses, current), absent)
        theta = ttt_update(current.encoder.flat(), direction, lr)
        current = ModelParams(current.encoder.from_flat(theta), params.task_decoder, params.modality_decoder)
    return preds, recs, tasks


def _batch_metric(pred, batch, cfg) -> float:
    from .train import task_metric

    class _S:  # minimal sample stand-in carrying a label
        def __init__(self, label):
            self.label = label

    ids = list(range(len(batch.ids)))
    return task_metric({i: pred[i] for i in ids}, {i: _S(batch.label[i]) for i in ids}, cfg)


def aggregate_best_iterations(bests) -> int:
    """Mean of per-batch best iterations, rounded half to even."""
    if len(bests) == 0:
        raise ValueError("no batches")
    return int(round(float(np.mean(bests))))


def select_iterations(samples: dict, params: ModelParams, cfg: ModelConfig, config: TttConfig,
                      locations: dict):
    """Choose the iteration count on labeled validation tiles.

    Each validation batch is adapted for ``max_iters`` steps; its best
    iteration (0 = no adaptation) minimizes the batch task loss (or
    maximizes the task metric). Returns ``(round-half-even mean, bests)``.
    """
    if not samples:
        raise ValueError("empty validation set")
    bests = []
    for ids, _ in make_batches(list(samples), locations, config):
        batch = make_batch([samples[i] for i in ids], cfg, with_labels=True)
        try:
            preds, _, tasks = adapt_batch(params, batch, cfg, config.lr, config.max_iters, with_labels=True)
        except tc.NonFiniteError:
            bests.append(0)
            continue
        if config.select_by == "metric":
            scores = []
            for p in preds:
                try:
                    scores.append(-_batch_metric(p, batch, cfg))
                except ValueError:
                    scores.append(np.inf)
            bests.append(int(np.argmin(scores)))
        else:
            bests.append(int(np.argmin(tasks)))
    return aggregate_best_iterations(bests), bests


def _digest(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]


def run_ttt(samples: dict, params: ModelParams, cfg: ModelConfig, config: TttConfig,
            iterations: int, locations: dict, batches=None):
    """Adapt per batch, predict, reset. Returns ``(predictions by tile id, traces)``."""
    if not 0 <= iterations <= config.max_iters:
        raise ValueError(f"iterations must be in [0, {config.max_iters}]")
    reference = params.encoder.checksum()
    if batches is None:
        batches = make_batches(list(samples), locations, config)
    out, traces = {}, []
    for bid, (ids, bbox) in enumerate(batches):
        check = params.encoder.checksum()
        if check != reference:
            raise RuntimeError("encoder was not restored to its post-JT state")
        batch = make_batch([samples[i] for i in ids], cfg)
        trace = BatchTrace(bid, list(batch.ids), bbox, encoder_checksum=check)
        try:
            preds, recs, _ = adapt_batch(params, batch, cfg, config.lr, iterations)
            final = preds[iterations]
            trace.chosen_iteration = iterations
        except tc.NonFiniteError as exc:
            log.warning("batch %d: adaptation diverged (%s); using iteration 0", bid, exc)
            preds, recs, _ = adapt_batch(params, batch, cfg, config.lr, 0)
            final = preds[0]
            trace.failed = True
        trace.recon_losses = recs
        trace.prediction_digest = _digest(final)
        for tid, p in zip(batch.ids, final):
            out[tid] = p
        traces.append(trace)
    return out, traces
