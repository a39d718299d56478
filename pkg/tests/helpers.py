"""Shared builders and independent oracles for the test suite."""

import itertools

import numpy as np

from tttmmr import datamodel as dm
from tttmmr.model import ModelConfig, ModelParams, ParamStore, Sample, init_params

FD_STEP = 1e-5


def tiny_schema():
    """Every modality kind at small width, so full finite-difference sweeps stay cheap."""
    C, K = dm.CONTINUOUS, dm.CATEGORICAL
    return (
        dm.ModalitySchema("optical", dm.PIXEL, C, 2, -1.0),
        dm.ModalitySchema("radar", dm.PIXEL, C, 1, -1.0),
        dm.ModalitySchema("landcover", dm.PIXEL, K, 1, 3.0, 3),
        dm.ModalitySchema("climate", dm.TILE, C, 2, -1.0),
        dm.ModalitySchema("zone", dm.TILE, K, 1, 4.0, 4),
    )


def tiny_config(kind=dm.REGRESSION_TILE, tile_size=4, patch_size=2, embed_dim=3, classes=3):
    task = dm.Task(kind, classes if kind == dm.MULTILABEL else 1)
    return ModelConfig(tiny_schema(), task, tile_size, patch_size, embed_dim, ("optical",))


def random_params(cfg, rng, scale=0.7) -> ModelParams:
    """Dense random weights; unlike the initializer, biases and layer-norm terms are non-trivial."""
    base = init_params(cfg, int(rng.integers(1 << 30)))

    def perturb(store):
        return ParamStore({k: rng.normal(0, scale, size=v.shape) for k, v in store.arrays.items()})

    return ModelParams(perturb(base.encoder), perturb(base.task_decoder), perturb(base.modality_decoder))


def random_sample(cfg, rng, tile_id, missing=(), invalid_rate=0.2) -> Sample:
    """A decoder-layout sample with random targets, some of them masked."""
    hw = cfg.hw[0] * cfg.hw[1]
    x = rng.normal(size=(cfg.n_patches, cfg.patch_features))
    targets = {}
    for m in cfg.schema:
        if m.name in missing:
            continue
        if m.scale == dm.PIXEL:
            shape = (hw,) if m.kind == dm.CATEGORICAL else (hw, m.bands)
        else:
            shape = (1,) if m.kind == dm.CATEGORICAL else (m.bands,)
        ok = rng.random(shape) >= invalid_rate
        ok.flat[0] = True
        if m.kind == dm.CATEGORICAL:
            t = rng.integers(0, m.num_classes, size=shape)
        else:
            t = rng.normal(size=shape)
        targets[m.name] = (t, ok)
    if cfg.task.kind == dm.REGRESSION_TILE:
        label, mask = np.array(rng.normal()), np.array(True)
    elif cfg.task.kind == dm.REGRESSION_PIXEL:
        label = rng.normal(size=hw)
        mask = rng.random(hw) < 0.5
        mask[0] = True
        label = np.where(mask, label, dm.LABEL_NO_DATA)
    else:
        label = (rng.random(cfg.task.num_classes) < 0.5).astype(float)
        mask = np.ones(cfg.task.num_classes, bool)
    return Sample(tile_id, x, targets, label, mask)


def central_difference(f, arrays: dict, name: str, flat_index: int, h=FD_STEP):
    """Central difference of ``f(arrays)`` (a dict of scalar outputs) along one coordinate."""
    a = arrays[name]
    orig = a.flat[flat_index]
    a.flat[flat_index] = orig + h
    up = f()
    a.flat[flat_index] = orig - h
    down = f()
    a.flat[flat_index] = orig
    return {k: (up[k] - down[k]) / (2 * h) for k in up}


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)``, elementwise maximum."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def wilcoxon_enumeration(d):
    """One-sided signed-rank p-value by listing all 2^n sign patterns."""
    d = np.asarray([x for x in d if x != 0], dtype=np.float64)
    a = np.abs(d)
    # mean ranks of |d|, computed independently of the library
    ranks = np.array([np.sum(a < v) + (np.sum(a == v) + 1) / 2.0 for v in a])
    observed = ranks[d > 0].sum()
    hits = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        w = sum(r for r, s in zip(ranks, signs) if s)
        hits += w >= observed - 1e-9
        total += 1
    return hits / total


def ap_by_thresholds(labels, scores):
    """AP as the step sum over every cut-off position in the score ranking."""
    labels = np.asarray(labels, bool)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = labels.sum()
    prev_recall, total = 0.0, 0.0
    for k in range(1, len(order) + 1):
        top = order[:k]
        tp = sum(labels[i] for i in top)
        recall, precision = tp / n_pos, tp / k
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def winding_number(point, polygon):
    """Sum of signed angles swept around ``point``; nonzero means inside."""
    x, y = point
    angle = 0.0
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i][0] - x, polygon[i][1] - y
        x2, y2 = polygon[(i + 1) % n][0] - x, polygon[(i + 1) % n][1] - y
        angle += np.arctan2(x1 * y2 - y1 * x2, x1 * x2 + y1 * y2)
    return int(round(angle / (2 * np.pi)))
