"""End-to-end experiment helpers and the JT vs TTT-MMR comparison report."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field


from . import datamodel as dm
from . import metrics
from .model import ModelConfig, init_params, predict, prepare_samples
from .splits import make_splits
from .train import TrainConfig, joint_train, task_metric
from .ttt import GEOGRAPHIC, RANDOM, TttConfig, run_ttt, select_iterations

JT, TTT_MMR, TTT_MMR_GEO = "jt", "ttt-mmr", "ttt-mmr-geo"
METHODS = (JT, TTT_MMR, TTT_MMR_GEO)
SPLITS = ("random", "geo")

DESK_TRAIN = TrainConfig(epochs=30, batch_size=16, max_lr=3e-3, min_lr=3e-5,
                         weight_decay=0.05, warmup_epochs=3)


def derive_seed(root: int, label: str) -> int:
    h = hashlib.sha256(f"{int(root)}:{label}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def ttt_config_for(method: str, seed: int, base: TttConfig = TttConfig()) -> TttConfig:
    batching = GEOGRAPHIC if method == TTT_MMR_GEO else RANDOM
    return TttConfig(base.batch_size, base.lr, base.max_iters, batching,
                     derive_seed(seed, f"ttt-batches-{batching}"), base.select_by)


@dataclass
class MethodResult:
    method: str
    split: str
    metric: float
    iterations: int
    predictions: dict
    traces: list = field(default_factory=list)


def evaluate_method(method, params, cfg, samples, val_ids, test_ids, split, seed, locations,
                    base_ttt: TttConfig = TttConfig(), iterations=None) -> MethodResult:
    test = {i: samples[i] for i in test_ids}
    if method == JT:
        preds = predict(params, list(test.values()), cfg)
        return MethodResult(method, split, task_metric(preds, test, cfg), 0, preds)
    tcfg = ttt_config_for(method, seed, base_ttt)
    if iterations is None:
        iterations, _ = select_iterations({i: samples[i] for i in val_ids}, params, cfg, tcfg, locations)
    preds, traces = run_ttt(test, params, cfg, tcfg, iterations, locations)
    return MethodResult(method, split, task_metric(preds, test, cfg), iterations, preds, traces)


def run_seed(dataset, splits, stats, seed: int, subset: int = 100, methods=METHODS,
             train_config: TrainConfig = DESK_TRAIN, base_ttt: TttConfig = TttConfig(),
             model_kwargs=None) -> list:
    """Train JT for one seed and evaluate every method on both test splits.

    Returns a list of cell dicts ``{method, split, subset, seed, metric, iterations}``.
    """
    cfg = ModelConfig(dataset.schema, dataset.task, dataset.tile_size, **(model_kwargs or {}))
    ids = sorted(set(splits.train(subset)) | set(splits.validation)
                 | set(splits.random_test) | set(splits.geo_test))
    samples = prepare_samples(dataset, ids, stats, cfg)
    tc_ = TrainConfig(**{**train_config.__dict__, "seed": derive_seed(seed, "train-order")})
    params = init_params(cfg, derive_seed(seed, "init"))
    ckpt = joint_train(dataset, splits, params, cfg, tc_, stats, subset, samples=samples)
    locations = {t.id: t.lonlat for t in dataset.tiles}
    cells = []
    iters = {}
    for method in methods:
        for split in SPLITS:
            test_ids = splits.test(split)
            if len(test_ids) < 2:
                continue
            r = evaluate_method(method, ckpt.params, cfg, samples, splits.validation, test_ids,
                                split, seed, locations, base_ttt, iters.get(method))
            iters[method] = r.iterations
            cells.append({"method": method, "split": split, "subset": int(subset), "seed": int(seed),
                          "metric": r.metric, "iterations": r.iterations})
    return cells


def run_experiment(world: dm.WorldConfig, seeds, subset: int = 100, methods=METHODS,
                   train_config: TrainConfig = DESK_TRAIN, base_ttt: TttConfig = TttConfig(),
                   world_seed: int = 0, split_seed: int = 0) -> list:
    """One world, one split, several training seeds."""
    dataset = dm.generate_world(world, world_seed)
    splits = make_splits(dataset, world.region, seed=split_seed)
    stats = dm.compute_norm_stats(dataset, splits.train100)
    cells = []
    for s in seeds:
        cells.extend(run_seed(dataset, splits, stats, s, subset, methods, train_config, base_ttt))
    return cells


# --------------------------------------------------------------------------
# report


def _key(c):
    return (c["split"], c["subset"], c["seed"])


def build_report(cells: list, alpha: float = 0.05) -> dict:
    """Deltas vs JT, relative improvements, ranks and one-sided Wilcoxon + Holm."""
    cells = sorted(cells, key=lambda c: (c["method"], c["split"], c["subset"], c["seed"]))
    by = {(c["method"],) + _key(c): c["metric"] for c in cells}
    methods = [m for m in METHODS if any(c["method"] == m for c in cells)]
    methods += sorted({c["method"] for c in cells} - set(methods))
    groups = sorted({_key(c) for c in cells})

    deltas = []
    for m in methods:
        if m == JT:
            continue
        for g in groups:
            if (m,) + g in by and (JT,) + g in by:
                old, new = by[(JT,) + g], by[(m,) + g]
                deltas.append({
                    "method": m, "split": g[0], "subset": g[1], "seed": g[2],
                    "jt": old, "value": new, "delta": new - old,
                    "ri_percent": 100.0 * metrics.relative_improvement(old, new) if old < 1 else None,
                })

    rank_rows = {m: [] for m in methods}
    for g in groups:
        present = [m for m in methods if (m,) + g in by]
        if len(present) < 2:
            continue
        ranks = metrics.rank_methods([by[(m,) + g] for m in present])
        for m, r in zip(present, ranks):
            rank_rows[m].append(float(r))
    ranks = {m: dict(zip(("mean", "se"), metrics.mean_and_se(v))) for m, v in rank_rows.items() if v}

    summary = {}
    for m in methods:
        for split in sorted({g[0] for g in groups}):
            for sub in sorted({g[1] for g in groups}):
                vals = [by[(m, split, sub, s)] for (sp_, sb, s) in groups
                        if sp_ == split and sb == sub and (m, split, sub, s) in by]
                if vals:
                    mu, se = metrics.mean_and_se(vals)
                    summary[f"{m}|{split}|{sub}"] = {"mean": mu, "se": se, "n": len(vals)}

    tests = {}
    tested = [m for m in methods if m != JT and any(d["method"] == m for d in deltas)]
    pvals = []
    for m in tested:
        d = [x["delta"] for x in deltas if x["method"] == m]
        try:
            p = metrics.wilcoxon_one_sided(d)
        except ValueError:
            p = 1.0
        pvals.append(p)
        mu, se = metrics.mean_and_se(d)
        tests[m] = {"n_pairs": len(d), "mean_delta": mu, "se_delta": se, "p_value": p}
    if pvals:
        reject, adj = metrics.holm_bonferroni(pvals, alpha)
        for m, r, a in zip(tested, reject, adj):
            tests[m].update({"holm_adjusted_p": float(a), "reject": bool(r)})

    return {
        "alpha": alpha, "methods": methods, "cells": cells, "summary": summary,
        "deltas": deltas, "ranks": ranks, "wilcoxon_vs_jt": tests,
    }


def check_report(report: dict, tol: float = 1e-12) -> bool:
    """Recompute every delta from the raw cells."""
    by = {(c["method"],) + _key(c): c["metric"] for c in report["cells"]}
    for d in report["deltas"]:
        g = (d["split"], d["subset"], d["seed"])
        if abs((by[(d["method"],) + g] - by[(JT,) + g]) - d["delta"]) > tol:
            return False
    return True


def cells_csv(cells: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "split", "subset", "seed", "metric", "iterations"])
    for c in sorted(cells, key=lambda c: (c["method"], c["split"], c["subset"], c["seed"])):
        w.writerow([c["method"], c["split"], c["subset"], c["seed"], repr(float(c["metric"])), c["iterations"]])
    return buf.getvalue()


def delta_summary(cells: list, method: str, split: str) -> list:
    """Per-seed metric deltas of ``method`` over JT on ``split``."""
    by = {(c["method"],) + _key(c): c["metric"] for c in cells}
    out = []
    for (m, sp_, sb, s), v in sorted(by.items()):
        if m == method and sp_ == split and (JT, sp_, sb, s) in by:
            out.append(v - by[(JT, sp_, sb, s)])
    return out


def finite(x) -> bool:
    return x is not None and math.isfinite(x)
