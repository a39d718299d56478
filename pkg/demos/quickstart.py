"""
Joint training, then test-time adaptation, on a small synthetic world
=====================================================================

Run with ``python demos/quickstart.py``. Takes about half a minute.
"""

import numpy as np

from tttmmr import datamodel as dm
from tttmmr import pipeline as pl
from tttmmr.model import ModelConfig, init_params, prepare_samples
from tttmmr.splits import make_splits
from tttmmr.train import joint_train
from tttmmr.ttt import TttConfig, run_ttt, select_iterations

# %% A world of 400 tiles; labels inside the held-out region are shifted.
world = dm.WorldConfig(n_tiles=400, tile_size=8, region_shift=1.0)
dataset = dm.generate_world(world, seed=0)
splits = make_splits(dataset, world.region, seed=0)
print("train/val/random-test/geo-test:",
      len(splits.train100), len(splits.validation), len(splits.random_test), len(splits.geo_test))

# %% Normalize with training statistics and lay out the decoder targets.
stats = dm.compute_norm_stats(dataset, splits.train100)
cfg = ModelConfig(dataset.schema, dataset.task, dataset.tile_size, patch_size=4, embed_dim=8)
samples = prepare_samples(dataset, [t.id for t in dataset.tiles], stats, cfg)
locations = {t.id: t.lonlat for t in dataset.tiles}

# %% Joint training: task loss plus the mean reconstruction loss.
ckpt = joint_train(dataset, splits, init_params(cfg, seed=1), cfg, pl.DESK_TRAIN, stats, 100, samples=samples)
print(f"best epoch {ckpt.epoch}, validation R2 {ckpt.val_metric:.3f}")

# %% Pick the iteration count on validation, then adapt each test batch.
ttt = TttConfig()
iters, _ = select_iterations({i: samples[i] for i in splits.validation}, ckpt.params, cfg, ttt, locations)
print("selected iterations:", iters)

for split in ("random", "geo"):
    test = {i: samples[i] for i in splits.test(split)}
    jt = pl.evaluate_method(pl.JT, ckpt.params, cfg, samples, splits.validation, list(test), split, 0, locations)
    preds, traces = run_ttt(test, ckpt.params, cfg, ttt, iters, locations)
    adapted = pl.task_metric(preds, test, cfg)
    print(f"{split:>6}: JT R2 {jt.metric:+.3f}  TTT-MMR R2 {adapted:+.3f}  ({len(traces)} batches)")

# The encoder is restored after every batch; its checksum never changes.
assert len({t.encoder_checksum for t in traces}) == 1
assert np.isfinite(adapted)
