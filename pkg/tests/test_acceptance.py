"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary section at
the end of the run lists every criterion's outcome.
"""

import json
import time

import numpy as np
import pytest

from tttmmr import cli, metrics
from tttmmr import datamodel as dm
from tttmmr import pipeline as pl
from tttmmr import tensorcore as tc
from tttmmr.model import make_batch
from tttmmr.splits import geographic_partition, split_points
from tttmmr.train import loss_terms
from tttmmr.ttt import (TttConfig, batch_reconstruction_losses, make_batches, modality_gradients,
                        normalized_mean_gradient, run_ttt, ttt_update)

from helpers import (ap_by_thresholds, central_difference, random_params, random_sample, relative_error,
                     tiny_config, wilcoxon_enumeration)

KINDS = (dm.REGRESSION_TILE, dm.REGRESSION_PIXEL, dm.MULTILABEL)


# ------------------------------------------------------------------ 1


def _all_losses(params, batch, cfg):
    tape, lt, rec, per = loss_terms(params, batch, cfg)
    out = {"task": lt, "jt_sum": tc.add(lt, rec)}
    out.update({"rec." + k: v for k, v in per.items()})
    return tape, out


def test_c1_gradients_match_finite_differences(criterion):
    with criterion(1, "analytic gradients vs central differences on 100 tiny models") as c:
        t0 = time.perf_counter()
        worst = 0.0
        rng = np.random.default_rng(101)
        for inst in range(100):
            cfg = tiny_config(KINDS[inst % 3])
            params = random_params(cfg, rng)
            batch = make_batch([random_sample(cfg, rng, i) for i in range(int(rng.integers(1, 4)))],
                               cfg, with_labels=True)
            tape, losses = _all_losses(params, batch, cfg)
            analytic = {k: tc.backward(tape, v) for k, v in losses.items()}
            arrays = {}
            for prefix, store in params.stores().items():
                for n, v in store.arrays.items():
                    arrays[f"{prefix}.{n}"] = v

            def f():
                return {k: float(v.value) for k, v in _all_losses(params, batch, cfg)[1].items()}

            for name, arr in arrays.items():
                for i in range(arr.size):
                    num = central_difference(f, arrays, name, i, h=1e-5)
                    for k in losses:
                        worst = max(worst, relative_error(analytic[k][name].flat[i], num[k]))
        elapsed = time.perf_counter() - t0
        c.detail = f"max rel err {worst:.2e}, {elapsed:.1f}s"
        assert worst < 1e-4
        assert elapsed < 60


# ------------------------------------------------------------------ 2


def test_c2_update_rule_fidelity(criterion):
    with criterion(2, "encoder update equals the direct per-coordinate formula; unit step = 1e-2") as c:
        rng = np.random.default_rng(202)
        worst, step_err = 0.0, 0.0
        for inst in range(20):
            cfg = tiny_config(KINDS[inst % 3])
            params = random_params(cfg, rng)
            batch = make_batch([random_sample(cfg, rng, i) for i in range(4)], cfg)
            tape, losses, absent, _ = batch_reconstruction_losses(batch, params, cfg)
            grads = modality_gradients(tape, losses, params)
            theta = params.encoder.flat()
            new = ttt_update(theta, normalized_mean_gradient(grads, absent), 1e-2)
            mods = sorted(grads)
            norms = {m: np.sqrt(sum(float(x) ** 2 for x in grads[m])) for m in mods}
            direct = np.array([theta[j] - (1e-2 / len(mods)) * sum(grads[m][j] / norms[m] for m in mods)
                               for j in range(theta.size)])
            worst = max(worst, float(np.max(np.abs(new - direct))))
            one = mods[inst % len(mods)]
            single = ttt_update(theta, normalized_mean_gradient({one: grads[one]}), 1e-2)
            step_err = max(step_err, abs(float(np.linalg.norm(single - theta)) - 1e-2))
        c.detail = f"max |diff| {worst:.1e}, max | ||step|| - 0.01 | {step_err:.1e}"
        assert worst <= 1e-12
        assert step_err <= 1e-15


# ------------------------------------------------------------------ 3


def _interiors_overlap(a, b):
    return min(a[2], b[2]) - max(a[0], b[0]) > 0 and min(a[3], b[3]) - max(a[1], b[1]) > 0


def test_c3_partition_invariants(criterion):
    with criterion(3, "geographic partition on 200 random point sets") as c:
        rng = np.random.default_rng(303)
        for _ in range(200):
            n = int(rng.integers(9, 501))
            scale = rng.uniform(1, 180)
            pts = [(i, (float(rng.normal(0, scale)), float(rng.normal(0, scale / 2)))) for i in range(n)]
            if rng.random() < 0.2:  # clustered duplicates exercise the tie rule
                pts = [(i, (round(x, 0), round(y, 0))) for i, (x, y) in pts]
            batches = geographic_partition(pts, 8)
            flat = [i for b in batches for i in b.tile_ids]
            assert len(flat) == len(set(flat)) == n
            sizes = sorted(len(b.tile_ids) for b in batches)
            assert sizes == [8] * (len(sizes) - 1) + [8 + n % 8]
            loc = dict(pts)
            for b in batches:
                x0, y0, x1, y1 = b.bbox
                assert all(x0 <= loc[i][0] <= x1 and y0 <= loc[i][1] <= y1 for i in b.tile_ids)
            for a in range(len(batches)):
                for b in range(a + 1, len(batches)):
                    assert not _interiors_overlap(batches[a].bbox, batches[b].bbox)
        c.detail = "disjoint, covering, one batch of 8 + N mod 8, bboxes interior-disjoint"


# ------------------------------------------------------------------ 4


def test_c4_reset_and_batch_independence(criterion, small_world):
    with criterion(4, "per-tile TTT predictions invariant to batch order; encoder reset before each batch") as c:
        cfg, samples, loc = small_world["cfg"], small_world["samples"], small_world["locations"]
        params = random_params(cfg, np.random.default_rng(404), scale=0.3)
        ref = params.encoder.checksum()
        test = {i: samples[i] for i in small_world["splits"].random_test + small_world["splits"].geo_test}
        for batching in ("random", "geographic"):
            conf = TttConfig(batching=batching, seed=4)
            batches = make_batches(list(test), loc, conf)
            a, ta = run_ttt(test, params, cfg, conf, 5, loc, batches)
            perm = np.random.default_rng(5).permutation(len(batches))
            b, tb = run_ttt(test, params, cfg, conf, 5, loc, [batches[k] for k in perm])
            assert all(a[i].tobytes() == b[i].tobytes() for i in test)
            assert all(t.encoder_checksum == ref for t in ta + tb)
        assert params.encoder.checksum() == ref
        c.detail = f"{len(test)} tiles, random and geographic batching"


# ------------------------------------------------------------------ 5, 6


@pytest.fixture(scope="module")
def seed_runs():
    t0 = time.perf_counter()
    world = dm.WorldConfig(n_tiles=1200, region_shift=1.0, autocorrelation=True)
    cells = pl.run_experiment(world, seeds=range(5))
    return cells, time.perf_counter() - t0


@pytest.mark.slow
def test_c5_ttt_improves_over_jt(criterion, seed_runs):
    with criterion(5, "TTT-MMR improves R^2 over JT on both splits (5 seeds, 1200 tiles)") as c:
        cells, elapsed = seed_runs
        d_rand = pl.delta_summary(cells, pl.TTT_MMR, "random")
        d_geo = pl.delta_summary(cells, pl.TTT_MMR, "geo")
        p = metrics.wilcoxon_one_sided(d_rand + d_geo)
        c.detail = (f"mean dR2 random {np.mean(d_rand):+.4f}, geo {np.mean(d_geo):+.4f}, "
                    f"Wilcoxon p {p:.4g}, {elapsed:.0f}s")
        assert len(d_rand) == len(d_geo) == 5
        assert np.mean(d_rand) >= 0 and np.mean(d_geo) >= 0
        assert p < 0.1
        assert elapsed < 15 * 60


@pytest.mark.slow
def test_c6_geographic_batching_best_on_geo_split(criterion, seed_runs):
    with criterion(6, "TTT-MMR-Geo >= TTT-MMR on the geographic split (5 seeds)") as c:
        cells, _ = seed_runs
        geo = np.mean([x["metric"] for x in cells if x["method"] == pl.TTT_MMR_GEO and x["split"] == "geo"])
        rnd = np.mean([x["metric"] for x in cells if x["method"] == pl.TTT_MMR and x["split"] == "geo"])
        c.detail = f"mean R2 geo-batched {geo:.4f} vs random-batched {rnd:.4f}"
        assert geo >= rnd


# ------------------------------------------------------------------ 7


def test_c7_metric_oracles(criterion):
    with criterion(7, "R^2, mAP, exact Wilcoxon and Holm against independent oracles") as c:
        rng = np.random.default_rng(707)
        r2_err = map_err = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 50))
            y, f = rng.normal(size=n), rng.normal(size=n)
            ybar = sum(y) / n
            oracle = 1 - sum((a - b) ** 2 for a, b in zip(y, f)) / sum((a - ybar) ** 2 for a in y)
            r2_err = max(r2_err, abs(metrics.r_squared(y, f) - oracle))
            n, k = int(rng.integers(2, 25)), int(rng.integers(1, 6))
            labels = (rng.random((n, k)) < 0.4).astype(int)
            labels[0, 0] = 1
            scores = np.round(rng.random((n, k)), 2)
            aps = [ap_by_thresholds(labels[:, j], list(scores[:, j])) for j in range(k) if labels[:, j].any()]
            map_err = max(map_err, abs(metrics.mean_average_precision(labels, scores) - np.mean(aps)))
        assert r2_err < 1e-9 and map_err < 1e-9

        wil_err = 0.0
        for n in range(1, 11):
            for rep in range(20):
                d = rng.normal(size=n)
                if rep % 4 == 0:
                    d = np.round(d)
                    if not d.any():
                        continue
                wil_err = max(wil_err, abs(metrics.wilcoxon_one_sided(d) - wilcoxon_enumeration(d)))
        assert wil_err < 1e-12
        assert metrics.wilcoxon_one_sided([1, 2, 3, 4, 5]) == 1 / 32
        assert metrics.wilcoxon_one_sided([0.3]) == 0.5

        assert metrics.holm_bonferroni([0.04], 0.05)[0].tolist() == [True]
        assert metrics.holm_bonferroni([0.01, 0.04], 0.05)[0].tolist() == [True, True]
        assert metrics.holm_bonferroni([0.03, 0.04], 0.05)[0].tolist() == [False, False]
        assert metrics.holm_bonferroni([0.04, 0.001, 0.02], 0.05)[0].tolist() == [True, True, True]
        rej, adj = metrics.holm_bonferroni([0.04, 0.001, 0.03], 0.05)
        assert rej.tolist() == [False, True, False]
        assert np.allclose(adj, [0.06, 0.003, 0.06], rtol=0, atol=1e-15)
        c.detail = f"R2 {r2_err:.1e}, mAP {map_err:.1e}, Wilcoxon {wil_err:.1e}"


# ------------------------------------------------------------------ 8


def test_c8_split_protocol(criterion):
    with criterion(8, "1000 non-region tiles split 700/150/150; 5% in 50% in 100% for 20 seeds") as c:
        rng = np.random.default_rng(808)
        pts = [(i, (float(rng.uniform(60, 180)), float(rng.uniform(-60, 75)))) for i in range(1000)]
        for seed in rng.integers(0, 2 ** 31, size=20):
            s = split_points(pts, dm.AFRICA, seed=int(seed))
            assert s.geo_test == []
            assert (len(s.train100), len(s.validation), len(s.random_test)) == (700, 150, 150)
            assert set(s.train5) <= set(s.train50) <= set(s.train100)
            assert (len(s.train50), len(s.train5)) == (350, 35)
        c.detail = "sizes 700/150/150, subsets 35 in 350 in 700"


# ------------------------------------------------------------------ 9


def _cli_pipeline(out):
    def run(*argv):
        assert cli.main([str(a) for a in argv]) == 0, argv

    run("gen-data", "--tiles", 300, "--tile-size", 8, "--seed", 9, "--out", out)
    run("split", "--out", out, "--seed", 2)
    for seed in (0, 1):
        run("train", "--out", out, "--seed", seed, "--epochs", 2, "--warmup-epochs", 1)
        run("ttt", "--out", out, "--seed", seed)
    run("report", "--out", out)


def test_c9_pipeline_determinism(criterion, tmp_path):
    with criterion(9, "gen-data -> split -> train -> ttt -> report twice gives byte-identical reports") as c:
        _cli_pipeline(tmp_path / "a")
        _cli_pipeline(tmp_path / "b")
        for name in (cli.REPORT_CSV, cli.REPORT_JSON):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        n = len(json.loads((tmp_path / "a" / cli.REPORT_JSON).read_text())["cells"])
        c.detail = f"{n} cells, CSV and JSON identical"


# ------------------------------------------------------------------ 10


def test_c10_missing_modality_excluded(criterion, small_world):
    with criterion(10, "a modality missing on every batch tile leaves the update unchanged") as c:
        cfg, samples = small_world["cfg"], small_world["samples"]
        params = random_params(cfg, np.random.default_rng(1010), scale=0.3)
        worst = 0.0
        for name in ("sentinel1", "precipitation", "esa_worldcover", "ecoregion"):
            ids = sorted(samples)[:8]
            full = make_batch([samples[i] for i in ids], cfg)
            tape, losses, absent, _ = batch_reconstruction_losses(full, params, cfg)
            grads = modality_gradients(tape, losses, params)
            reference = normalized_mean_gradient({m: g for m, g in grads.items() if m != name})

            template = next(samples[i].targets[name] for i in sorted(samples) if name in samples[i].targets)
            stripped, injected = [], []
            for i in ids:
                s = samples[i]
                kept = {k: v for k, v in s.targets.items() if k != name}
                stripped.append(type(s)(s.id, s.x, kept, s.label, s.label_mask))
                filled = dict(kept)
                filled[name] = (np.ones_like(template[0]), np.zeros_like(template[1], dtype=bool))
                injected.append(type(s)(s.id, s.x, filled, s.label, s.label_mask))
            for group in (stripped, injected):
                batch = make_batch(group, cfg)
                assert name in batch.absent
                tape, losses, absent, _ = batch_reconstruction_losses(batch, params, cfg)
                direction = normalized_mean_gradient(modality_gradients(tape, losses, params), absent)
                worst = max(worst, float(np.max(np.abs(direction - reference))))
            assert not np.allclose(direction, normalized_mean_gradient(grads))
        c.detail = f"max |diff| {worst:.1e}"
        assert worst <= 1e-15


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
