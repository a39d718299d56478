"""Command-line harness: gen-data, split, train, ttt, report.

Every command writes into an output directory (``--out``, else the
``TTTMMR_OUT_DIR`` environment variable, else ``./runs``) under fixed file
names. Existing outputs are never overwritten unless ``--force`` is given,
so a rerun either refuses cleanly or, with ``--force``, reproduces the same
bytes from the same inputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datamodel as dm
from . import pipeline as pl
from . import storage
from . import tensorcore as tc
from .model import ModelConfig, init_params, load_checkpoint, prepare_samples, save_checkpoint
from .splits import load_splits, make_splits
from .train import FINETUNE, LINEAR_PROBE, DivergenceError, TrainConfig, joint_train, train_config_json
from .ttt import TttConfig

log = logging.getLogger("tttmmr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "TTTMMR_OUT_DIR"

DATASET_FILE = "dataset.ttm"
SPLITS_FILE = "splits.json"
REPORT_CSV, REPORT_JSON = "report.csv", "report.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# paths and small helpers


def out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def checkpoint_path(out: Path, subset: int, seed: int) -> Path:
    return out / "checkpoints" / f"jt_sub{subset}_seed{seed}.ckpt"


def result_stem(method: str, split: str, subset: int, seed: int) -> str:
    return f"{method}_{split}_sub{subset}_seed{seed}"


def _guard(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _file_sha(path) -> str:
    import hashlib
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_inputs(args):
    """Dataset, splits (+ raw json) and normalization stats, with hash checks."""
    ds_path = _require(args.dataset or out_dir(args) / DATASET_FILE, "dataset")
    sp_path = _require(args.splits or out_dir(args) / SPLITS_FILE, "splits file")
    dataset = dm.load_dataset(ds_path)
    splits, raw = load_splits(sp_path)
    h = dm.schema_hash(dataset.schema)
    if raw.get("schema_hash") != h:
        raise DataError(f"{sp_path} was made for a different schema ({raw.get('schema_hash')} != {h})")
    if raw.get("dataset_sha256") not in (None, _file_sha(ds_path)):
        raise DataError(f"{sp_path} was made from a different dataset file")
    known = {t.id for t in dataset.tiles}
    listed = set(splits.train100) | set(splits.validation) | set(splits.random_test) | set(splits.geo_test)
    if not listed <= known:
        raise DataError("splits reference tile ids absent from the dataset")
    if raw.get("norm_stats") is None:
        raise DataError(f"{sp_path} carries no normalization statistics")
    return dataset, splits, dm.NormStats.from_json(raw["norm_stats"]), sp_path


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    path = out_dir(args) / DATASET_FILE
    _guard([path], args.force)
    try:
        world = dm.WorldConfig(
            n_tiles=args.tiles, tile_size=args.tile_size, task=args.task, n_classes=args.classes,
            missing_rate=args.missing_rate, nodata_rate=args.nodata_rate,
            region_shift=args.region_shift, region_fraction=args.region_fraction,
            autocorrelation=not args.no_autocorrelation,
        )
        world.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dataset = dm.generate_world(world, args.seed)
    dm.save_dataset(dataset, path)
    print(f"wrote {path} ({len(dataset.tiles)} tiles, seed {args.seed})")
    return EXIT_OK


def cmd_split(args) -> int:
    out = out_dir(args)
    ds_path = _require(args.dataset or out / DATASET_FILE, "dataset")
    path = Path(args.splits) if args.splits else out / SPLITS_FILE
    dataset = dm.load_dataset(ds_path)
    if args.subset_check and path.is_file():
        splits, _ = load_splits(path)
        if not splits.check_nesting():
            raise DataError("training subsets are not nested")
        print(f"{path}: train5 {len(splits.train5)} <= train50 {len(splits.train50)} "
              f"<= train100 {len(splits.train100)}: nested")
        return EXIT_OK
    _guard([path], args.force)
    region = dm.region_from_config(dataset)
    try:
        splits = make_splits(dataset, region, seed=args.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if args.require_geo and not splits.geo_test:
        raise DataError("the region contains no tiles; the geographic test split would be empty")
    stats = dm.compute_norm_stats(dataset, splits.train100)
    obj = splits.to_json(stats, dm.schema_hash(dataset.schema))
    obj["dataset_sha256"] = _file_sha(ds_path)
    _write_text(path, json.dumps(obj, sort_keys=True, indent=1))
    if args.subset_check and not splits.check_nesting():
        raise DataError("training subsets are not nested")
    print(f"wrote {path}: train {len(splits.train100)} (50%: {len(splits.train50)}, 5%: {len(splits.train5)}), "
          f"validation {len(splits.validation)}, random test {len(splits.random_test)}, "
          f"geo test {len(splits.geo_test)}")
    return EXIT_OK


def _train_config(args, seed: int) -> TrainConfig:
    d = pl.DESK_TRAIN
    try:
        return TrainConfig(
            epochs=args.epochs if args.epochs is not None else d.epochs,
            batch_size=args.batch_size if args.batch_size is not None else d.batch_size,
            max_lr=args.lr if args.lr is not None else d.max_lr,
            min_lr=args.min_lr if args.min_lr is not None else d.min_lr,
            weight_decay=args.weight_decay if args.weight_decay is not None else d.weight_decay,
            warmup_epochs=args.warmup_epochs if args.warmup_epochs is not None else d.warmup_epochs,
            seed=pl.derive_seed(seed, "train-order"), mode=args.mode,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    out = out_dir(args)
    dataset, splits, stats, sp_path = _load_inputs(args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else checkpoint_path(out, args.subset, args.seed)
    log_path = ckpt_path.with_suffix(".log.jsonl")
    _guard([ckpt_path, log_path], args.force)
    config = _train_config(args, args.seed)
    try:
        cfg = ModelConfig(dataset.schema, dataset.task, dataset.tile_size,
                          patch_size=args.patch_size, embed_dim=args.embed_dim)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    params = init_params(cfg, pl.derive_seed(args.seed, "init"))
    lines = []

    def on_epoch(entry):
        lines.append(storage.dumps_json(entry))
        if args.verbose:
            print(lines[-1])

    best = joint_train(dataset, splits, params, cfg, config, stats, args.subset, on_epoch=on_epoch)
    _write_text(log_path, "\n".join(lines) + "\n")
    save_checkpoint(ckpt_path, best.params, cfg, {
        "schema_hash": dm.schema_hash(dataset.schema),
        "splits_sha256": _file_sha(sp_path),
        "seed": args.seed, "subset": args.subset,
        "train_config": train_config_json(config),
        "best_epoch": best.epoch, "val_metric": best.val_metric,
    })
    print(f"wrote {ckpt_path} (best epoch {best.epoch}, validation metric {best.val_metric:.4f})")
    return EXIT_OK


def cmd_ttt(args) -> int:
    out = out_dir(args)
    dataset, splits, stats, sp_path = _load_inputs(args)
    seed = args.seed
    ckpt = _require(args.checkpoint or checkpoint_path(out, args.subset, seed), "checkpoint")
    params, cfg, manifest = load_checkpoint(ckpt)
    if manifest.get("schema_hash") != dm.schema_hash(dataset.schema):
        raise DataError(f"{ckpt} was trained on a different schema")
    if manifest.get("splits_sha256") != _file_sha(sp_path):
        raise DataError(f"{ckpt} was trained with a different splits file")
    if cfg.task != dataset.task or cfg.tile_size != dataset.tile_size:
        raise DataError(f"{ckpt} does not match the dataset task or tile size")
    subset = int(manifest.get("subset", args.subset))
    methods = [args.method] if args.method else list(pl.METHODS)
    split_names = [args.split] if args.split else list(pl.SPLITS)
    try:
        base = TttConfig(batch_size=args.ttt_batch_size, lr=args.ttt_lr, max_iters=args.ttt_max_iters)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    targets = []
    for m in methods:
        for s in split_names:
            stem = result_stem(m, s, subset, seed)
            targets += [out / "results" / f"{stem}.json", out / "traces" / f"{stem}.jsonl"]
    _guard(targets, args.force)

    ids = sorted(set(splits.validation) | set(splits.random_test) | set(splits.geo_test))
    samples = prepare_samples(dataset, ids, stats, cfg)
    locations = {t.id: t.lonlat for t in dataset.tiles}
    iters = {}
    for m in methods:
        for s in split_names:
            test_ids = splits.test(s)
            if len(test_ids) < 2:
                raise DataError(f"the {s} test split has fewer than two tiles")
            r = pl.evaluate_method(m, params, cfg, samples, splits.validation, test_ids, s, seed,
                                   locations, base, iters.get(m))
            iters[m] = r.iterations
            stem = result_stem(m, s, subset, seed)
            preds = {str(i): np.asarray(r.predictions[i], dtype=np.float64).tolist() for i in sorted(r.predictions)}
            result = {
                "method": m, "split": s, "subset": subset, "seed": seed, "metric": r.metric,
                "iterations": r.iterations, "checkpoint_sha256": _file_sha(ckpt),
                "ttt_config": {"batch_size": base.batch_size, "lr": base.lr, "max_iters": base.max_iters},
                "predictions": preds,
            }
            _write_text(out / "results" / f"{stem}.json", json.dumps(result, sort_keys=True, indent=1))
            trace = "".join(storage.dumps_json(t.to_json()) + "\n" for t in r.traces)
            _write_text(out / "traces" / f"{stem}.jsonl", trace)
            print(f"{m:12s} {s:6s} subset {subset:3d} seed {seed}: metric {r.metric:.4f} (I = {r.iterations})")
    return EXIT_OK


def cmd_report(args) -> int:
    out = out_dir(args)
    results = Path(args.results) if args.results else out / "results"
    files = sorted(results.glob("*.json")) if results.is_dir() else []
    if not files:
        raise DataError(f"no result files in {results}")
    _guard([out / REPORT_CSV, out / REPORT_JSON], args.force)
    cells = []
    for f in files:
        r = json.loads(f.read_text())
        cells.append({k: r[k] for k in ("method", "split", "subset", "seed", "metric", "iterations")})
    report = pl.build_report(cells, alpha=args.alpha)
    if not pl.check_report(report):
        raise DataError("report deltas disagree with the raw cells")
    _write_text(out / REPORT_CSV, pl.cells_csv(cells))
    _write_text(out / REPORT_JSON, json.dumps(report, sort_keys=True, indent=1) + "\n")
    for m, t in sorted(report["wilcoxon_vs_jt"].items()):
        print(f"{m:12s} mean delta {t['mean_delta']:+.4f}  p = {t['p_value']:.4g}  "
              f"Holm p = {t['holm_adjusted_p']:.4g}")
    print(f"wrote {out / REPORT_CSV} and {out / REPORT_JSON}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(v):
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tttmmr", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic world")
    g.add_argument("--tiles", type=_positive, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tile-size", type=int, default=16)
    g.add_argument("--task", choices=dm.TASK_KINDS, default=dm.REGRESSION_TILE)
    g.add_argument("--classes", type=_positive, default=10)
    g.add_argument("--missing-rate", type=float, default=0.0)
    g.add_argument("--nodata-rate", type=float, default=0.0)
    g.add_argument("--region-shift", type=float, default=1.0)
    g.add_argument("--region-fraction", type=float, default=0.2)
    g.add_argument("--no-autocorrelation", action="store_true",
                   help="draw the nuisance field independently per tile")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("split", parents=[common], help="random/geographic splits and normalization stats")
    s.add_argument("--dataset")
    s.add_argument("--splits", help="output path (default OUT/splits.json)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--subset-check", action="store_true", help="verify 5%% within 50%% within 100%%")
    s.add_argument("--allow-empty-geo", dest="require_geo", action="store_false")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", parents=[common], help="joint training (task + reconstruction)")
    t.add_argument("--dataset")
    t.add_argument("--splits")
    t.add_argument("--checkpoint", help="output path")
    t.add_argument("--subset", type=int, choices=(5, 50, 100), default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mode", choices=(FINETUNE, LINEAR_PROBE), default=FINETUNE)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, help="peak learning rate")
    t.add_argument("--min-lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--patch-size", type=_positive, default=4)
    t.add_argument("--embed-dim", type=_positive, default=32)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ttt", parents=[common], help="evaluate JT and test-time training")
    a.add_argument("--dataset")
    a.add_argument("--splits")
    a.add_argument("--checkpoint")
    a.add_argument("--method", choices=pl.METHODS, help="default: all")
    a.add_argument("--split", choices=pl.SPLITS, help="default: both")
    a.add_argument("--subset", type=int, choices=(5, 50, 100), default=100)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--ttt-batch-size", type=_positive, default=8)
    a.add_argument("--ttt-lr", type=float, default=1e-2)
    a.add_argument("--ttt-max-iters", type=_positive, default=5)
    a.set_defaults(func=cmd_ttt)

    r = sub.add_parser("report", parents=[common], help="CSV of raw cells and JSON aggregates")
    r.add_argument("--results", help="directory of result files (default OUT/results)")
    r.add_argument("--alpha", type=float, default=0.05)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger("tttmmr").setLevel(logging.INFO)
        # non-finite values are detected and reported explicitly; numpy's own warnings are noise here
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, storage.ContainerError, dm.GeoJSONError, dm.DegenerateBandError,
            FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, tc.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
