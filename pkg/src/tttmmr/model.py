"""Toy encoder, linear task decoder and linear task-modality decoder.

Encoder: patchify -> linear -> tanh -> linear, giving a (D, H/p, W/p) grid.
Task decoder: pool + layer norm + affine for tile-level tasks, bilinear
upsample + 1x1 conv for pixel-level tasks. Modality decoder: bilinear
upsample + one 1x1 conv producing every band (or K logits) of every task
modality; tile-level modalities are the spatial mean of their channels.

Internally everything is batched: embeddings are (N, P, D) with P patches in
row-major order, decoder maps are (N, H*W, C).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensorcore as tc
from .datamodel import (CATEGORICAL, CONTINUOUS, LABEL_NO_DATA, MULTILABEL, PIXEL,
                        REGRESSION_PIXEL, REGRESSION_TILE, Task, nodata_masks, normalize_tile)
from . import storage


class ModelError(ValueError):
    pass


class ParamStore:
    """Ordered named arrays with a flat float64 view."""

    def __init__(self, arrays: dict):
        self.arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    @property
    def names(self):
        return list(self.arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def __getitem__(self, name):
        return self.arrays[name]

    def flat(self) -> np.ndarray:
        if not self.arrays:
            return np.empty(0)
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def from_flat(self, vec) -> "ParamStore":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ModelError(f"flat vector has {vec.size} entries, store has {self.size}")
        out, pos = {}, 0
        for k, a in self.arrays.items():
            out[k] = vec[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return ParamStore(out)

    def flatten_grads(self, grads: dict, prefix: str = "") -> np.ndarray:
        """Align a ``{name: grad}`` dict with this store's flat layout."""
        return np.concatenate([np.asarray(grads[prefix + k]).ravel() for k in self.arrays])

    def copy(self) -> "ParamStore":
        return ParamStore(self.arrays)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.flat(), dtype="<f8").tobytes()).hexdigest()


@dataclass(frozen=True)
class ChannelGroup:
    name: str
    scale: str
    kind: str
    start: int
    stop: int


@dataclass(frozen=True)
class ModelConfig:
    schema: tuple
    task: Task
    tile_size: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    input_modalities: tuple = ("sentinel2",)
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.tile_size % self.patch_size:
            raise ModelError("tile_size must be a multiple of patch_size")
        names = {m.name: m for m in self.schema}
        for name in self.input_modalities:
            m = names.get(name)
            if m is None:
                raise ModelError(f"unknown input modality {name!r}")
            if m.scale != PIXEL or m.kind != CONTINUOUS:
                raise ModelError(f"input modality {name!r} must be pixel-level continuous")

    @property
    def grid(self) -> tuple:
        g = self.tile_size // self.patch_size
        return (g, g)

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def hw(self) -> tuple:
        return (self.tile_size, self.tile_size)

    @property
    def input_bands(self) -> int:
        names = {m.name: m for m in self.schema}
        return sum(names[n].bands for n in self.input_modalities)

    @property
    def patch_features(self) -> int:
        return self.patch_size * self.patch_size * self.input_bands

    @property
    def groups(self) -> tuple:
        """Channel-group table: pixel modalities first, then tile modalities, each in schema order."""
        out, pos = [], 0
        ordered = [m for m in self.schema if m.scale == PIXEL] + [m for m in self.schema if m.scale != PIXEL]
        for m in ordered:
            out.append(ChannelGroup(m.name, m.scale, m.kind, pos, pos + m.channels))
            pos += m.channels
        return tuple(out)

    @property
    def pixel_channels(self) -> int:
        return sum(g.stop - g.start for g in self.groups if g.scale == PIXEL)

    @property
    def total_channels(self) -> int:
        return self.groups[-1].stop

    def to_json(self) -> dict:
        from .datamodel import schema_to_json
        return {
            "schema": schema_to_json(self.schema),
            "task": {"kind": self.task.kind, "num_classes": self.task.num_classes},
            "tile_size": self.tile_size, "patch_size": self.patch_size,
            "embed_dim": self.embed_dim, "input_modalities": list(self.input_modalities),
            "ln_eps": self.ln_eps,
            "channel_groups": [[g.name, g.start, g.stop] for g in self.groups],
        }

    @classmethod
    def from_json(cls, obj) -> "ModelConfig":
        from .datamodel import schema_from_json
        return cls(schema_from_json(obj["schema"]), Task(**obj["task"]), obj["tile_size"],
                   obj["patch_size"], obj["embed_dim"], tuple(obj["input_modalities"]), obj["ln_eps"])


@dataclass
class ModelParams:
    encoder: ParamStore
    task_decoder: ParamStore
    modality_decoder: ParamStore

    def copy(self) -> "ModelParams":
        return ModelParams(self.encoder.copy(), self.task_decoder.copy(), self.modality_decoder.copy())

    def stores(self):
        return {"enc": self.encoder, "task": self.task_decoder, "mod": self.modality_decoder}


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    F, D = cfg.patch_features, cfg.embed_dim

    def glorot(n_in, n_out):
        return rng.uniform(-1, 1, size=(n_in, n_out)) * np.sqrt(6.0 / (n_in + n_out))

    enc = ParamStore({"w1": glorot(F, D), "b1": np.zeros(D), "w2": glorot(D, D), "b2": np.zeros(D)})
    if cfg.task.kind == REGRESSION_PIXEL:
        task = ParamStore({"conv_w": glorot(D, 1), "conv_b": np.zeros(1)})
    else:
        out = cfg.task.out_dim
        task = ParamStore({"ln_gamma": np.ones(D), "ln_beta": np.zeros(D),
                           "fc_w": glorot(D, out), "fc_b": np.zeros(out)})
    C = cfg.total_channels
    mod = ParamStore({"conv_w": glorot(D, C), "conv_b": np.zeros(C)})
    return ModelParams(enc, task, mod)


# --------------------------------------------------------------------------
# graphs on a tape


def register(tape: tc.Tape, store: ParamStore, prefix: str, trainable: bool = True) -> dict:
    if trainable:
        return {k: tape.param(prefix + k, v) for k, v in store.arrays.items()}
    return {k: tape.constant(v) for k, v in store.arrays.items()}


def encode_graph(x: tc.Tensor, th: dict) -> tc.Tensor:
    """(N, P, F) patch features -> (N, P, D) embeddings."""
    h = tc.tanh(tc.affine(x, th["w1"], th["b1"]))
    return tc.affine(h, th["w2"], th["b2"])


def task_graph(emb: tc.Tensor, g: dict, cfg: ModelConfig) -> tc.Tensor:
    if cfg.task.kind == REGRESSION_PIXEL:
        if "conv_w" not in g:
            raise ModelError("pixel-level task needs the upsample + 1x1 conv head")
        up = tc.upsample_bilinear(emb, cfg.grid, cfg.hw)
        y = tc.affine(up, g["conv_w"], g["conv_b"])
        return tc.reshape(y, (y.value.shape[0], -1))
    if "fc_w" not in g:
        raise ModelError("tile-level task needs the pool + layer norm + affine head")
    pooled = tc.mean(emb, axis=1)
    y = tc.affine(tc.layer_norm(pooled, g["ln_gamma"], g["ln_beta"], cfg.ln_eps), g["fc_w"], g["fc_b"])
    if cfg.task.kind == REGRESSION_TILE:
        return tc.reshape(y, (y.value.shape[0],))
    return y


def modality_graph(emb: tc.Tensor, a: dict, cfg: ModelConfig) -> dict:
    """Reconstructions per modality.

    pixel continuous (N, HW, bands); pixel categorical (N, HW, K);
    tile continuous (N, bands); tile categorical (N, K).

    Tile-level channels are computed as conv(mean(upsampled)), which equals
    mean(conv(upsampled)) because both maps are linear; it avoids running
    the wide tile-level channel block at every pixel.
    """
    up = tc.upsample_bilinear(emb, cfg.grid, cfg.hw)
    n_pix = cfg.pixel_channels
    C = cfg.total_channels
    w, b = a["conv_w"], a["conv_b"]
    out = {}
    if n_pix:
        maps = tc.affine(up, tc.take_last(w, 0, n_pix), tc.take_last(b, 0, n_pix))
    if n_pix < C:
        pooled = tc.mean(up, axis=1)
        vecs = tc.affine(pooled, tc.take_last(w, n_pix, C), tc.take_last(b, n_pix, C))
    for grp in cfg.groups:
        if grp.scale == PIXEL:
            out[grp.name] = tc.take_last(maps, grp.start, grp.stop)
        else:
            out[grp.name] = tc.take_last(vecs, grp.start - n_pix, grp.stop - n_pix)
    return out


# --------------------------------------------------------------------------
# samples and batches


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(C, H, W) -> (P, C*p*p) with patches in row-major order."""
    C, H, W = x.shape
    g = x.reshape(C, H // p, p, W // p, p).transpose(1, 3, 0, 2, 4)
    return g.reshape((H // p) * (W // p), C * p * p)


@dataclass
class Sample:
    """Decoder-layout arrays for one tile."""

    id: int
    x: np.ndarray
    targets: dict  # name -> (target, valid mask)
    label: Optional[np.ndarray] = None
    label_mask: Optional[np.ndarray] = None


def make_sample(tile, stats, cfg: ModelConfig) -> Sample:
    for name in cfg.input_modalities:
        if not tile.has(name):
            raise ModelError(f"tile {tile.id}: input modality {name!r} is missing")
    norm = normalize_tile(tile, stats, cfg.schema)
    x = np.concatenate([norm.pixel_data[n] for n in cfg.input_modalities], axis=0)
    if x.shape[1:] != cfg.hw:
        raise ModelError(f"tile {tile.id}: spatial shape {x.shape[1:]} != {cfg.hw}")
    masks = nodata_masks(tile, cfg.schema)
    targets = {}
    for m in cfg.schema:
        if not tile.has(m.name):
            continue
        v, ok = norm.values(m.name), masks[m.name]
        if m.scale == PIXEL:
            if m.kind == CATEGORICAL:
                targets[m.name] = (v[0].ravel().astype(np.int64), ok[0].ravel())
            else:
                targets[m.name] = (v.reshape(m.bands, -1).T.copy(), ok.reshape(m.bands, -1).T.copy())
        else:
            if m.kind == CATEGORICAL:
                targets[m.name] = (v.astype(np.int64), ok.copy())
            else:
                targets[m.name] = (v.copy(), ok.copy())
    label = label_mask = None
    if tile.label is not None:
        if cfg.task.kind == REGRESSION_TILE:
            label, label_mask = np.array(float(tile.label)), np.array(True)
        elif cfg.task.kind == REGRESSION_PIXEL:
            lab = np.asarray(tile.label, dtype=np.float64).ravel()
            label, label_mask = lab, lab != LABEL_NO_DATA
        else:
            label = np.asarray(tile.label, dtype=np.float64).ravel()
            label_mask = np.ones(label.shape, dtype=bool)
    return Sample(tile.id, patchify(x, cfg.patch_size), targets, label, label_mask)


def prepare_samples(dataset, ids, stats, cfg: ModelConfig) -> dict:
    return {t.id: make_sample(t, stats, cfg) for t in dataset.subset(ids)}


@dataclass
class Batch:
    ids: list
    x: np.ndarray
    recon: dict = field(default_factory=dict)  # name -> (target, weights)
    absent: frozenset = frozenset()
    label: Optional[np.ndarray] = None
    label_weights: Optional[np.ndarray] = None


def _target_shape(grp: ChannelGroup, cfg: ModelConfig, bands: int):
    hw = cfg.hw[0] * cfg.hw[1]
    if grp.scale == PIXEL:
        return (hw,) if grp.kind == CATEGORICAL else (hw, bands)
    return (1,) if grp.kind == CATEGORICAL else (bands,)


def make_batch(samples: list, cfg: ModelConfig, with_labels: bool = False) -> Batch:
    """Stack samples (sorted by id) and build per-modality loss weights.

    Weights implement: per-tile mean over valid elements, then mean over the
    tiles where the modality is present with at least one valid element.
    """
    if not samples:
        raise ModelError("empty batch")
    samples = sorted(samples, key=lambda s: s.id)
    N = len(samples)
    x = np.stack([s.x for s in samples])
    bands = {m.name: m.bands for m in cfg.schema}
    recon, absent = {}, set()
    for grp in cfg.groups:
        shp = _target_shape(grp, cfg, bands[grp.name])
        dtype = np.int64 if grp.kind == CATEGORICAL else np.float64
        tgt = np.zeros((N,) + shp, dtype=dtype)
        w = np.zeros((N,) + shp)
        count = 0
        for i, s in enumerate(samples):
            if grp.name not in s.targets:
                continue
            t, ok = s.targets[grp.name]
            nvalid = int(ok.sum())
            if nvalid == 0:
                continue
            tgt[i] = t.reshape(shp)
            w[i] = ok.reshape(shp) / nvalid
            count += 1
        if count == 0:
            absent.add(grp.name)
            continue
        if grp.scale != PIXEL and grp.kind == CATEGORICAL:
            tgt, w = tgt[:, 0], w[:, 0]
        recon[grp.name] = (tgt, w / count)
    b = Batch([s.id for s in samples], x, recon, frozenset(absent))
    if with_labels:
        if any(s.label is None for s in samples):
            raise ModelError("missing label in batch")
        lab = np.stack([s.label for s in samples])
        msk = np.stack([s.label_mask for s in samples]).astype(np.float64)
        total = msk.sum()
        if total == 0:
            raise ModelError("no supervised pixels")
        b.label, b.label_weights = lab, msk / total
    return b


# --------------------------------------------------------------------------
# losses


def recon_loss_graph(rec: tc.Tensor, target, weights, kind: str) -> tc.Tensor:
    if kind == CATEGORICAL:
        return tc.weighted_softmax_ce(rec, target, weights)
    return tc.weighted_sq_error(rec, target, weights)


def batch_recon_losses(recons: dict, batch: Batch, cfg: ModelConfig) -> dict:
    kinds = {g.name: g.kind for g in cfg.groups}
    return {name: recon_loss_graph(recons[name], t, w, kinds[name])
            for name, (t, w) in batch.recon.items()}


def task_loss_graph(pred: tc.Tensor, batch: Batch, cfg: ModelConfig) -> tc.Tensor:
    if batch.label is None:
        raise ModelError("missing label")
    if cfg.task.kind == MULTILABEL:
        return tc.weighted_bce_with_logits(pred, batch.label, batch.label_weights)
    return tc.weighted_sq_error(pred, batch.label, batch.label_weights)


# --------------------------------------------------------------------------
# array-level convenience API


def encode(tile, input_modalities, theta: ParamStore, cfg: ModelConfig, stats=None) -> np.ndarray:
    """Embedding grid (D, H/p, W/p) of one tile.

    If ``stats`` is given the tile is normalized first; otherwise it is
    assumed to be normalized already.
    """
    for name in input_modalities:
        if not tile.has(name):
            raise ModelError(f"tile {tile.id}: input modality {name!r} is missing")
    if stats is not None:
        tile = normalize_tile(tile, stats, cfg.schema)
    x = np.concatenate([tile.pixel_data[n] for n in input_modalities], axis=0)
    if x.shape != (cfg.input_bands,) + cfg.hw:
        raise ModelError(f"input shape {x.shape} does not match the encoder")
    tape = tc.Tape()
    emb = encode_graph(tape.constant(patchify(x, cfg.patch_size)[None]), register(tape, theta, "", False))
    return emb.value[0].T.reshape(cfg.embed_dim, *cfg.grid)


def _emb_tensor(tape, embeddings: np.ndarray):
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 3:
        e = e[None]
    N, D = e.shape[:2]
    return tape.constant(e.reshape(N, D, -1).transpose(0, 2, 1))


def decode_task(embeddings: np.ndarray, g: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Prediction from a (D, gh, gw) or (N, D, gh, gw) embedding grid."""
    tape = tc.Tape()
    single = np.ndim(embeddings) == 3
    y = task_graph(_emb_tensor(tape, embeddings), register(tape, g, "", False), cfg).value
    if cfg.task.kind == REGRESSION_PIXEL:
        y = y.reshape(-1, *cfg.hw)
    return y[0] if single else y


def decode_modalities(embeddings: np.ndarray, alpha: ParamStore, cfg: ModelConfig) -> dict:
    """Per-modality reconstructions of one tile's embedding grid.

    Pixel modalities come back as (channels, H, W), tile modalities as
    (channels,), where channels is the band count or K logits.
    """
    if np.ndim(embeddings) != 3:
        raise ModelError("expected a single (D, gh, gw) embedding grid")
    if alpha["conv_w"].shape[1] != cfg.total_channels:
        raise ModelError("modality decoder does not match the schema's channel groups")
    tape = tc.Tape()
    rec = modality_graph(_emb_tensor(tape, embeddings), register(tape, alpha, "", False), cfg)
    out = {}
    for grp in cfg.groups:
        v = rec[grp.name].value[0]
        out[grp.name] = v.T.reshape(-1, *cfg.hw) if grp.scale == PIXEL else v
    return out


def modality_loss(reconstruction: np.ndarray, target: np.ndarray, kind: str, valid=None):
    """Single-tile reconstruction loss ``(value, absent)``.

    Continuous: MSE over valid elements (reconstruction and target share a
    shape). Categorical: mean softmax cross-entropy over valid positions,
    with logits along axis 0 and integer classes in ``target``.
    """
    rec = np.asarray(reconstruction, dtype=np.float64)
    tgt = np.asarray(target)
    if kind == CATEGORICAL:
        if rec.shape[1:] != tgt.shape:
            raise ModelError(f"logits {rec.shape} vs target {tgt.shape}")
        ok = np.ones(tgt.shape, bool) if valid is None else np.asarray(valid, bool)
        n = int(ok.sum())
        if n == 0:
            return 0.0, True
        z = np.moveaxis(rec, 0, -1)
        tape = tc.Tape()
        loss = tc.weighted_softmax_ce(tape.constant(z), tgt.astype(np.int64), ok / n)
        return float(loss.value), False
    if rec.shape != tgt.shape:
        raise ModelError(f"reconstruction {rec.shape} vs target {tgt.shape}")
    ok = np.ones(tgt.shape, bool) if valid is None else np.asarray(valid, bool)
    n = int(ok.sum())
    if n == 0:
        return 0.0, True
    r = np.where(ok, rec - tgt, 0.0)
    return float(np.sum(r * r) / n), False


def task_loss(prediction, label, task: Task) -> float:
    """MSE for regression (pixel labels masked at no-data), mean BCE-with-logits for multilabel."""
    if label is None:
        raise ModelError("missing label")
    pred = np.asarray(prediction, dtype=np.float64)
    lab = np.asarray(label, dtype=np.float64)
    if pred.shape != lab.shape:
        raise ModelError(f"prediction {pred.shape} vs label {lab.shape}")
    tape = tc.Tape()
    p = tape.constant(pred)
    if task.kind == MULTILABEL:
        return float(tc.bce_with_logits(p, lab).value)
    ok = lab != LABEL_NO_DATA if task.kind == REGRESSION_PIXEL else np.ones(lab.shape, bool)
    n = int(ok.sum())
    if n == 0:
        raise ModelError("no supervised pixels")
    return float(tc.weighted_sq_error(p, np.where(ok, lab, 0.0), ok / n).value)


def forward_batch(params: ModelParams, batch: Batch, cfg: ModelConfig):
    """Inference-only task predictions for a batch."""
    tape = tc.Tape()
    emb = encode_graph(tape.constant(batch.x), register(tape, params.encoder, "", False))
    pred = task_graph(emb, register(tape, params.task_decoder, "", False), cfg)
    return pred.value


def predict(params: ModelParams, samples: list, cfg: ModelConfig, chunk: int = 64) -> dict:
    """JT inference: ``{tile id: prediction}``."""
    out = {}
    samples = sorted(samples, key=lambda s: s.id)
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        b = Batch([s.id for s in part], np.stack([s.x for s in part]))
        pred = forward_batch(params, b, cfg)
        for sid, p in zip(b.ids, pred):
            out[sid] = p
    return out


# --------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, extra: dict) -> None:
    stores = params.stores()
    manifest = {
        "format": "tttmmr-checkpoint/1",
        "architecture": cfg.to_json(),
        "parameter_counts": {k: s.size for k, s in stores.items()},
        "parameter_layout": {k: [[n, list(s[n].shape)] for n in s.names] for k, s in stores.items()},
        "blob_order": list(stores),
        **extra,
    }
    storage.write_container(path, manifest, [s.flat() for s in stores.values()])


def load_checkpoint(path):
    """Return ``(params, cfg, manifest)``."""
    manifest, blobs = storage.read_container(path)
    if manifest.get("format") != "tttmmr-checkpoint/1":
        raise storage.ContainerError(f"{path}: not a checkpoint")
    cfg = ModelConfig.from_json(manifest["architecture"])
    stores = []
    for key, blob in zip(manifest["blob_order"], blobs):
        layout = manifest["parameter_layout"][key]
        arrays, pos = {}, 0
        for name, shape in layout:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = blob[pos:pos + n].reshape(shape)
            pos += n
        stores.append(ParamStore(arrays))
    return ModelParams(*stores), cfg, manifest
