"""Modality schema, tiles, normalization statistics and the synthetic world.

The default schema carries the twelve modalities of the benchmark with their
band counts, scales and no-data sentinels. Geolocation and acquisition month
are stored in their cyclic encodings since that is what gets reconstructed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import storage

PIXEL, TILE = "pixel", "tile"
CONTINUOUS, CATEGORICAL = "continuous", "categorical"

REGRESSION_TILE = "regression-tile"
REGRESSION_PIXEL = "regression-pixel"
MULTILABEL = "multilabel"
TASK_KINDS = (REGRESSION_TILE, REGRESSION_PIXEL, MULTILABEL)

LABEL_NO_DATA = -9999.0


@dataclass(frozen=True)
class ModalitySchema:
    name: str
    scale: str
    kind: str
    bands: int
    no_data: Optional[float] = None
    num_classes: Optional[int] = None
    normalize: bool = True

    def __post_init__(self):
        if self.scale not in (PIXEL, TILE):
            raise ValueError(f"{self.name}: scale must be pixel or tile")
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ValueError(f"{self.name}: kind must be continuous or categorical")
        if self.bands < 1:
            raise ValueError(f"{self.name}: bands must be >= 1")
        if self.kind == CATEGORICAL:
            if self.bands != 1 or self.num_classes is None or self.num_classes < 2:
                raise ValueError(f"{self.name}: categorical needs bands == 1 and K >= 2")
            if self.no_data is not None and self.no_data != self.num_classes:
                raise ValueError(f"{self.name}: categorical no-data must be class index K")

    @property
    def channels(self) -> int:
        """Decoder output channels: band values, or K logits."""
        return self.num_classes if self.kind == CATEGORICAL else self.bands


def default_schema() -> tuple:
    cat = CATEGORICAL
    return (
        ModalitySchema("sentinel2", PIXEL, CONTINUOUS, 12, 65535.0),
        ModalitySchema("sentinel1", PIXEL, CONTINUOUS, 8, -9999.0),
        ModalitySchema("aster_gdem", PIXEL, CONTINUOUS, 2, -9999.0),
        ModalitySchema("eth_gch", PIXEL, CONTINUOUS, 2, 255.0),
        ModalitySchema("dynamic_world", PIXEL, cat, 1, 9.0, 9),
        ModalitySchema("esa_worldcover", PIXEL, cat, 1, 11.0, 11),
        ModalitySchema("precipitation", TILE, CONTINUOUS, 3, -9999.0),
        ModalitySchema("temperature", TILE, CONTINUOUS, 9, -9999.0),
        ModalitySchema("geolocation", TILE, CONTINUOUS, 4, None, normalize=False),
        ModalitySchema("sentinel2_date", TILE, CONTINUOUS, 2, None, normalize=False),
        ModalitySchema("biome", TILE, cat, 1, 13.0, 13),
        ModalitySchema("ecoregion", TILE, cat, 1, 846.0, 846),
    )


# modalities that are never missing on a stored tile
ALWAYS_PRESENT = ("sentinel2", "geolocation", "sentinel2_date")


def schema_to_json(schema) -> list:
    return [asdict(m) for m in schema]


def schema_from_json(items) -> tuple:
    return tuple(ModalitySchema(**m) for m in items)


def schema_hash(schema) -> str:
    return storage.sha256_text(storage.dumps_json(schema_to_json(schema)))


@dataclass(frozen=True)
class Task:
    kind: str = REGRESSION_TILE
    num_classes: int = 1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == MULTILABEL and self.num_classes < 1:
            raise ValueError("multilabel task needs num_classes >= 1")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.kind == MULTILABEL else 1


@dataclass
class Tile:
    id: int
    lonlat: tuple
    month: int
    pixel_data: dict
    tile_data: dict
    missing: frozenset = frozenset()
    label: object = None

    def has(self, name: str) -> bool:
        return name not in self.missing and (name in self.pixel_data or name in self.tile_data)

    def values(self, name: str) -> np.ndarray:
        if name in self.pixel_data:
            return self.pixel_data[name]
        return self.tile_data[name]


@dataclass
class Dataset:
    schema: tuple
    tiles: list
    task: Task
    tile_size: int = 16
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [t.id for t in self.tiles]
        if len(set(ids)) != len(ids):
            raise ValueError("tile ids must be unique")
        self._by_id = {t.id: t for t in self.tiles}

    def modality(self, name: str) -> ModalitySchema:
        for m in self.schema:
            if m.name == name:
                return m
        raise KeyError(name)

    def tile(self, tile_id: int) -> Tile:
        return self._by_id[tile_id]

    def subset(self, ids) -> list:
        return [self._by_id[i] for i in sorted(ids)]


def validate_tile(tile: Tile, schema, tile_size: int) -> None:
    for m in schema:
        present = m.name in tile.pixel_data or m.name in tile.tile_data
        if m.name in tile.missing:
            if present:
                raise ValueError(f"tile {tile.id}: {m.name} listed missing but has data")
            continue
        if not present:
            raise ValueError(f"tile {tile.id}: {m.name} neither present nor missing")
        v = tile.values(m.name)
        want = (m.bands, tile_size, tile_size) if m.scale == PIXEL else (m.bands,)
        if v.shape != want:
            raise ValueError(f"tile {tile.id}: {m.name} has shape {v.shape}, expected {want}")
        if m.kind == CATEGORICAL:
            ok = (v == np.round(v)) & (((v >= 0) & (v < m.num_classes)) | (v == m.no_data))
            if not np.all(ok):
                raise ValueError(f"tile {tile.id}: {m.name} has invalid class values")


# --------------------------------------------------------------------------
# cyclic encodings


def month_encoding(month: int) -> np.ndarray:
    if not 1 <= int(month) <= 12 or int(month) != month:
        raise ValueError(f"month must be an integer in 1..12, got {month}")
    a = math.pi * month / 6.0
    return np.array([math.cos(a), math.sin(a)])


def geolocation_encoding(lonlat) -> np.ndarray:
    lon, lat = lonlat
    if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
        raise ValueError(f"lon/lat out of range: {lonlat}")
    lo, la = math.radians(lon), math.radians(lat)
    return np.array([math.cos(lo), math.sin(lo), math.cos(la), math.sin(la)])


# --------------------------------------------------------------------------
# normalization


class DegenerateBandError(ValueError):
    pass


@dataclass
class NormStats:
    """Per-band mean and population std for each normalized modality."""

    mean: dict
    std: dict

    def to_json(self) -> dict:
        return {
            "ddof": 0,
            "mean": {k: list(map(float, v)) for k, v in sorted(self.mean.items())},
            "std": {k: list(map(float, v)) for k, v in sorted(self.std.items())},
        }

    @classmethod
    def from_json(cls, obj) -> "NormStats":
        return cls(
            mean={k: np.array(v, dtype=np.float64) for k, v in obj["mean"].items()},
            std={k: np.array(v, dtype=np.float64) for k, v in obj["std"].items()},
        )


def _valid_mask(values: np.ndarray, m: ModalitySchema) -> np.ndarray:
    if m.no_data is None:
        return np.ones(values.shape, dtype=bool)
    return values != m.no_data


def compute_norm_stats(dataset: Dataset, train_ids) -> NormStats:
    """Masked per-band mean/std over the training tiles."""
    train_ids = sorted(set(int(i) for i in train_ids))
    if not train_ids:
        raise ValueError("train_ids is empty")
    tiles = dataset.subset(train_ids)
    means, stds = {}, {}
    for m in dataset.schema:
        if m.kind != CONTINUOUS or not m.normalize:
            continue
        per_band = [[] for _ in range(m.bands)]
        for t in tiles:
            if not t.has(m.name):
                continue
            v = t.values(m.name).reshape(m.bands, -1)
            ok = _valid_mask(v, m)
            for b in range(m.bands):
                per_band[b].append(v[b][ok[b]])
        mu = np.empty(m.bands)
        sd = np.empty(m.bands)
        for b in range(m.bands):
            vals = np.concatenate(per_band[b]) if per_band[b] else np.empty(0)
            if vals.size == 0:
                raise DegenerateBandError(f"{m.name} band {b}: no valid values (empty mask)")
            mu[b] = vals.mean()
            sd[b] = math.sqrt(np.mean((vals - mu[b]) ** 2))
            if sd[b] == 0.0:
                raise DegenerateBandError(
                    f"{m.name} band {b}: zero variance (mean {mu[b]!r})")
        means[m.name], stds[m.name] = mu, sd
    return NormStats(means, stds)


def _band_shape(v):
    return (-1,) + (1,) * (v.ndim - 1)


def normalize_tile(tile: Tile, stats: NormStats, schema) -> Tile:
    """Center-normalize continuous modalities; no-data positions become 0."""
    pix, til = dict(tile.pixel_data), dict(tile.tile_data)
    for m in schema:
        if m.kind != CONTINUOUS or not m.normalize or not tile.has(m.name):
            continue
        if m.name not in stats.mean:
            raise KeyError(f"no normalization statistics for {m.name}")
        v = tile.values(m.name)
        mu = stats.mean[m.name].reshape(_band_shape(v))
        sd = stats.std[m.name].reshape(_band_shape(v))
        out = np.where(_valid_mask(v, m), (v - mu) / sd, 0.0)
        (pix if m.scale == PIXEL else til)[m.name] = out
    return replace(tile, pixel_data=pix, tile_data=til)


def denormalize_tile(tile: Tile, stats: NormStats, schema) -> Tile:
    """Inverse of :func:`normalize_tile` for valid positions (no-data stays 0)."""
    pix, til = dict(tile.pixel_data), dict(tile.tile_data)
    for m in schema:
        if m.kind != CONTINUOUS or not m.normalize or not tile.has(m.name):
            continue
        v = tile.values(m.name)
        out = v * stats.std[m.name].reshape(_band_shape(v)) + stats.mean[m.name].reshape(_band_shape(v))
        (pix if m.scale == PIXEL else til)[m.name] = out
    return replace(tile, pixel_data=pix, tile_data=til)


def nodata_masks(tile: Tile, schema) -> dict:
    """Boolean validity masks of the raw (un-normalized) tile."""
    return {m.name: _valid_mask(tile.values(m.name), m) for m in schema if tile.has(m.name)}


# --------------------------------------------------------------------------
# GeoJSON


class GeoJSONError(ValueError):
    pass


def ingest_points(text: str) -> list:
    """Parse a FeatureCollection of Points with integer ids into ``[(id, (lon, lat))]``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GeoJSONError(f"malformed document: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise GeoJSONError("expected a FeatureCollection")
    feats = doc.get("features")
    if not isinstance(feats, list):
        raise GeoJSONError("FeatureCollection.features must be a list")
    out, seen = [], set()
    for k, f in enumerate(feats):
        if not isinstance(f, dict) or f.get("type") != "Feature":
            raise GeoJSONError(f"feature {k}: not a Feature")
        geom = f.get("geometry")
        if not isinstance(geom, dict) or geom.get("type") != "Point":
            raise GeoJSONError(f"feature {k}: geometry must be a Point")
        coords = geom.get("coordinates")
        if (not isinstance(coords, list) or len(coords) < 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in coords[:2])):
            raise GeoJSONError(f"feature {k}: bad coordinates")
        lon, lat = float(coords[0]), float(coords[1])
        if not (-180 <= lon <= 180 and -90 <= lat <= 90):
            raise GeoJSONError(f"feature {k}: coordinates out of range")
        fid = f.get("id")
        if not isinstance(fid, int) or isinstance(fid, bool):
            raise GeoJSONError(f"feature {k}: id must be an integer")
        if fid in seen:
            raise GeoJSONError(f"duplicate id {fid}")
        seen.add(fid)
        out.append((fid, (lon, lat)))
    return out


# --------------------------------------------------------------------------
# synthetic world

# rough outline of Africa in lon/lat degrees
AFRICA = (
    (-17.0, 14.0), (-17.0, 28.0), (-6.0, 36.0), (10.0, 37.5), (32.0, 31.5),
    (43.0, 12.0), (51.5, 12.0), (40.0, -15.0), (33.0, -34.5), (18.0, -35.0),
    (12.0, -17.0), (9.0, 4.0), (-8.0, 4.0),
)


@dataclass(frozen=True)
class WorldConfig:
    n_tiles: int = 1000
    tile_size: int = 16
    task: str = REGRESSION_TILE
    n_classes: int = 10
    missing_rate: float = 0.0
    nodata_rate: float = 0.0
    region: tuple = AFRICA
    region_fraction: float = 0.2
    region_shift: float = 1.0
    autocorrelation: bool = True
    nuisance_scale: float = 1.0
    n_bumps: int = 12
    label_noise: float = 0.1
    texture_scale: float = 0.3
    pixel_label_density: float = 0.1
    lon_range: tuple = (-180.0, 180.0)
    lat_range: tuple = (-60.0, 75.0)

    def validate(self):
        if self.n_tiles < 1:
            raise ValueError("n_tiles must be >= 1")
        if self.tile_size < 2:
            raise ValueError("tile_size must be >= 2")
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        if not 0.0 <= self.nodata_rate < 1.0:
            raise ValueError("nodata_rate must be in [0, 1)")
        if not 0.0 <= self.region_fraction <= 1.0:
            raise ValueError("region_fraction must be in [0, 1]")
        if len(self.region) < 3:
            raise ValueError("region polygon needs >= 3 vertices")
        if self.n_bumps < 1 or self.n_classes < 1:
            raise ValueError("n_bumps and n_classes must be >= 1")
        if not 0.0 < self.pixel_label_density <= 1.0:
            raise ValueError("pixel_label_density must be in (0, 1]")


class _BumpField:
    """Sum of Gaussian bumps over the lon/lat plane, scaled to unit std."""

    def __init__(self, rng, n, lon_range, lat_range):
        self.cx = rng.uniform(*lon_range, size=n)
        self.cy = rng.uniform(*lat_range, size=n)
        self.amp = rng.normal(size=n)
        self.width = rng.uniform(20.0, 50.0, size=n)
        gx, gy = np.meshgrid(np.linspace(*lon_range, 73), np.linspace(*lat_range, 28))
        raw = self._raw(gx.ravel(), gy.ravel())
        self.offset = raw.mean()
        self.norm = raw.std()

    def _raw(self, lon, lat):
        lon = np.asarray(lon, dtype=np.float64)[..., None]
        lat = np.asarray(lat, dtype=np.float64)[..., None]
        d2 = (lon - self.cx) ** 2 + (lat - self.cy) ** 2
        return (self.amp * np.exp(-d2 / (2.0 * self.width ** 2))).sum(axis=-1)

    def __call__(self, lon, lat):
        return (self._raw(lon, lat) - self.offset) / self.norm


def _texture(rng, size, coarse=4):
    from .tensorcore import bilinear_matrix

    m = bilinear_matrix((coarse, coarse), (size, size))
    return (m @ rng.normal(size=coarse * coarse)).reshape(size, size)


def _digitize(v, k, lo=-2.0, hi=2.0):
    return np.digitize(v, np.linspace(lo, hi, k - 1)).astype(np.float64)


def _sample_locations(rng, cfg: WorldConfig):
    from .splits import point_in_polygon

    xs = [p[0] for p in cfg.region]
    ys = [p[1] for p in cfg.region]
    out = []
    for _ in range(cfg.n_tiles):
        inside = rng.random() < cfg.region_fraction
        while True:
            if inside:
                p = (rng.uniform(min(xs), max(xs)), rng.uniform(min(ys), max(ys)))
            else:
                p = (rng.uniform(*cfg.lon_range), rng.uniform(*cfg.lat_range))
            if point_in_polygon(p, cfg.region) == inside:
                break
        out.append((float(p[0]), float(p[1])))
    return out


def generate_world(config: WorldConfig = WorldConfig(), seed: int = 0) -> Dataset:
    """Deterministic synthetic multimodal dataset.

    A smooth latent field drives the label and several modalities; an
    independent nuisance field is mixed into the input optical bands with the
    same loading as the latent, so the input alone cannot separate the two.
    Tiles inside ``config.region`` have their latent shifted by
    ``config.region_shift``.
    """
    from .splits import point_in_polygon

    config.validate()
    cfg = config
    schema = default_schema()
    ss = np.random.SeedSequence(int(seed))
    s_world, s_loc, s_tiles = ss.spawn(3)
    wr = np.random.default_rng(s_world)
    latent = _BumpField(wr, cfg.n_bumps, cfg.lon_range, cfg.lat_range)
    nuisance = _BumpField(wr, cfg.n_bumps, cfg.lon_range, cfg.lat_range)
    elevation = _BumpField(wr, cfg.n_bumps, cfg.lon_range, cfg.lat_range)
    s2_load = wr.uniform(0.5, 1.5, size=12)
    s2_base = wr.uniform(800.0, 2500.0, size=12)
    s1_load = wr.uniform(0.5, 1.5, size=8)
    precip_load = wr.uniform(0.5, 1.5, size=3)
    temp_load = wr.uniform(0.5, 1.5, size=9)
    cls_slope = wr.choice([-1.0, 1.0], size=cfg.n_classes) * wr.uniform(0.8, 1.6, size=cfg.n_classes)
    cls_offset = wr.normal(0.0, 0.7, size=cfg.n_classes)

    locs = _sample_locations(np.random.default_rng(s_loc), cfg)
    tr = np.random.default_rng(s_tiles)
    H = cfg.tile_size
    optional = [m.name for m in schema if m.name not in ALWAYS_PRESENT]
    n_eco_lon, n_eco_lat = 47, 18
    tiles = []
    for tid, (lon, lat) in enumerate(locs):
        in_region = point_in_polygon((lon, lat), cfg.region)
        z = float(latent(lon, lat)) + (cfg.region_shift if in_region else 0.0)
        if cfg.autocorrelation:
            n = cfg.nuisance_scale * float(nuisance(lon, lat))
        else:
            n = cfg.nuisance_scale * tr.normal()
        e = float(elevation(lon, lat))
        z_pix = z + cfg.texture_scale * _texture(tr, H)
        n_pix = n + 0.5 * cfg.texture_scale * _texture(tr, H)
        e_pix = e + cfg.texture_scale * _texture(tr, H)
        month = int(tr.integers(1, 13))
        eps = lambda *shape: tr.normal(size=shape)  # noqa: E731

        s = (z_pix + n_pix)[None]
        pix = {
            "sentinel2": s2_base[:, None, None] + 400.0 * s2_load[:, None, None] * s + 40.0 * eps(12, H, H),
            "sentinel1": -12.0 + 3.0 * s1_load[:, None, None] * (n_pix + 0.3 * z_pix)[None] + 0.8 * eps(8, H, H),
            "aster_gdem": np.stack([800.0 + 600.0 * e_pix + 20.0 * eps(H, H),
                                    12.0 + 4.0 * (e_pix - e) / max(cfg.texture_scale, 1e-9) + eps(H, H)]),
            "eth_gch": np.stack([12.0 + 6.0 * z_pix + 1.5 * eps(H, H), 3.0 + 0.5 * eps(H, H)]),
            "dynamic_world": _digitize(z_pix + 0.3 * eps(H, H), 9)[None],
            "esa_worldcover": _digitize(e_pix + 0.5 * n_pix + 0.3 * eps(H, H), 11)[None],
        }
        eco = min(int((lon + 180.0) / 360.0 * n_eco_lon), n_eco_lon - 1) * n_eco_lat \
            + min(int((lat + 90.0) / 180.0 * n_eco_lat), n_eco_lat - 1)
        til = {
            "precipitation": 80.0 + 30.0 * precip_load * z + 8.0 * eps(3),
            "temperature": 20.0 - 0.25 * abs(lat) + 2.0 * temp_load * z + 0.7 * eps(9),
            "geolocation": geolocation_encoding((lon, lat)),
            "sentinel2_date": month_encoding(month),
            "biome": np.array([_digitize(z + 0.2 * tr.normal(), 13)]),
            "ecoregion": np.array([float(eco)]),
        }

        if cfg.task == REGRESSION_TILE:
            label = float(z_pix.mean() + cfg.label_noise * tr.normal())
        elif cfg.task == REGRESSION_PIXEL:
            grid = z_pix + cfg.label_noise * eps(H, H)
            keep = tr.random((H, H)) < cfg.pixel_label_density
            keep.flat[int(tr.integers(H * H))] = True
            label = np.where(keep, grid, LABEL_NO_DATA)
        else:
            logit = 3.0 * (cls_slope * z + cls_offset)
            label = (tr.random(cfg.n_classes) < 1.0 / (1.0 + np.exp(-logit))).astype(np.float64)

        missing = set()
        if cfg.missing_rate > 0:
            draws = tr.random(len(optional))
            missing = {name for name, u in zip(optional, draws) if u < cfg.missing_rate}
        if cfg.nodata_rate > 0:
            for m in schema:
                if m.no_data is None or m.name in missing:
                    continue
                store = pix if m.scale == PIXEL else til
                v = store[m.name]
                hole = tr.random(v.shape[1:] if m.scale == PIXEL else v.shape) < cfg.nodata_rate
                store[m.name] = np.where(hole, m.no_data, v)
        for name in missing:
            pix.pop(name, None)
            til.pop(name, None)
        tiles.append(Tile(tid, (lon, lat), month, pix, til, frozenset(missing), label))

    task = Task(cfg.task, cfg.n_classes if cfg.task == MULTILABEL else 1)
    cfg_json = asdict(cfg)
    cfg_json["region"] = [list(p) for p in cfg.region]
    return Dataset(schema, tiles, task, H, int(seed), cfg_json)


def latent_proxy(tile: Tile) -> float:
    """Mean canopy height of a tile; it tracks the hidden latent field."""
    return float(tile.pixel_data["eth_gch"][0].mean())


# --------------------------------------------------------------------------
# container IO


def _label_kind(task: Task) -> str:
    return {REGRESSION_TILE: "scalar", REGRESSION_PIXEL: "grid", MULTILABEL: "bits"}[task.kind]


def save_dataset(dataset: Dataset, path, norm_stats: Optional[NormStats] = None) -> None:
    """Write the dataset container (manifest + one float64 blob per tile)."""
    tiles_meta, blobs = [], []
    for t in dataset.tiles:
        parts = []
        for m in dataset.schema:
            if t.has(m.name):
                parts.append(np.asarray(t.values(m.name), dtype=np.float64).ravel())
        has_label = t.label is not None
        if has_label:
            parts.append(np.atleast_1d(np.asarray(t.label, dtype=np.float64)).ravel())
        blobs.append(np.concatenate(parts) if parts else np.empty(0))
        tiles_meta.append({
            "id": t.id, "lonlat": [t.lonlat[0], t.lonlat[1]], "month": t.month,
            "missing": sorted(t.missing), "has_label": has_label,
        })
    manifest = {
        "format": "tttmmr-dataset/1",
        "layout": ("per tile: present modalities in schema order, each bands x H x W (pixel) "
                   "or bands (tile), row-major little-endian float64; then the label "
                   "(scalar: 1 value, grid: H*W values, bits: C values)"),
        "schema": schema_to_json(dataset.schema),
        "schema_hash": schema_hash(dataset.schema),
        "task": {"kind": dataset.task.kind, "num_classes": dataset.task.num_classes,
                 "label": _label_kind(dataset.task), "label_no_data": LABEL_NO_DATA},
        "tile_size": dataset.tile_size,
        "tile_count": len(dataset.tiles),
        "seed": dataset.seed,
        "config": dataset.config,
        "norm_stats": norm_stats.to_json() if norm_stats is not None else None,
        "tiles": tiles_meta,
    }
    storage.write_container(path, manifest, blobs)


def load_dataset(path) -> Dataset:
    manifest, blobs = storage.read_container(path)
    if manifest.get("format") != "tttmmr-dataset/1":
        raise storage.ContainerError(f"{path}: not a dataset container")
    schema = schema_from_json(manifest["schema"])
    task = Task(manifest["task"]["kind"], manifest["task"]["num_classes"])
    H = manifest["tile_size"]
    tiles = []
    for meta, blob in zip(manifest["tiles"], blobs):
        pos = 0
        pix, til = {}, {}
        missing = frozenset(meta["missing"])
        for m in schema:
            if m.name in missing:
                continue
            shape = (m.bands, H, H) if m.scale == PIXEL else (m.bands,)
            n = int(np.prod(shape))
            (pix if m.scale == PIXEL else til)[m.name] = blob[pos : pos + n].reshape(shape).copy()
            pos += n
        label = None
        if meta["has_label"]:
            rest = blob[pos:]
            if task.kind == REGRESSION_TILE:
                label = float(rest[0])
            elif task.kind == REGRESSION_PIXEL:
                label = rest.reshape(H, H).copy()
            else:
                label = rest.copy()
        tiles.append(Tile(meta["id"], tuple(meta["lonlat"]), meta["month"], pix, til, missing, label))
    return Dataset(schema, tiles, task, H, manifest["seed"], manifest["config"])


def dataset_manifest(path) -> dict:
    return storage.read_container(path)[0]


def region_from_config(dataset: Dataset) -> tuple:
    reg = dataset.config.get("region") if dataset.config else None
    return tuple(tuple(p) for p in reg) if reg else AFRICA


def read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")
