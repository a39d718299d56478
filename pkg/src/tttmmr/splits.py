"""Train/validation/test splits and test-batch partitioning.

Locations are treated as planar (lon, lat) points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_RATIOS = (0.70, 0.15, 0.15)


def _on_segment(p, a, b, eps=1e-12) -> bool:
    (px, py), (ax, ay), (bx, by) = p, a, b
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if abs(cross) > eps * max(1.0, abs(bx - ax) + abs(by - ay)):
        return False
    return min(ax, bx) - eps <= px <= max(ax, bx) + eps and min(ay, by) - eps <= py <= max(ay, by) + eps


def point_in_polygon(lonlat, polygon) -> bool:
    """Even-odd ray casting; points on the boundary count as inside."""
    if len(polygon) < 3:
        raise ValueError("degenerate polygon: need at least 3 vertices")
    x, y = float(lonlat[0]), float(lonlat[1])
    inside = False
    n = len(polygon)
    for i in range(n):
        a, b = polygon[i], polygon[(i + 1) % n]
        if _on_segment((x, y), a, b):
            return True
        (ax, ay), (bx, by) = a, b
        if (ay > y) != (by > y):
            xcross = ax + (y - ay) * (bx - ax) / (by - ay)
            if x < xcross:
                inside = not inside
    return inside


@dataclass
class SplitSet:
    train100: list
    train50: list
    train5: list
    validation: list
    random_test: list
    geo_test: list
    region: tuple
    seed: int

    def train(self, subset: int) -> list:
        return {100: self.train100, 50: self.train50, 5: self.train5}[int(subset)]

    def test(self, split: str) -> list:
        return {"random": self.random_test, "geo": self.geo_test}[split]

    def check_nesting(self) -> bool:
        return set(self.train5) <= set(self.train50) <= set(self.train100)

    def to_json(self, norm_stats=None, schema_hash=None) -> dict:
        return {
            "seed": self.seed,
            "region": [list(p) for p in self.region],
            "train100": self.train100, "train50": self.train50, "train5": self.train5,
            "validation": self.validation, "random_test": self.random_test,
            "geo_test": self.geo_test,
            "norm_stats": norm_stats.to_json() if norm_stats is not None else None,
            "schema_hash": schema_hash,
        }

    @classmethod
    def from_json(cls, obj) -> "SplitSet":
        return cls(
            train100=list(obj["train100"]), train50=list(obj["train50"]), train5=list(obj["train5"]),
            validation=list(obj["validation"]), random_test=list(obj["random_test"]),
            geo_test=list(obj["geo_test"]), region=tuple(tuple(p) for p in obj["region"]),
            seed=obj["seed"],
        )


def split_points(points, region, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitSet:
    """Split ``[(id, (lon, lat))]``; see :func:`make_splits`."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if not points:
        raise ValueError("no tiles to split")
    pts = sorted(points, key=lambda p: p[0])
    geo = [i for i, ll in pts if point_in_polygon(ll, region)]
    geo_set = set(geo)
    rest = np.array([i for i, _ in pts if i not in geo_set], dtype=np.int64)
    if rest.size == 0:
        raise ValueError("every tile falls inside the region; nothing left for train/val/test")
    rng = np.random.default_rng(seed)
    order = rest[rng.permutation(rest.size)]
    n = rest.size
    c1 = int(math.floor(ratios[0] * n + 1e-9))
    c2 = int(math.floor((ratios[0] + ratios[1]) * n + 1e-9))
    train = order[:c1]
    sub = train[rng.permutation(train.size)]
    n50 = max(1, int(math.floor(0.5 * train.size))) if train.size else 0
    n5 = max(1, int(math.floor(0.05 * train.size))) if train.size else 0
    return SplitSet(
        train100=sorted(int(i) for i in train),
        train50=sorted(int(i) for i in sub[:n50]),
        train5=sorted(int(i) for i in sub[:n5]),
        validation=sorted(int(i) for i in order[c1:c2]),
        random_test=sorted(int(i) for i in order[c2:]),
        geo_test=sorted(geo),
        region=tuple(tuple(p) for p in region),
        seed=int(seed),
    )


def make_splits(dataset, region, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitSet:
    """Geographic held-out region plus a seeded random 70/15/15 split of the rest.

    Tiles are sorted by id before shuffling, so file order does not matter.
    """
    return split_points([(t.id, t.lonlat) for t in dataset.tiles], region, ratios, seed)


def save_splits(path, splits: SplitSet, norm_stats=None, schema_hash=None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(splits.to_json(norm_stats, schema_hash), sort_keys=True, indent=1))


def load_splits(path):
    """Return ``(SplitSet, raw json)``."""
    obj = json.loads(Path(path).read_text())
    return SplitSet.from_json(obj), obj


# --------------------------------------------------------------------------
# batching


@dataclass
class GeoBatch:
    tile_ids: list
    bbox: tuple  # (lon_min, lat_min, lon_max, lat_max)


def geographic_partition(tiles, batch_size: int) -> list:
    """Contiguous rectangular batches by recursive median splits (k-d style).

    ``tiles`` is a list of ``(id, (lon, lat))``. Each split cuts the current
    rectangle across its wider side; the lower child takes
    ``floor(k/2) * batch_size`` tiles where the node holds ``k * batch_size + r``.
    The remainder ``r = N mod batch_size`` therefore rides along the upper
    children and ends up in the last leaf, which is the only batch larger
    than ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(tiles)
    if n < batch_size:
        raise ValueError(f"need at least batch_size={batch_size} tiles, got {n}")
    pts = [(int(i), float(ll[0]), float(ll[1])) for i, ll in tiles]
    xs = [p[1] for p in pts]
    ys = [p[2] for p in pts]
    root = (min(xs), min(ys), max(xs), max(ys))
    out = []

    def recurse(node, box):
        k = len(node) // batch_size
        if k < 2:
            out.append(GeoBatch(sorted(p[0] for p in node), box))
            return
        x0, y0, x1, y1 = box
        axis = 1 if (x1 - x0) >= (y1 - y0) else 2
        node = sorted(node, key=lambda p: (p[axis], p[0]))
        cut = (k // 2) * batch_size
        lo, hi = node[:cut], node[cut:]
        c = 0.5 * (lo[-1][axis] + hi[0][axis])
        if axis == 1:
            recurse(lo, (x0, y0, c, y1))
            recurse(hi, (c, y0, x1, y1))
        else:
            recurse(lo, (x0, y0, x1, c))
            recurse(hi, (x0, c, x1, y1))

    recurse(pts, root)
    return out


def random_partition(tile_ids, batch_size: int, seed: int) -> list:
    """Seeded shuffle cut into chunks of ``batch_size``; the last absorbs the remainder."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = np.array(sorted(int(i) for i in tile_ids), dtype=np.int64)
    if ids.size < batch_size:
        raise ValueError(f"need at least batch_size={batch_size} tiles, got {ids.size}")
    order = ids[np.random.default_rng(seed).permutation(ids.size)]
    k = ids.size // batch_size
    batches = [sorted(int(i) for i in order[j * batch_size:(j + 1) * batch_size]) for j in range(k - 1)]
    batches.append(sorted(int(i) for i in order[(k - 1) * batch_size:]))
    return batches
