import numpy as np
import pytest

from tttmmr import datamodel as dm
from tttmmr.model import ModelConfig, prepare_samples
from tttmmr.splits import make_splits


@pytest.fixture(scope="session")
def small_world():
    """120 tiles of 8x8 pixels with splits, stats and prepared samples."""
    ds = dm.generate_world(dm.WorldConfig(n_tiles=120, tile_size=8), seed=3)
    splits = make_splits(ds, dm.AFRICA, seed=1)
    stats = dm.compute_norm_stats(ds, splits.train100)
    cfg = ModelConfig(ds.schema, ds.task, 8, patch_size=4, embed_dim=8)
    samples = prepare_samples(ds, [t.id for t in ds.tiles], stats, cfg)
    return {"dataset": ds, "splits": splits, "stats": stats, "cfg": cfg, "samples": samples,
            "locations": {t.id: t.lonlat for t in ds.tiles}}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"criterion {self.number:>2} {status}  {self.title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append((self.number, line))
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c: ...`` records one PASS/FAIL line."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
