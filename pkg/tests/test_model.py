import numpy as np
import pytest

from tttmmr import datamodel as dm
from tttmmr import tensorcore as tc
from tttmmr.model import (ModelConfig, ModelError, ParamStore, batch_recon_losses, decode_modalities,
                          decode_task, encode, encode_graph, init_params, load_checkpoint, make_batch,
                          modality_graph, modality_loss, patchify, predict, register, save_checkpoint,
                          task_graph, task_loss, task_loss_graph)

from helpers import (central_difference, random_params, random_sample, relative_error, tiny_config,
                     tiny_schema)


def tiny_tile(cfg, rng, tile_id=0):
    H = cfg.tile_size
    pix, til = {}, {}
    for m in cfg.schema:
        if m.scale == dm.PIXEL:
            pix[m.name] = (rng.integers(0, m.num_classes, (1, H, H)).astype(float) if m.kind == dm.CATEGORICAL
                           else rng.normal(size=(m.bands, H, H)))
        else:
            til[m.name] = (np.array([float(rng.integers(0, m.num_classes))]) if m.kind == dm.CATEGORICAL
                           else rng.normal(size=m.bands))
    return dm.Tile(tile_id, (0.0, 0.0), 1, pix, til)


def np_upsample(grid, out_hw):
    """(D, gh, gw) -> (D, H, W) via separable align-corners interpolation."""
    def axis_matrix(n_in, n_out):
        m = np.zeros((n_out, n_in))
        for i in range(n_out):
            pos = i * (n_in - 1) / (n_out - 1) if n_out > 1 and n_in > 1 else 0.0
            lo = int(np.floor(pos))
            hi = min(lo + 1, n_in - 1)
            m[i, lo] += 1 - (pos - lo)
            m[i, hi] += pos - lo
        return m
    my, mx = axis_matrix(grid.shape[1], out_hw[0]), axis_matrix(grid.shape[2], out_hw[1])
    return np.einsum("ia,dab,jb->dij", my, grid, mx)


# ---------------------------------------------------------------- structure


def test_param_counts_and_groups():
    cfg = tiny_config()
    p = init_params(cfg, 0)
    F, D = cfg.patch_features, cfg.embed_dim
    assert p.encoder.size == F * D + D + D * D + D == p.encoder.flat().size
    assert set(p.task_decoder.names) == {"ln_gamma", "ln_beta", "fc_w", "fc_b"}
    groups = cfg.groups
    assert [g.name for g in groups] == ["optical", "radar", "landcover", "climate", "zone"]
    assert groups[0].start == 0 and all(a.stop == b.start for a, b in zip(groups, groups[1:]))
    assert {g.name: g.stop - g.start for g in groups} == {"optical": 2, "radar": 1, "landcover": 3,
                                                          "climate": 2, "zone": 4}
    assert p.modality_decoder["conv_w"].shape == (D, cfg.total_channels)
    pix = init_params(tiny_config(dm.REGRESSION_PIXEL), 0)
    assert set(pix.task_decoder.names) == {"conv_w", "conv_b"}


def test_default_model_channels():
    cfg = ModelConfig(dm.default_schema(), dm.Task())
    assert cfg.total_channels == 12 + 8 + 2 + 2 + 9 + 11 + 3 + 9 + 4 + 2 + 13 + 846


def test_input_modality_must_be_pixel_continuous():
    with pytest.raises(ModelError):
        ModelConfig(tiny_schema(), dm.Task(), 4, 2, 3, ("landcover",))
    with pytest.raises(ModelError):
        ModelConfig(tiny_schema(), dm.Task(), 4, 2, 3, ("climate",))


def test_flat_roundtrip(rng):
    s = random_params(tiny_config(), rng).encoder
    assert s.from_flat(s.flat()).checksum() == s.checksum()
    with pytest.raises(ModelError):
        s.from_flat(np.zeros(s.size + 1))


# ---------------------------------------------------------------- encoder


def test_zero_input_zero_bias_gives_zero(rng):
    cfg = tiny_config()
    th = random_params(cfg, rng).encoder
    th = ParamStore({**th.arrays, "b1": np.zeros(3), "b2": np.zeros(3)})
    t = tiny_tile(cfg, rng)
    t.pixel_data["optical"] = np.zeros_like(t.pixel_data["optical"])
    assert np.all(encode(t, ("optical",), th, cfg) == 0.0)


def test_identical_tiles_identical_embeddings(rng):
    cfg = tiny_config()
    th = random_params(cfg, rng).encoder
    t = tiny_tile(cfg, rng)
    assert encode(t, ("optical",), th, cfg).tobytes() == encode(t, ("optical",), th, cfg).tobytes()


def test_single_patch_against_two_layer_map(rng):
    cfg = ModelConfig(tiny_schema(), dm.Task(), 2, 2, 3, ("optical",))
    th = random_params(cfg, rng).encoder
    t = tiny_tile(cfg, rng)
    x = t.pixel_data["optical"].reshape(-1)  # band-major 2x2 patch == patchify order
    want = np.tanh(x @ th["w1"] + th["b1"]) @ th["w2"] + th["b2"]
    np.testing.assert_allclose(encode(t, ("optical",), th, cfg)[:, 0, 0], want, atol=1e-12)


def test_encode_grid_layout(rng):
    cfg = tiny_config(tile_size=8, patch_size=2)
    th = random_params(cfg, rng).encoder
    t = tiny_tile(cfg, rng)
    emb = encode(t, ("optical",), th, cfg)
    x = t.pixel_data["optical"]
    for i in range(4):
        for j in range(4):
            patch = x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1)
            want = np.tanh(patch @ th["w1"] + th["b1"]) @ th["w2"] + th["b2"]
            np.testing.assert_allclose(emb[:, i, j], want, atol=1e-12)


def test_missing_input_modality_is_error(rng):
    cfg = tiny_config()
    t = tiny_tile(cfg, rng)
    t.missing = frozenset({"optical"})
    with pytest.raises(ModelError):
        encode(t, ("optical",), init_params(cfg, 0).encoder, cfg)


def test_patchify_order():
    x = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    p = patchify(x, 2)
    assert p.shape == (4, 8)
    np.testing.assert_array_equal(p[1], x[:, 0:2, 2:4].reshape(-1))


# ---------------------------------------------------------------- decoders


def test_tile_head_constant_field(rng):
    cfg = tiny_config()
    g = random_params(cfg, rng).task_decoder
    e = rng.normal(size=3)
    grid = np.broadcast_to(e[:, None, None], (3, 2, 2)).copy()
    ln = (e - e.mean()) / np.sqrt(e.var() + cfg.ln_eps) * g["ln_gamma"] + g["ln_beta"]
    assert abs(decode_task(grid, g, cfg) - (ln @ g["fc_w"] + g["fc_b"])[0]) < 1e-12


def test_pixel_head_uniform_output(rng):
    cfg = tiny_config(dm.REGRESSION_PIXEL)
    g = random_params(cfg, rng).task_decoder
    grid = np.broadcast_to(rng.normal(size=3)[:, None, None], (3, 2, 2)).copy()
    out = decode_task(grid, g, cfg)
    assert out.shape == (4, 4) and np.ptp(out) < 1e-12


@pytest.mark.parametrize("kind", [dm.REGRESSION_TILE, dm.REGRESSION_PIXEL, dm.MULTILABEL])
def test_task_head_against_numpy(rng, kind):
    cfg = tiny_config(kind, tile_size=8, patch_size=2)
    g = random_params(cfg, rng).task_decoder
    grid = rng.normal(size=(3, 4, 4))
    out = decode_task(grid, g, cfg)
    if kind == dm.REGRESSION_PIXEL:
        up = np_upsample(grid, (8, 8))
        want = np.einsum("dij,do->ij", up, g["conv_w"]) + g["conv_b"][0]
    else:
        e = grid.reshape(3, -1).mean(axis=1)
        ln = (e - e.mean()) / np.sqrt(e.var() + cfg.ln_eps) * g["ln_gamma"] + g["ln_beta"]
        want = ln @ g["fc_w"] + g["fc_b"]
        want = want[0] if kind == dm.REGRESSION_TILE else want
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_modality_decoder_against_numpy(rng):
    cfg = tiny_config(tile_size=8, patch_size=2)
    a = random_params(cfg, rng).modality_decoder
    grid = rng.normal(size=(3, 4, 4))
    rec = decode_modalities(grid, a, cfg)
    up = np_upsample(grid, (8, 8))
    full = np.einsum("dij,dc->cij", up, a["conv_w"]) + a["conv_b"][:, None, None]
    for grp in cfg.groups:
        want = full[grp.start:grp.stop]
        if grp.scale == dm.TILE:
            want = want.mean(axis=(1, 2))  # tile-level = spatial mean of the upsampled channel
        np.testing.assert_allclose(rec[grp.name], want, atol=1e-12)


def test_zero_decoder_zero_reconstruction(rng):
    cfg = tiny_config()
    a = ParamStore({k: np.zeros_like(v) for k, v in init_params(cfg, 0).modality_decoder.arrays.items()})
    rec = decode_modalities(np.zeros((3, 2, 2)), a, cfg)
    assert all(np.all(v == 0) for v in rec.values())


def test_decoders_are_pure(rng):
    cfg = tiny_config()
    p = random_params(cfg, rng)
    grid = rng.normal(size=(3, 2, 2))
    assert decode_task(grid, p.task_decoder, cfg).tobytes() == decode_task(grid, p.task_decoder, cfg).tobytes()


# ---------------------------------------------------------------- losses


def test_modality_loss_examples(rng):
    t = rng.normal(size=(2, 4, 4))
    assert modality_loss(t, t, dm.CONTINUOUS) == (0.0, False)
    v, absent = modality_loss(np.zeros((4, 3, 3)), rng.integers(0, 4, (3, 3)), dm.CATEGORICAL)
    assert abs(v - np.log(4)) < 1e-12 and not absent
    assert modality_loss(t, t + 1, dm.CONTINUOUS, valid=np.zeros(t.shape, bool)) == (0.0, True)


def test_continuous_loss_masks_invalid(rng):
    r, t = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    ok = np.array([[True, False, True], [True, True, False]])
    v, _ = modality_loss(r, t, dm.CONTINUOUS, ok)
    assert abs(v - np.mean((r - t)[ok] ** 2)) < 1e-12


def test_categorical_loss_shift_invariant(rng):
    z = rng.normal(size=(5, 4, 4))
    t = rng.integers(0, 5, (4, 4))
    shift = rng.normal(size=(1, 4, 4)) * 50
    a, _ = modality_loss(z, t, dm.CATEGORICAL)
    b, _ = modality_loss(z + shift, t, dm.CATEGORICAL)
    assert abs(a - b) < 1e-9


def test_task_loss_examples(rng):
    assert task_loss(1.5, 1.5, dm.Task()) == 0.0
    assert abs(task_loss(np.zeros(6), np.array([0, 1, 0, 1, 1, 0.]), dm.Task(dm.MULTILABEL, 6)) - np.log(2)) < 1e-12
    lab = np.full((4, 4), dm.LABEL_NO_DATA)
    with pytest.raises(ModelError, match="no supervised pixels"):
        task_loss(np.zeros((4, 4)), lab, dm.Task(dm.REGRESSION_PIXEL))
    lab[1, 2] = 3.0
    assert task_loss(np.ones((4, 4)), lab, dm.Task(dm.REGRESSION_PIXEL)) == 4.0


def test_batch_without_supervised_pixels():
    cfg = tiny_config(dm.REGRESSION_PIXEL)
    r = np.random.default_rng(0)
    s = random_sample(cfg, r, 0)
    s.label = np.full(16, dm.LABEL_NO_DATA)
    s.label_mask = np.zeros(16, bool)
    with pytest.raises(ModelError, match="no supervised pixels"):
        make_batch([s], cfg, with_labels=True)


def per_tile_recon_oracle(params, samples, cfg):
    """R_m as a plain loop: per-tile modality_loss, averaged over tiles that have the modality."""
    out = {}
    per = {}
    for s in samples:
        tape = tc.Tape()
        emb = encode_graph(tape.constant(s.x[None]), register(tape, params.encoder, "", False))
        grid = emb.value[0].T.reshape(cfg.embed_dim, *cfg.grid)
        rec = decode_modalities(grid, params.modality_decoder, cfg)
        for grp in cfg.groups:
            if grp.name not in s.targets:
                continue
            t, ok = s.targets[grp.name]
            if grp.scale == dm.PIXEL:
                r = rec[grp.name].reshape(grp.stop - grp.start, -1)
                if grp.kind == dm.CONTINUOUS:
                    r = r.T
            else:
                r = rec[grp.name] if grp.kind == dm.CONTINUOUS else rec[grp.name][:, None]
            v, absent = modality_loss(r, t, grp.kind, ok)
            if not absent:
                per.setdefault(grp.name, []).append(v)
    for k, v in per.items():
        out[k] = float(np.mean(v))
    return out


def test_batch_losses_match_per_tile_loop(rng):
    cfg = tiny_config()
    params = random_params(cfg, rng)
    samples = [random_sample(cfg, rng, i, missing=("radar",) if i % 2 else ()) for i in range(6)]
    b = make_batch(samples, cfg)
    tape = tc.Tape()
    emb = encode_graph(tape.constant(b.x), register(tape, params.encoder, "", False))
    losses = batch_recon_losses(modality_graph(emb, register(tape, params.modality_decoder, "", False), cfg), b, cfg)
    oracle = per_tile_recon_oracle(params, samples, cfg)
    assert set(losses) == set(oracle)
    for k in oracle:
        assert abs(float(losses[k].value) - oracle[k]) < 1e-12


def test_identical_tiles_batch_equals_single(rng):
    cfg = tiny_config()
    params = random_params(cfg, rng)
    s = random_sample(cfg, rng, 0)
    copies = [type(s)(i, s.x, s.targets, s.label, s.label_mask) for i in range(5)]
    single = per_tile_recon_oracle(params, [s], cfg)
    b = make_batch(copies, cfg)
    tape = tc.Tape()
    emb = encode_graph(tape.constant(b.x), register(tape, params.encoder, "", False))
    losses = batch_recon_losses(modality_graph(emb, register(tape, params.modality_decoder, "", False), cfg), b, cfg)
    for k, v in single.items():
        assert abs(float(losses[k].value) - v) < 1e-12


# ---------------------------------------------------------------- gradients


def model_losses(params, batch, cfg):
    tape = tc.Tape()
    th = register(tape, params.encoder, "enc.")
    g = register(tape, params.task_decoder, "task.")
    a = register(tape, params.modality_decoder, "mod.")
    emb = encode_graph(tape.constant(batch.x), th)
    out = {"task": task_loss_graph(task_graph(emb, g, cfg), batch, cfg)}
    for k, v in batch_recon_losses(modality_graph(emb, a, cfg), batch, cfg).items():
        out["rec." + k] = v
    return tape, out


@pytest.mark.parametrize("kind", [dm.REGRESSION_TILE, dm.REGRESSION_PIXEL, dm.MULTILABEL])
def test_loss_gradients_finite_differences(rng, kind):
    cfg = tiny_config(kind)
    params = random_params(cfg, rng)
    batch = make_batch([random_sample(cfg, rng, i) for i in range(3)], cfg, with_labels=True)
    tape, losses = model_losses(params, batch, cfg)
    analytic = {k: tc.backward(tape, v) for k, v in losses.items()}
    arrays = {}
    for prefix, store in (("enc.", params.encoder), ("task.", params.task_decoder), ("mod.", params.modality_decoder)):
        for n, v in store.arrays.items():
            arrays[prefix + n] = v

    def f():
        return {k: float(v.value) for k, v in model_losses(params, batch, cfg)[1].items()}

    for name, arr in arrays.items():
        for i in range(arr.size):
            num = central_difference(f, arrays, name, i)
            for k in losses:
                assert relative_error(analytic[k][name].flat[i], num[k]) < 1e-4, (k, name, i)


# ---------------------------------------------------------------- inference and files


def test_predict_matches_decode(small_world):
    cfg, samples = small_world["cfg"], small_world["samples"]
    p = init_params(cfg, 2)
    ids = sorted(samples)[:5]
    preds = predict(p, [samples[i] for i in ids], cfg, chunk=2)
    for i in ids:
        t = small_world["dataset"].tile(i)
        emb = encode(t, cfg.input_modalities, p.encoder, cfg, small_world["stats"])
        assert abs(preds[i] - decode_task(emb, p.task_decoder, cfg)) < 1e-12


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = tiny_config(dm.MULTILABEL)
    p = random_params(cfg, rng)
    save_checkpoint(tmp_path / "c", p, cfg, {"note": "x"})
    q, cfg2, man = load_checkpoint(tmp_path / "c")
    assert cfg2 == cfg and man["note"] == "x"
    for a, b in zip(p.stores().values(), q.stores().values()):
        assert a.checksum() == b.checksum()
