import numpy as np
import pytest

import zca

TINY = {
    "model.base_width": "4",
    "model.heads": "2",
    "model.groups": "2",
    "model.embed_width": "2",
    "data.image_h": "32",
    "data.image_w": "32",
    "data.box_x0": "8",
    "data.box_y0": "6",
    "data.box_x1": "24",
    "data.box_y1": "26",
    "data.max_translation": "2",
    "data.max_scale": "0.05",
    "data.max_rotation": "5",
    "train.batch_size": "2",
    "train.pretrain_iters": "3",
    "train.phase1_iters": "3",
    "train.phase2_iters": "3",
    "train.heldout_size": "2",
    "eval.eval_size": "4",
    "eval.sample_subset": "1",
    "eval.sample_steps": "4",
}


def test_schedule():
    s = zca.Schedule()
    assert s.steps == 1000
    assert s.alpha_bar_at(500) == pytest.approx(0.07858724288177823734, rel=1e-12)
    assert np.all(np.diff(s.alpha_bar) < 0)
    z0 = np.random.default_rng(0).normal(size=(4, 3, 2))
    out = s.forward_diffuse(z0, 10, np.zeros_like(z0))
    np.testing.assert_allclose(out, np.sqrt(s.alpha_bar_at(10)) * z0, rtol=1e-14)
    ts = zca.strided_timesteps(1000, 10)
    assert ts[0] == 1000 and len(ts) == 10


def test_repaint_known_region_exact():
    s = zca.Schedule()
    rng = np.random.default_rng(1)
    z_next, z0 = rng.normal(size=(2, 4, 4, 4))
    known = (rng.random((1, 4, 4)) > 0.5).astype(float)
    out = s.repaint_blend(z_next, z0, known, 0, rng.normal(size=(4, 4, 4)))
    k = np.broadcast_to(known, z0.shape).astype(bool)
    assert np.array_equal(out[k], z0[k])
    assert np.array_equal(out[~k], z_next[~k])


def test_codec_round_trip():
    img = np.repeat(np.repeat(np.random.default_rng(2).random((3, 2, 2)), 4, axis=1), 4, axis=2)
    lat = zca.encode(img)
    assert lat.shape == (4, 2, 2)
    np.testing.assert_allclose(zca.decode(lat), img, atol=1e-15)


def test_objectives():
    uniform = np.full((3, 4, 5, 6), 1.0 / 30)
    F = zca.center_coordinate_map(uniform)
    assert F.shape == (3, 4, 2)
    assert np.all(F == 0)
    mask = np.ones((3, 4))
    assert zca.atv_loss(np.ones((3, 4, 2)), mask) == 0
    ramp = np.zeros((3, 4, 2))
    ramp[:, :, 0] = np.arange(4)[None, :]
    assert zca.atv_loss(ramp, mask) == pytest.approx(9.0)
    assert zca.atv_loss_grad(ramp, mask).shape == ramp.shape


def test_synthetic_sample():
    s = zca.generate_sample(7, 3)
    a = s.arrays()
    assert a["person"].shape == (3, 64, 48)
    assert set(np.unique(a["garment_mask"])) <= {0.0, 1.0}
    truth = s.truth(16, 12, 16, 12)
    assert truth.shape == (16, 12)
    assert (truth >= 0).sum() > 0
    b = s.augmented(3).arrays()
    assert b["clothing"].shape == a["clothing"].shape


def test_config_keys_documented():
    keys = dict(zca.config_keys())
    assert "train.lambda_atv" in keys and all(keys.values())
    text = zca.config_text()
    for k in keys:
        assert k + " = " in text


def test_grad_check():
    r = zca.grad_check(1e-3, 4)
    assert r["passed"], r


def test_tiny_training_and_eval(tmp_path):
    ckpt = zca.train(TINY, tmp_path / "p1")
    ft = zca.finetune_atv(TINY, tmp_path / "p2", ckpt)
    m = zca.Model(ft)
    assert m.parameter_count > 0
    sample = zca.generate_sample(1, 0, TINY)
    maps = m.attention(sample, 500)
    assert len(maps) == 2
    for a in maps:
        np.testing.assert_allclose(a.sum(axis=(2, 3)), 1.0, atol=1e-5)
    r = m.evaluate(TINY)
    assert r["queries"] > 0
    assert 0 <= r["acc_r1"] <= 1
