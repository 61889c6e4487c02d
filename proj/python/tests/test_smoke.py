import math

import numpy as np
import pytest

import gavatar

TINY = {
    "seed": 3,
    "data": {"identities": 3, "views": 4, "expressions": 2, "resolution": 24,
             "template": {"rings": 10, "segments": 12, "shape_dim": 3, "expr_dim": 2}},
    "prior": {"steps": 4, "batch": 2, "log_every": 2,
              "net": {"encoding_dim": 4, "code_dim": 5, "channels": 6, "hidden": 8, "cnn_layers": 2,
                      "cnn_width": 4, "uv_resolution": 16}},
    "personalize": {"inversion_steps": 3, "finetune_steps": 2, "reference_views": 4, "reference_batch": 2},
}


@pytest.fixture(scope="module")
def dataset():
    return gavatar.generate(TINY)


@pytest.fixture(scope="module")
def prior(dataset):
    return gavatar.train_prior(dataset, TINY, identities=[0, 1])


def test_config_round_trip_and_strictness():
    cfg = gavatar.resolve_config(TINY)
    assert cfg["data"]["resolution"] == 24
    assert gavatar.default_config()["subject"]["shots"] == [7, 2, 13]
    with pytest.raises(gavatar.ConfigError):
        gavatar.resolve_config({"prior": {"stepz": 1}})


def test_dataset_frames(dataset):
    assert len(dataset) == 3 * 2 * 4
    f = dataset.frame(1, 1, 2)
    assert f.image.shape == (24, 24, 3)
    assert f.mask.shape == (24, 24, 1)
    assert set(np.unique(f.mask)) <= {0.0, 1.0}
    assert f.mask.sum() > 0


def test_metrics_closed_forms():
    a = np.full((16, 16, 3), 0.3)
    assert math.isinf(gavatar.metrics(a, a)["psnr"])
    assert gavatar.metrics(a + 0.1, a)["psnr"] == pytest.approx(20.0, abs=1e-9)


def test_rasterize_tiled_matches_naive():
    rng = np.random.default_rng(0)
    n = 20
    mu = np.column_stack([rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(2, 4, n)])
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    scale = rng.uniform(0.05, 0.2, (n, 3))
    opacity = rng.uniform(0.1, 0.9, n)
    h = rng.uniform(0, 1, (n, 5))
    cam = gavatar.Camera.look_at([0, 0, 0], [0, 0, 1], [0, -1, 0], 40.0, 32, 32)
    tiled = gavatar.rasterize(mu, rot, scale, opacity, h, cam)
    naive = gavatar.rasterize(mu, rot, scale, opacity, h, cam, naive=True)
    for a, b in zip(tiled, naive):
        assert np.abs(a - b).max() <= 1e-5
    assert tiled[2].max() > 0


def test_personalization_flow(tmp_path, dataset, prior):
    assert prior.phase == "prior"
    shots = [dataset.frame(2, 0, v) for v in (0, 2)]
    with pytest.raises(gavatar.PhaseError):
        gavatar.finetune(prior, shots, TINY)
    inv = gavatar.invert(prior, shots, TINY)
    avatar = inv["avatar"]
    assert avatar.phase == "inverted"
    assert inv["w"].shape == (2, 11)
    ft = gavatar.finetune(avatar, shots, TINY)
    assert ft.phase == "finetuned"
    path = tmp_path / "a.ckpt"
    ft.save(path)
    back = gavatar.Avatar.load(path)
    f = dataset.frame(2, 1, 1)
    np.testing.assert_array_equal(ft.render(f.params, f.camera), back.render(f.params, f.camera))
    frames = gavatar.reenact(back, [f.params, f.params], [f.camera])
    assert len(frames) == 2 and frames[0].shape == (24, 24, 3)
    np.testing.assert_array_equal(frames[0], frames[1])
