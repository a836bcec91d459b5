import numpy as np
import pytest

from fisheyerect.dataset import save_image, smooth_image
from fisheyerect.geometry import normalized_grid, warp
from fisheyerect.model import ModelConfig, RectifyNet, bilinear_logits, binarize
from fisheyerect.nncore import CheckpointError, save_checkpoint
from fisheyerect.rectify import (load_model, predict, rectify, rectify_file, resize_field,
                                 resize_image)

CFG = ModelConfig.desk()


def identity_net(cfg=CFG) -> RectifyNet:
    """Zero displacement, exact bilinear upsampling weights, confidence saturated at 1."""
    net = RectifyNet(cfg, seed=0)
    net.fpm.weight2.bias.data = bilinear_logits(cfg.patch_size, floor=0.0).astype(np.float32)
    net.brm.field2.bias.data[:] = 40.0
    return net


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "finetune_epoch0001"
    save_checkpoint(path, identity_net().named_parameters(), {"train": {"model": CFG.to_dict()}})
    return path


def test_resize_field_identity_at_same_size():
    f = np.random.default_rng(0).random((8, 8, 2))
    assert np.array_equal(resize_field(f, 8, 8), f)
    up = resize_field(normalized_grid(8, 8), 32, 32)
    inner = slice(2, 30)
    assert np.allclose(up[inner, inner], normalized_grid(32, 32)[inner, inner], atol=1e-12)


def test_resize_image_shape():
    img = np.random.default_rng(1).random((100, 80, 3))
    assert resize_image(img, 64, 64).shape == (64, 64, 3)
    assert resize_image(img, 100, 80) is not None


def test_load_model_round_trip(ckpt):
    net = load_model(ckpt)
    assert net.cfg == CFG
    ref = identity_net()
    for k, v in ref.named_parameters().items():
        assert np.array_equal(net.named_parameters()[k].data, v.data)


def test_load_model_errors(tmp_path, ckpt):
    with pytest.raises(CheckpointError) as ei:
        load_model(tmp_path / "missing")
    assert "missing" in ei.value.path
    # a checkpoint from another architecture is a hard error naming the parameter
    other = ModelConfig.desk(dim=32)
    save_checkpoint(tmp_path / "other", RectifyNet(other).named_parameters(),
                    {"model": CFG.to_dict()})
    with pytest.raises(ValueError, match="patch_embed.proj.weight"):
        load_model(tmp_path / "other")


def test_identity_checkpoint_returns_input(ckpt):
    net = load_model(ckpt)
    img = smooth_image(64, np.random.default_rng(2))
    out, flow, mask = rectify(img, net, return_parts=True)
    assert mask.all()
    half = CFG.patch_size // 2
    inner = (slice(half, -half), slice(half, -half))
    assert np.max(np.abs(out[inner] - img[inner])) <= 1e-5


@pytest.mark.parametrize("size", [(64, 64), (96, 160), (256, 256)])
def test_output_size_matches_input(ckpt, size):
    net = load_model(ckpt)
    img = np.random.default_rng(3).random(size + (3,))
    assert rectify(img, net).shape == img.shape


def test_native_size_skips_interpolation():
    net = RectifyNet(CFG, seed=4)
    img = np.random.default_rng(4).random((64, 64, 3))
    flow, conf = predict(net, img)
    expected = warp(img, flow, binarize(conf[..., 0], CFG.sigma))
    assert np.max(np.abs(rectify(img, net) - expected)) <= 1e-6


def test_rectify_rejects_small_and_records_timings(ckpt):
    net = load_model(ckpt)
    with pytest.raises(ValueError):
        rectify(np.zeros((63, 80, 3)), net)
    timings = {}
    rectify(np.zeros((64, 64, 3)), net, timings=timings)
    assert set(timings) == {"model", "warp"}


def test_rectify_file(tmp_path, ckpt):
    save_image(tmp_path / "in.png", smooth_image(80, np.random.default_rng(5)))
    out = rectify_file(tmp_path / "in.png", ckpt, tmp_path / "out.png")
    assert out.exists()
