import numpy as np
import pytest

from lidarstereo import ndgrad as ng
from lidarstereo.features import (AFFINITY_OFFSETS, extract_context,
                                  extract_features, init_context_net,
                                  init_feature_net, load_params, save_params)
from lidarstereo.ndgrad import GradientTape, ShapeError


def _feat_params(channels=8, seed=0, downsample=4):
    params = {}
    init_feature_net(params, channels, np.random.default_rng(seed), downsample)
    return params


def _ctx_params(channels=8, hidden=6, seed=0, downsample=4):
    params = {}
    init_context_net(params, channels, hidden, np.random.default_rng(seed),
                     downsample)
    return params


def _image(h, w, seed=0):
    return ng.as_diff(np.random.default_rng(seed).random((3, h, w)))


def test_feature_shape_s4():
    out = extract_features(_image(64, 96), _feat_params())
    assert out.shape == (8, 16, 24)


def test_feature_shape_s8():
    params = _feat_params(downsample=8)
    out = extract_features(_image(64, 96), params, downsample=8)
    assert out.shape == (8, 8, 12)


def test_indivisible_image_raises():
    with pytest.raises(ShapeError):
        extract_features(_image(30, 48), _feat_params())


def test_not_an_image_raises():
    params = _feat_params()
    with pytest.raises(ShapeError):
        extract_features(ng.as_diff(np.zeros((16, 24))), params)


def test_bad_downsample_raises():
    with pytest.raises(ValueError):
        _feat_params(downsample=3)


def test_shared_weights_identical_images():
    params = _feat_params()
    img = _image(16, 24, seed=1)
    a = extract_features(img, params)
    b = extract_features(ng.as_diff(img.data.copy()), params)
    assert np.array_equal(a.data, b.data)


def test_zero_projection_gives_zero_features():
    params = _feat_params()
    params["feat.proj.w"] = ng.leaf(np.zeros_like(params["feat.proj.w"].data))
    out = extract_features(_image(16, 24), params)
    assert np.all(out.data == 0.0)


def test_translation_covariance_interior():
    # shifting the input by s pixels shifts the coarse map by 1, away from
    # the padded borders
    params = _feat_params(seed=2)
    img = np.random.default_rng(3).random((3, 16, 96))
    a = extract_features(ng.as_diff(img), params).data
    b = extract_features(ng.as_diff(np.roll(img, 4, axis=2)), params).data
    trim = 6
    assert np.allclose(b[:, :, 1 + trim:-trim], a[:, :, trim:-trim - 1],
                       atol=1e-12)


def test_context_bundle_shapes():
    ctx = extract_context(_image(64, 96), _ctx_params())
    assert ctx.context.shape == (8, 16, 24)
    assert ctx.hidden_init.shape == (6, 16, 24)
    assert ctx.affinity.shape == (8, 16, 24)


def test_hidden_init_bounded():
    ctx = extract_context(_image(32, 48, seed=4), _ctx_params(seed=5))
    assert np.all(np.abs(ctx.hidden_init.data) < 1.0)


def test_different_seeds_different_affinity():
    img = _image(16, 24, seed=6)
    a = extract_context(img, _ctx_params(seed=0)).affinity.data
    b = extract_context(img, _ctx_params(seed=1)).affinity.data
    assert not np.allclose(a, b)


def test_affinity_offset_table():
    assert len(AFFINITY_OFFSETS) == 8
    assert (0, 0) not in AFFINITY_OFFSETS
    assert AFFINITY_OFFSETS[0] == (-1, -1)
    assert AFFINITY_OFFSETS[-1] == (1, 1)


def test_gradients_reach_all_parameters():
    params = _feat_params(seed=7)
    params.update(_ctx_params(seed=8))
    img = _image(16, 24, seed=9)
    with GradientTape() as tape:
        ctx = extract_context(img, params)
        loss = ng.add(ng.total(ng.mul(extract_features(img, params),
                                      extract_features(img, params))),
                      ng.add(ng.total(ng.mul(ctx.affinity, ctx.affinity)),
                             ng.add(ng.total(ctx.context),
                                    ng.total(ctx.hidden_init))))
    tape.backward(loss)
    for name, leaf in params.items():
        assert leaf.grad is not None and np.any(leaf.grad != 0.0), name


def test_init_scale_within_fan_in_bound():
    params = _feat_params(channels=16, seed=10)
    w = params["feat.conv2.w"].data
    bound = np.sqrt(1.0 / (16 * 9))
    assert np.max(np.abs(w)) <= bound
    assert np.all(params["feat.conv2.b"].data == 0.0)


# checkpoint IO -------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = _feat_params(seed=11)
    params.update(_ctx_params(seed=12))
    path = tmp_path / "ckpt.bin"
    save_params(params, path)
    back = load_params(path)
    assert list(back) == list(params)
    for name in params:
        assert np.array_equal(back[name].data, params[name].data)


def test_checkpoint_size_mismatch_raises(tmp_path):
    params = _feat_params()
    path = tmp_path / "ckpt.bin"
    save_params(params, path)
    blob = path.read_bytes()
    path.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(ValueError):
        load_params(path)
