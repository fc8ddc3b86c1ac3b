import numpy as np
import pytest

from lidarstereo import ndgrad as ng
from lidarstereo.losses import appearance_loss, occlusion_from_range, \
    warp_right_to_left
from lidarstereo.refine import SparseDisparity
from lidarstereo.scenegen import (ParseError, SceneConfig, SceneConfigError,
                                  depth_to_disparity, disparity_to_depth,
                                  generate_scene, read_pfm, read_ppm,
                                  read_sparse_csv, sample_lidar, split_sparse,
                                  write_pfm, write_ppm, write_sparse_csv)


def test_config_validation():
    with pytest.raises(SceneConfigError):
        SceneConfig(d_max=60.0, width=96)
    with pytest.raises(SceneConfigError):
        SceneConfig(focal=-1.0)
    with pytest.raises(SceneConfigError):
        SceneConfig(d_min=0.0)


def test_single_layer_scene_is_pure_shift():
    cfg = SceneConfig(height=16, width=32, layers=1, d_min=4.0, d_max=4.0)
    sample = generate_scene(cfg, seed=0)
    assert np.all(sample.gt_disparity == 4.0)
    assert np.all(sample.gt_valid[:, 4:])
    assert not sample.gt_valid[:, :4].any()
    # right image is the left shifted by 4 columns
    assert np.allclose(sample.image_right[:, :, :-4], sample.image_left[:, :, 4:])


def test_two_layer_occlusion_band():
    cfg = SceneConfig(height=32, width=48, layers=2, d_min=3.0, d_max=9.0)
    sample = generate_scene(cfg, seed=1)
    ds = np.unique(sample.gt_disparity)
    assert len(ds) == 2
    d_bg, d_fg = ds
    # within rectangle rows, the background band of width d_fg - d_bg just
    # left of the rectangle is occluded by the near layer
    fg = sample.gt_disparity == d_fg
    rows = np.where(fg.any(axis=1))[0]
    r = rows[len(rows) // 2]
    c0 = np.where(fg[r])[0][0]
    band = np.arange(int(c0 - (d_fg - d_bg)), c0)
    band = band[(band >= 0) & (band >= d_bg)]
    if band.size:
        assert not sample.gt_valid[r, band].any()


def test_same_seed_bit_identical():
    cfg = SceneConfig(height=16, width=32)
    a = generate_scene(cfg, seed=7)
    b = generate_scene(cfg, seed=7)
    assert np.array_equal(a.image_left, b.image_left)
    assert np.array_equal(a.image_right, b.image_right)
    assert np.array_equal(a.gt_disparity, b.gt_disparity)
    assert np.array_equal(a.gt_valid, b.gt_valid)


def test_generated_scene_photometric_consistency():
    from scipy.ndimage import binary_dilation
    cfg = SceneConfig(height=32, width=48, layers=3)
    for seed in range(5):
        sample = generate_scene(cfg, seed=seed)
        d = ng.as_diff(sample.gt_disparity)
        recon = warp_right_to_left(ng.as_diff(sample.image_right), d)
        occ = occlusion_from_range(sample.gt_disparity) | ~sample.gt_valid
        occ = binary_dilation(occ, iterations=1)  # SSIM window support
        loss = appearance_loss(ng.as_diff(sample.image_left), recon, occ)
        assert loss.item() < 1e-3


def test_gt_warp_exact_at_valid_pixels():
    cfg = SceneConfig(height=32, width=48, layers=3)
    sample = generate_scene(cfg, seed=3)
    recon = warp_right_to_left(ng.as_diff(sample.image_right),
                               ng.as_diff(sample.gt_disparity))
    diff = np.abs(recon.data - sample.image_left).max(axis=0)
    assert np.max(diff[sample.gt_valid]) < 1e-12


# lidar sampling -----------------------------------------------------------

def _sample():
    return generate_scene(SceneConfig(height=32, width=64, layers=3), seed=5)


def test_sample_lidar_empty():
    sp = sample_lidar(_sample(), 0, seed=0)
    assert sp.count == 0


def test_sample_lidar_500_points_match_gt():
    sample = _sample()
    sp = sample_lidar(sample, 500, seed=1)
    assert sp.count == 500
    assert np.all(sample.gt_valid[sp.valid])
    assert np.array_equal(sp.values[sp.valid], sample.gt_disparity[sp.valid])


def test_sample_lidar_too_many_raises():
    sample = _sample()
    with pytest.raises(ValueError):
        sample_lidar(sample, int(sample.gt_valid.sum()) + 1, seed=0)


def test_sample_lidar_gt_sparse_loss_zero():
    from lidarstereo.losses import sparse_loss
    sample = _sample()
    sp = sample_lidar(sample, 200, seed=2)
    assert sparse_loss(sp, ng.as_diff(sample.gt_disparity)).item() == 0.0


# splitting ----------------------------------------------------------------

def test_split_all_in_identity():
    sp = sample_lidar(_sample(), 100, seed=3)
    inp, loss = split_sparse(sp, "all-in", seed=0)
    assert np.array_equal(inp.valid, sp.valid)
    assert np.array_equal(loss.valid, sp.valid)


def test_split_half1_subset():
    sp = sample_lidar(_sample(), 10, seed=4)
    inp, loss = split_sparse(sp, "half1", seed=0)
    assert inp.count == 5
    assert loss.count == 10
    assert np.all(loss.valid[inp.valid])


def test_split_half2_disjoint_partition():
    sp = sample_lidar(_sample(), 250, seed=5)
    for seed in range(5):
        inp, loss = split_sparse(sp, "half2", seed=seed)
        assert inp.count == 125
        assert loss.count == 125
        assert not (inp.valid & loss.valid).any()
        assert np.array_equal(inp.valid | loss.valid, sp.valid)


def test_split_too_few_raises():
    valid = np.zeros((4, 4), dtype=bool)
    valid[0, 0] = True
    sp = SparseDisparity(values=np.where(valid, 2.0, 0.0), valid=valid)
    with pytest.raises(ValueError):
        split_sparse(sp, "half2", seed=0)


# conversions --------------------------------------------------------------

def test_disparity_depth_arithmetic():
    assert disparity_to_depth(10.0, 100.0, 0.5) == 5.0


def test_round_trip_identity():
    rng = np.random.default_rng(6)
    d = rng.uniform(1.0, 20.0, size=50)
    back = depth_to_disparity(disparity_to_depth(d, 721.0, 0.54), 721.0, 0.54)
    assert np.allclose(back, d, atol=1e-12)


def test_nonpositive_raises():
    with pytest.raises(ValueError):
        disparity_to_depth(0.0, 100.0, 0.5)
    with pytest.raises(ValueError):
        depth_to_disparity(-1.0, 100.0, 0.5)


# file IO ------------------------------------------------------------------

def test_pfm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    arr = rng.normal(size=(6, 9)).astype(np.float32).astype(np.float64)
    path = tmp_path / "d.pfm"
    write_pfm(path, arr)
    assert np.array_equal(read_pfm(path), arr)


def test_pfm_bad_magic(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
    with pytest.raises(ParseError):
        read_pfm(path)


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    img = np.round(rng.random((3, 5, 7)) * 255) / 255.0
    path = tmp_path / "img.ppm"
    write_ppm(path, img)
    assert np.allclose(read_ppm(path), img, atol=1e-12)


def test_ppm_wrong_magic(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
    with pytest.raises(ParseError):
        read_ppm(path)


def test_ppm_truncated_reports_offset(tmp_path):
    path = tmp_path / "trunc.ppm"
    path.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 5)
    with pytest.raises(ParseError) as exc:
        read_ppm(path)
    assert exc.value.offset is not None


def test_sparse_csv_round_trip(tmp_path):
    sp = sample_lidar(_sample(), 40, seed=9)
    path = tmp_path / "sparse.csv"
    write_sparse_csv(path, sp)
    back = read_sparse_csv(path, sp.values.shape)
    assert np.array_equal(back.valid, sp.valid)
    assert np.array_equal(back.values, sp.values)


def test_sparse_csv_out_of_bounds_names_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("i,j,disparity\n1,2,3.0\n99,0,1.0\n")
    with pytest.raises(ParseError) as exc:
        read_sparse_csv(path, (8, 8))
    assert "row 3" in str(exc.value)
