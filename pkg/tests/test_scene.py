import numpy as np
import pytest

from listereo import autodiff as ad
from listereo.geometry import disparity_to_depth
from listereo.losses import warp_right_to_left
from listereo.scene import (InMemoryDataset, SceneDataset, SceneSpec, dataset_specs, desk_rig, generate_scene,
                            photometric_consistency, render, write_dataset)


@pytest.fixture(scope="module")
def samples():
    return [generate_scene(SceneSpec(seed=s)) for s in range(6)]


def test_generator_is_deterministic():
    a, b = generate_scene(SceneSpec(seed=11)), generate_scene(SceneSpec(seed=11))
    for f in ("left_image", "right_image", "occlusion"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert a.gt_depth.depth.tobytes() == b.gt_depth.depth.tobytes()
    assert a.sparse_depth.depth.tobytes() == b.sparse_depth.depth.tobytes()
    c = generate_scene(SceneSpec(seed=12))
    assert a.left_image.tobytes() != c.left_image.tobytes()


def test_sample_shapes_and_ranges(samples):
    rig = desk_rig()
    for s in samples:
        assert s.left_image.shape == (rig.height, rig.width, 3)
        assert 0 <= s.left_image.min() and s.left_image.max() <= 1
        assert s.gt_depth.valid.all()
        assert 2.0 - 1e-9 <= s.gt_depth.depth.min() and s.gt_depth.depth.max() <= 14.0 + 1e-9


def test_gt_disparity_is_fb_over_depth(samples):
    for s in samples:
        np.testing.assert_allclose(s.gt_disparity.disparity * s.gt_depth.depth, s.rig.fb, rtol=1e-12)
        np.testing.assert_allclose(disparity_to_depth(s.gt_disparity, s.rig).depth, s.gt_depth.depth, rtol=1e-12)


def test_sparse_depth_is_subset_of_gt(samples):
    for s in samples:
        v = s.sparse_depth.valid
        assert 0 < v.sum() < v.size
        np.testing.assert_array_equal(s.sparse_depth.depth[v], s.gt_depth.depth[v])


def test_occlusion_contains_geometric_occlusion_and_out_of_frame(samples):
    for s in samples:
        xr = np.arange(s.rig.width)[None, :] - s.gt_disparity.disparity
        assert s.occlusion[xr < 0].all()
        assert 0.0 < s.occlusion.mean() < 0.5


def test_photometric_consistency_sample(samples):
    for s in samples:
        assert photometric_consistency(s) >= 0.99


def test_gt_warp_reproduces_left_view(samples):
    with ad.precision(np.float64):
        for s in samples:
            right = ad.Tensor(s.right_image.transpose(2, 0, 1)[None])
            disp = ad.Tensor(s.gt_disparity.disparity[None, None])
            warped = warp_right_to_left(right, disp).data[0].transpose(1, 2, 0)
            vis = ~s.occlusion
            assert np.abs(warped - s.left_image)[vis].mean(axis=0).max() < 3e-2


def test_low_texture_reduces_contrast():
    rich = generate_scene(SceneSpec(seed=3))
    flat = generate_scene(SceneSpec(seed=3, low_texture=True))
    assert flat.left_image.std() < rich.left_image.std()


def test_dataset_roundtrip(tmp_path):
    specs = dataset_specs(SceneSpec(), 3, first_seed=5)
    write_dataset(specs, tmp_path)
    disk = SceneDataset(tmp_path)
    mem = InMemoryDataset.generate(specs)
    assert len(disk) == 3 and disk.records[0].seed == 5
    for i in range(3):
        np.testing.assert_array_equal(disk.left(i), mem.left(i))
        np.testing.assert_array_equal(disk.gt(i).depth, mem.gt(i).depth)
        np.testing.assert_array_equal(disk.occlusion(i), mem.occlusion(i))
        assert disk.rig(i) == mem.rig(i)


def test_dataset_missing_file(tmp_path):
    write_dataset(dataset_specs(SceneSpec(), 2), tmp_path)
    (tmp_path / "right" / "0001.ppm").unlink()
    with pytest.raises(FileNotFoundError, match="0001.ppm"):
        SceneDataset(tmp_path)


def test_render_returns_consistent_views():
    left, right, depth, occ = render(SceneSpec(seed=4))
    assert left.shape == right.shape and depth.shape == occ.shape
    assert not np.array_equal(left, right)
