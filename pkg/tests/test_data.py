import math

import numpy as np
import pytest

from duplexseg.data import (
    SceneSpec,
    _camera_rotation,
    default_intrinsics,
    generate_dataset,
    generate_scene,
    gradient_noise,
    load_manifest,
    load_sample,
    make_splits,
    perlin2d,
    write_manifest,
    write_sample,
)
from duplexseg.errors import ConfigurationError, InputError


class TestPerlin:
    def test_deterministic(self):
        a = perlin2d((16, 16), 3, seed=7)
        b = perlin2d((16, 16), 3, seed=7)
        assert np.array_equal(a, b)
        c = perlin2d((16, 16), 3, seed=8)
        assert not np.array_equal(a, c)

    def test_zero_octaves(self):
        assert np.array_equal(perlin2d((8, 8), 0, seed=0), np.zeros((8, 8)))

    def test_lattice_points_zero(self):
        xs, ys = np.meshgrid(np.arange(5.0), np.arange(5.0))
        vals = gradient_noise(xs, ys, seed=3)
        assert np.abs(vals).max() < 1e-12

    def test_range(self):
        vals = perlin2d((64, 64), 4, seed=1)
        assert vals.min() >= -1.0 and vals.max() <= 1.0
        assert vals.std() > 0.01  # not degenerate

    def test_too_small(self):
        with pytest.raises(InputError):
            perlin2d((1, 8), 2, seed=0)


def bare_plane_depth(spec):
    intr = spec.intrinsics
    rot = _camera_rotation(spec.camera_pitch)
    uu, vv = np.meshgrid(np.arange(spec.width, dtype=float), np.arange(spec.height, dtype=float))
    d_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
    d_world = d_cam @ rot
    dz = d_world[..., 2]
    t = np.where(dz < 0, -spec.camera_height / np.where(dz < 0, dz, -1.0), np.inf)
    return t


class TestGenerateScene:
    def test_bare_plane(self):
        spec = SceneSpec(
            seed=5, defect_count=(0, 0), obstacle_count=(0, 0), roughness_octaves=0, roughness_amplitude=0.0
        )
        sample = generate_scene(spec)
        assert set(np.unique(sample.label)) <= {0, 1}
        # plane pixels away from the horizon carry the analytic plane normal
        theta = spec.camera_pitch
        expect = np.array([0.0, -math.cos(theta), -math.sin(theta)])
        plane = (sample.label == 1) & sample.normals.validity
        # drop pixels whose 3x3 neighborhood touches the horizon
        interior = plane & np.roll(plane, 1, 0) & np.roll(plane, -1, 0)
        dots = sample.normals.values[interior] @ expect
        assert np.arccos(np.clip(dots, -1, 1)).max() < 1e-3

    def test_defect_deeper_than_bare_plane(self):
        spec = SceneSpec(seed=9, defect_count=(1, 1), obstacle_count=(0, 0))
        sample = generate_scene(spec)
        t_bare = bare_plane_depth(spec)
        defect = sample.label == 2
        assert defect.sum() >= spec.min_defect_pixels
        assert (sample.depth.values[defect] > t_bare[defect]).all()

    def test_obstacle_shallower_than_bare_plane(self):
        spec = SceneSpec(seed=21, defect_count=(0, 0), obstacle_count=(2, 2))
        sample = generate_scene(spec)
        t_bare = bare_plane_depth(spec)
        box = (sample.label == 0) & (sample.depth.values < spec.far) & np.isfinite(t_bare)
        if box.any():
            assert (sample.depth.values[box] < t_bare[box]).all()

    def test_deterministic(self):
        a = generate_scene(SceneSpec(seed=13))
        b = generate_scene(SceneSpec(seed=13))
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.depth.values, b.depth.values)
        assert np.array_equal(a.label, b.label)
        assert np.array_equal(a.normals.values, b.normals.values)

    def test_normals_satisfy_geometry_invariants(self):
        sample = generate_scene(SceneSpec(seed=2))
        lengths = np.linalg.norm(sample.normals.values[sample.normals.validity], axis=-1)
        assert np.abs(lengths - 1.0).max() < 1e-5
        assert (sample.normals.values[sample.normals.validity][:, 2] <= 0).all()

    def test_class_balance_over_seeds(self):
        # every class present in every scene; defects at least 0.1% of pixels
        n_px = 64 * 96
        for seed in range(100):
            sample = generate_scene(SceneSpec(seed=seed))
            present = set(np.unique(sample.label))
            assert present == {0, 1, 2}, f"seed {seed}: classes {present}"
            assert (sample.label == 2).sum() >= 0.001 * n_px, f"seed {seed}"

    def test_invalid_dims(self):
        with pytest.raises(ConfigurationError):
            SceneSpec(height=50, width=96)

    def test_degenerate_range(self):
        with pytest.raises(ConfigurationError):
            SceneSpec(defect_count=(3, 1))


class TestSplits:
    def test_sizes(self):
        manifest = make_splits(10, (0.6, 0.2, 0.2), seed=0)
        assert [len(manifest.splits[s]) for s in ("train", "val", "test")] == [6, 2, 2]

    def test_deterministic(self):
        a = make_splits(20, (0.5, 0.25, 0.25), seed=4)
        b = make_splits(20, (0.5, 0.25, 0.25), seed=4)
        assert a.splits == b.splits

    def test_bad_ratios(self):
        with pytest.raises(ConfigurationError):
            make_splits(10, (0.5, 0.5, 0.1), seed=0)

    def test_disjoint_and_complete(self):
        manifest = make_splits(17, (0.7, 0.15, 0.15), seed=1)
        all_ids = [sid for ids in manifest.splits.values() for sid in ids]
        assert len(all_ids) == 17
        assert len(set(all_ids)) == 17


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        manifest = generate_dataset(tmp_path, count=3, seed=11, ratios=(0.34, 0.33, 0.33))
        loaded_manifest = load_manifest(tmp_path)
        assert loaded_manifest.splits == manifest.splits
        sid = loaded_manifest.splits["train"][0]
        spec = SceneSpec(seed=11 ^ int(sid))
        original = generate_scene(spec)
        loaded = load_sample(loaded_manifest, sid)
        assert np.array_equal(loaded.label, original.label)
        assert np.abs(loaded.depth.values - original.depth.values).max() <= 5e-4 + 1e-12
        assert np.abs(loaded.rgb - original.rgb).max() <= 1 / 255 / 2 + 1e-6

    def test_unknown_id(self, tmp_path):
        manifest = generate_dataset(tmp_path, count=2, seed=0, ratios=(0.5, 0.25, 0.25))
        with pytest.raises(InputError, match="zzz"):
            load_sample(manifest, "zzz")

    def test_overlapping_splits_rejected(self, tmp_path):
        manifest = generate_dataset(tmp_path, count=2, seed=0, ratios=(0.5, 0.25, 0.25))
        sid = manifest.splits["train"][0]
        manifest.splits["val"].append(sid)
        write_manifest(manifest)
        with pytest.raises(ConfigurationError):
            load_manifest(tmp_path)

    def test_missing_file_error_names_path(self, tmp_path):
        manifest = generate_dataset(tmp_path, count=2, seed=0, ratios=(0.5, 0.25, 0.25))
        sid = manifest.splits["train"][0]
        paths = manifest.sample_paths(sid)
        paths["depth"].unlink()
        with pytest.raises(FileNotFoundError, match=str(paths["depth"].name)):
            load_sample(manifest, sid)
