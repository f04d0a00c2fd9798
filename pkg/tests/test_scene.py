import filecmp
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posefield.camera import CameraPose, denormalize_pose, look_at, project
from posefield.scene import (
    CATEGORIES, VSTAR, Part, ToyObject, gen_scene, load_manifest, make_object, make_rig, oracle_render,
    regularization_pool, volume_mask,
)


def sphere_object(r=0.5):
    return ToyObject("ball", (Part("sphere", (0.0, 0.0, 0.0), (r,), (0.8, 0.2, 0.2)),), "red")


def camera(f=100.0, size=128, z=2.0):
    R, t = look_at([z, 0, 0])
    return CameraPose(R, t, f, f, size / 2, size / 2, size, size, z - 1, z + 1)


def test_sphere_mask_area_matches_pinhole_formula():
    rgb, mask = oracle_render(sphere_object(), camera())
    assert mask[64, 64] and not mask[0, 0]
    assert np.allclose(rgb[0, 0], 1.0)
    # exact silhouette of a sphere under perspective
    assert mask.sum() == pytest.approx(np.pi * 100**2 * 0.5**2 / (2**2 - 0.5**2), rel=0.02)


def test_small_sphere_area_approaches_pinhole_estimate():
    _, mask = oracle_render(sphere_object(0.1), camera(f=400.0, size=128, z=2.0))
    assert mask.sum() == pytest.approx(np.pi * (400 * 0.1 / 2) ** 2, rel=0.05)


@pytest.mark.parametrize("category", CATEGORIES)
def test_objects_fit_in_unit_ball_and_union_is_min(category):
    obj = make_object(category, 3)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.2, 1.2, (1000, 3))
    per_part = obj.part_sdfs(pts)
    assert np.all(obj.sdf(pts) <= per_part.min(axis=1) + 1e-12)
    assert np.all(obj.sdf(pts) <= per_part.T + 1e-12)
    sphere_pts = rng.normal(size=(2000, 3))
    sphere_pts /= np.linalg.norm(sphere_pts, axis=1, keepdims=True)
    assert np.all(obj.sdf(sphere_pts) > 0)


def test_box_sdf_exact():
    p = Part("box", (0, 0, 0), (1, 1, 1), (1, 1, 1))
    assert p.sdf(np.array([2.0, 0, 0])) == pytest.approx(1.0)
    assert p.sdf(np.array([2.0, 2.0, 0])) == pytest.approx(np.sqrt(2))
    assert p.sdf(np.array([0.5, 0, 0])) == pytest.approx(-0.5)


def test_oracle_mask_matches_dense_volume():
    obj = make_object("car", 1)
    rig = make_rig(5, seed=2)
    for pose in rig.poses:
        world = denormalize_pose(pose, rig.shift, rig.scale)
        _, mask = oracle_render(obj, world)
        vol = volume_mask(obj, world, n_samples=1024)
        assert (mask != vol).mean() < 0.01


def test_rig_split_and_aim():
    rig = make_rig(100)
    assert rig.splits.count("train") == 50 and rig.splits.count("val") == 50
    origin = (np.zeros(3) - rig.shift) * rig.scale
    for p in rig.poses:
        pix, _, front = project(p, origin)
        assert front and np.allclose(pix, [p.cx, p.cy], atol=1e-6)
    two = make_rig(2, elevation=(0.0, 0.0))
    c0, c1 = two.poses[0].center, two.poses[1].center
    assert np.allclose(c0, -c1) and np.linalg.norm(c0) == pytest.approx(1.0)


def test_gen_scene_roundtrip_and_determinism(tmp_path):
    t0 = time.time()
    m = gen_scene("car", 7, tmp_path / "a", views=20, n_val=None)
    assert time.time() - t0 < 60
    gen_scene("car", 7, tmp_path / "b", views=20, n_val=None)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only
    back = load_manifest(tmp_path / "a")
    assert back == m
    img = back.load_image(0)
    assert img.shape == (64, 64, 3) and back.load_mask(0).dtype == bool


def test_default_scene_has_20_8_split(tmp_path):
    m = gen_scene("mug", 0, tmp_path / "s")
    assert len(m.indices("train")) == 20 and len(m.indices("val")) == 8


def test_gen_scene_reports_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        gen_scene("car", 0, blocker / "sub", views=2)


def test_regularization_pool():
    pool = regularization_pool("car", 8, seed=5)
    assert len(pool) == 8
    assert all(VSTAR not in p.caption and "car" in p.caption for p in pool)
    vecs = [p.object.parameter_vector() for p in pool]
    assert len({v.tobytes() for v in vecs}) == 8
    target = make_object("car", 7).parameter_vector()
    assert min(np.abs(v - target).max() for v in vecs) > 1e-3
    img, cap = pool[0]
    assert img.shape == (64, 64, 3) and isinstance(cap, str)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_objects_vary_with_seed(seed):
    a, b = make_object("chair", seed), make_object("chair", seed + 1)
    assert not np.array_equal(a.parameter_vector(), b.parameter_vector())
