import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from surfelpose import raster
from surfelpose.camera import CameraIntrinsics, RgbdFrame
from surfelpose.pose_math import RigidTransform, inverse, translate
from surfelpose.scene_sim import Primitive, SceneObject, SceneSpec, look_at, make_trajectory, render_frame
from surfelpose.surfel_map import (
    NO_INSTANCE, InstanceRecord, SizeMismatchError, Surfel, SurfelMap, fuse_frame, mark_active_objects,
    predicted_instance_mask, splat_render, update_class_probability, update_nonbackground,
)

SMALL = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
CLASSES = ("a", "b", "c")


def plane_frame(depth=1.0, intr=SMALL, index=0):
    d = np.full(intr.shape, depth)
    col = np.zeros(intr.shape + (3,))
    col[..., 0] = np.linspace(0, 1, intr.width)[None, :]
    return RgbdFrame(d, col, intr, index)


def one_box_scene(n_frames=6):
    obj = SceneObject(1, "a", translate(0.0, 0.0, 0.05), Primitive("box", (0.12, 0.1, 0.1)), color=(0.8, 0.3, 0.2))
    traj = make_trajectory("orbit", {"radius": 0.6, "height": 0.45, "target": (0, 0, 0.05), "arc": 1.0}, n_frames)
    intr = CameraIntrinsics(160.0, 160.0, 79.5, 59.5, 160, 120)
    return SceneSpec([obj], traj, intr, CLASSES, ground={"size": [1.0, 1.0], "color": [0.5, 0.5, 0.5]})


# -- probability fusion ------------------------------------------------------------


def test_update_class_probability_examples():
    rec = InstanceRecord(1, np.zeros(2), 0)
    d = np.array([0.3, 0.7])
    np.testing.assert_array_equal(update_class_probability(rec, d).class_probs, d)
    r = update_class_probability(update_class_probability(rec, [1.0, 0.0]), [0.0, 1.0])
    np.testing.assert_allclose(r.class_probs, [0.5, 0.5], atol=0)
    assert r.obs_count == 2
    with pytest.raises(ValueError):
        update_class_probability(rec, [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        update_class_probability(rec, [1.2, -0.2])


def test_update_nonbackground_examples():
    s = Surfel(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.01, np.zeros(3))
    assert update_nonbackground(s, 0.9).p_o == 0.9
    for p in (0.5, 0.5, 0.5):
        s = update_nonbackground(s, p)
    assert s.p_o == 0.5 and s.obs_count == 3
    with pytest.raises(ValueError):
        update_nonbackground(s, 1.5)


def test_running_means_equal_batch_means_1000_sequences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        ps = rng.random(n)
        s = Surfel(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.01, np.zeros(3))
        for p in ps:
            s = update_nonbackground(s, float(p))
        worst = max(worst, abs(s.p_o - math.fsum(ps) / n))
        dists = rng.dirichlet(np.ones(len(CLASSES)), size=n)
        rec = InstanceRecord(1, np.zeros(len(CLASSES)), 0)
        for d in dists:
            rec = update_class_probability(rec, d)
        batch = np.array([math.fsum(dists[:, k]) / n for k in range(len(CLASSES))])
        worst = max(worst, float(np.abs(rec.class_probs - batch).max()))
        assert abs(rec.class_probs.sum() - 1.0) <= 1e-9
        assert rec.obs_count == n
    assert worst <= 1e-12


def test_seven_distributions_and_twenty_values():
    rng = np.random.default_rng(1)
    dists = rng.dirichlet(np.ones(4), size=7)
    rec = InstanceRecord(1, np.zeros(4), 0)
    for d in dists:
        rec = update_class_probability(rec, d)
    np.testing.assert_allclose(rec.class_probs, dists.mean(axis=0), atol=1e-12, rtol=0)
    vals = rng.random(20)
    s = Surfel(np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.01, np.zeros(3))
    for p in vals:
        s = update_nonbackground(s, float(p))
    assert s.p_o == pytest.approx(vals.mean(), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=50))
def test_running_mean_property(ps):
    s = Surfel(np.zeros(3), np.array([0.0, 1.0, 0.0]), 0.01, np.zeros(3))
    for p in ps:
        s = update_nonbackground(s, p)
    assert 0.0 <= s.p_o <= 1.0
    assert abs(s.p_o - math.fsum(ps) / len(ps)) <= 1e-12


def test_surfel_invariants():
    with pytest.raises(ValueError):
        Surfel(np.zeros(3), np.array([0.0, 0.0, 2.0]), 0.01, np.zeros(3))
    with pytest.raises(ValueError):
        Surfel(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.0, np.zeros(3))
    with pytest.raises(ValueError):
        Surfel(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.01, np.zeros(3), p_o=1.2)


def test_class_storage_scales_with_instances_not_surfels():
    m = SurfelMap(CLASSES)
    a = m.new_instance([1.0, 0.0, 0.0])
    m.new_instance([0.0, 1.0, 0.0])
    fuse_frame(m, plane_frame(), RigidTransform.identity())
    n1 = len(m)
    before = m.class_probability_storage()
    m.instance_id[:] = a
    fuse_frame(m, plane_frame(0.8), RigidTransform.identity())
    assert len(m) > n1
    assert m.class_probability_storage() == before == 2 * len(CLASSES)


def test_unknown_class_label_rejected():
    m = SurfelMap(CLASSES)
    assert m.class_index("b") == 1
    with pytest.raises(ValueError):
        m.class_index("zebra")
    with pytest.raises(ValueError):
        SurfelMap(("a", "a"))


# -- fusion --------------------------------------------------------------------------


def test_fuse_into_empty_map_creates_one_surfel_per_valid_pixel():
    f = plane_frame()
    f.depth[:10] = 0.0
    f.depth[10, :5] = np.nan
    m = SurfelMap(CLASSES)
    st_ = fuse_frame(m, f, RigidTransform.identity())
    assert st_.created == len(m) == int(f.valid.sum()) == 100 * 90 - 5
    assert st_.merged == 0


def test_fusing_identical_frame_twice_creates_nothing():
    spec = one_box_scene()
    frame, gt = render_frame(spec, 0)
    m = SurfelMap(CLASSES)
    fuse_frame(m, frame, gt.camera_pose)
    n = len(m)
    st_ = fuse_frame(m, frame, gt.camera_pose)
    assert st_.created == 0 and len(m) == n and st_.merged > 0


def test_p_o_sequence_averages():
    m = SurfelMap(CLASSES)
    f = plane_frame()
    fuse_frame(m, f, RigidTransform.identity(), pixel_p_o=np.full(SMALL.shape, 0.8))
    fuse_frame(m, f, RigidTransform.identity(), pixel_p_o=np.full(SMALL.shape, 0.4))
    np.testing.assert_allclose(m.p_o, 0.6, atol=1e-12, rtol=0)
    assert np.all(m.obs_count == 2)


def test_fuse_rejects_mismatched_maps():
    m = SurfelMap(CLASSES)
    with pytest.raises(SizeMismatchError):
        fuse_frame(m, plane_frame(), RigidTransform.identity(), pixel_instances=np.zeros((10, 10), np.int64))
    with pytest.raises(SizeMismatchError):
        fuse_frame(m, plane_frame(), RigidTransform.identity(), pixel_p_o=np.zeros((100, 99)))


def test_merge_is_weighted_mean_of_positions():
    m = SurfelMap(CLASSES)
    fuse_frame(m, plane_frame(1.0), RigidTransform.identity())
    fuse_frame(m, plane_frame(1.02), RigidTransform.identity())
    fuse_frame(m, plane_frame(1.04), RigidTransform.identity())
    centre = np.argmin(np.linalg.norm(m.position[:, :2], axis=1))
    assert m.position[centre, 2] == pytest.approx(1.02, abs=1e-9)
    assert m.weight[centre] == 3


def test_render_then_fuse_back_creates_nothing():
    spec = one_box_scene()
    m = SurfelMap(CLASSES)
    for i in range(3):
        frame, gt = render_frame(spec, i)
        fuse_frame(m, frame, gt.camera_pose)
    P = spec.trajectory[4]
    view = splat_render(m, P, spec.intr)
    n = len(m)
    st_ = fuse_frame(m, RgbdFrame(view.depth, view.color, spec.intr, 9), P)
    assert st_.created == 0 and len(m) == n


def test_rendered_box_silhouette_matches_ground_truth():
    spec = one_box_scene(8)
    m = SurfelMap(CLASSES)
    iid = m.new_instance([1.0, 0.0, 0.0])
    for i in (0, 2, 4, 6):
        frame, gt = render_frame(spec, i)
        labels = np.where(gt.masks == 1, iid, NO_INSTANCE)
        fuse_frame(m, frame, gt.camera_pose, labels)
    _, gt = render_frame(spec, 5)
    view = splat_render(m, gt.camera_pose, spec.intr)
    pred = predicted_instance_mask(view, iid)
    truth = gt.masks == 1
    assert pred.sum() > 500
    assert not np.any(pred & ~ndimage.binary_dilation(truth, iterations=2))
    assert not np.any(truth & ~ndimage.binary_dilation(pred, iterations=2))
    assert not predicted_instance_mask(view, 999).any()


def test_mark_active_objects():
    m = SurfelMap(CLASSES)
    iid = m.new_instance([1, 0, 0])
    m.add_surfels(np.zeros((3, 3)), np.tile([0.0, 0.0, -1.0], (3, 1)), np.full(3, 0.01), np.zeros((3, 3)),
                  instance_id=[iid, NO_INSTANCE, NO_INSTANCE], last_seen=[0, 100, 0])
    mark_active_objects(m, 10 * 200, 200)
    assert m.active.tolist() == [True, False, False]
    mark_active_objects(m, 100, 200)
    assert m.active.tolist() == [True, True, True]
    mark_active_objects(m, 201, 200)
    assert m.active.tolist() == [True, True, False]


def test_export_load_round_trip(tmp_path):
    spec = one_box_scene()
    frame, gt = render_frame(spec, 0)
    m = SurfelMap(CLASSES)
    iid = m.new_instance([0.2, 0.5, 0.3])
    fuse_frame(m, frame, gt.camera_pose, np.where(gt.masks == 1, iid, NO_INSTANCE),
               np.where(gt.masks == 1, 0.9, 0.1))
    m.export(tmp_path / "map.ply")
    r = SurfelMap.load(tmp_path / "map.ply")
    assert len(r) == len(m) and r.classes == m.classes
    np.testing.assert_allclose(r.position, m.position, rtol=1e-8, atol=1e-12)
    np.testing.assert_array_equal(r.instance_id, m.instance_id)
    np.testing.assert_allclose(r.p_o, m.p_o, rtol=1e-8)
    np.testing.assert_allclose(r.instances[iid].class_probs, m.instances[iid].class_probs)
    assert r.new_instance() == iid + 1


# -- rendering -----------------------------------------------------------------------


def test_empty_map_renders_empty_view():
    v = splat_render(SurfelMap(CLASSES), RigidTransform.identity(), SMALL)
    assert not v.depth.any() and np.all(v.surfel_index_map == -1)
    v = splat_render(SurfelMap(CLASSES), RigidTransform.identity(), SMALL, active_only=True)
    assert not v.depth.any()


def test_single_surfel_projects_to_principal_point():
    m = SurfelMap(CLASSES)
    m.add_surfels([[0.0, 0.0, 1.0]], [[0.0, 0.0, -1.0]], [0.001], [[1.0, 0.0, 0.0]])
    v = splat_render(m, RigidTransform.identity(), SMALL)
    assert v.depth[50, 50] == 1.0
    # minimum footprint is a one-pixel radius: the centre and its 4-neighbours
    assert sorted(zip(*np.nonzero(v.depth > 0))) == [(49, 50), (50, 49), (50, 50), (50, 51), (51, 50)]
    np.testing.assert_array_equal((v.depth > 0), v.surfel_index_map >= 0)


def test_z_buffer_keeps_nearest_and_ignores_back_faces():
    m = SurfelMap(CLASSES)
    m.add_surfels([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.5]],
                  [[0.0, 0.0, -1.0], [0.0, 0.0, -1.0], [0.0, 0.0, 1.0]], [0.01] * 3, np.zeros((3, 3)))
    v = splat_render(m, RigidTransform.identity(), SMALL)
    assert v.depth[50, 50] == 1.0 and v.surfel_index_map[50, 50] == 1


def test_splat_disk_radius():
    m = SurfelMap(CLASSES)
    m.add_surfels([[0.0, 0.0, 1.0]], [[0.0, 0.0, -1.0]], [0.03], [[0.0, 1.0, 0.0]])
    v = splat_render(m, RigidTransform.identity(), SMALL)
    vv, uu = np.nonzero(v.depth > 0)
    r2 = (uu - 50.0) ** 2 + (vv - 50.0) ** 2
    assert r2.max() <= 9.0 and len(vv) == int(np.sum([(du * du + dv * dv) <= 9
                                                      for du in range(-3, 4) for dv in range(-3, 4)]))
    np.testing.assert_allclose(v.depth[v.depth > 0], 1.0)


def random_cloud(rng, n):
    pos = np.c_[rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(0.3, 2.0, n)]
    nrm = rng.normal(size=(n, 3))
    nrm[:, 2] = -np.abs(nrm[:, 2]) - 0.3
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pos, nrm, rng.uniform(0.002, 0.02, n)


def test_compiled_splat_matches_reference_bit_for_bit():
    rng = np.random.default_rng(3)
    for n in (1, 50, 3000):
        pos, nrm, rad = random_cloud(rng, n)
        pos[n // 2:] = np.round(pos[n // 2:], 2)  # force exact ties
        for intr in (SMALL, CameraIntrinsics(260.0, 260.0, 159.5, 119.5, 320, 240)):
            d1, i1 = raster.splat(pos, nrm, rad, intr)
            d2, i2 = raster.splat_reference(pos, nrm, rad, intr)
            np.testing.assert_array_equal(i1, i2)
            np.testing.assert_array_equal(d1, d2)


def test_compiled_splat_matches_reference_on_fused_map():
    spec = one_box_scene()
    m = SurfelMap(CLASSES)
    for i in range(3):
        frame, gt = render_frame(spec, i)
        fuse_frame(m, frame, gt.camera_pose)
    P = spec.trajectory[5]
    pc, nc = raster.to_camera(m.position, m.normal, P.rotation, P.translation)
    d1, i1 = raster.splat(pc, nc, m.radius, spec.intr)
    d2, i2 = raster.splat_reference(pc, nc, m.radius, spec.intr)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_array_equal(d1, d2)


def test_coplanar_disks_render_continuous_plane():
    m = SurfelMap(CLASSES)
    fuse_frame(m, plane_frame(1.0), RigidTransform.identity())
    P = look_at([0.2, 0.1, 0.0], [0.0, 0.0, 1.0], up=(0.0, -1.0, 0.0))
    v = splat_render(m, P, SMALL)
    # border surfels carry camera-facing placeholder normals
    hit = (v.depth > 0) & m.normal_ok[np.maximum(v.surfel_index_map, 0)]
    assert hit.sum() > 0.8 * (v.depth > 0).sum()
    z = v.vertices()[..., 2][hit]
    np.testing.assert_allclose(z, 1.0, atol=1e-9)
    # winners are the disks centred closest to each pixel
    pc = inverse(P).apply(m.position[v.surfel_index_map[hit]])
    u = SMALL.fx * pc[:, 0] / pc[:, 2] + SMALL.cx
    vv = SMALL.fy * pc[:, 1] / pc[:, 2] + SMALL.cy
    pv, pu = np.nonzero(hit)
    assert np.median(np.hypot(u - pu, vv - pv)) < 0.5
