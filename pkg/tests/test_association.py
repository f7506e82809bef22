import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfelpose.association import (
    OVERLAP_THRESHOLD, Detection, DetectorCorruption, InstanceMask, RefineParams, associate, overlap, read_detection,
    refine_step, synthetic_detect, write_detection,
)
from surfelpose.camera import CameraIntrinsics
from surfelpose.pose_math import RigidTransform
from surfelpose.surfel_map import NO_INSTANCE, RenderedView, SurfelMap

CLASSES = ("a", "b", "c")


def fake_view(instance_map, surfel_index_map=None) -> RenderedView:
    H, W = instance_map.shape
    intr = CameraIntrinsics(50.0, 50.0, W / 2, H / 2, W, H)
    sidx = np.where(instance_map != NO_INSTANCE, 0, -1) if surfel_index_map is None else surfel_index_map
    return RenderedView(np.ones((H, W)), np.zeros((H, W, 3)), np.zeros((H, W, 3)), instance_map, sidx,
                        RigidTransform.identity(), intr)


def square(shape, r0, c0, size):
    m = np.zeros(shape, bool)
    m[r0:r0 + size, c0:c0 + size] = True
    return m


def mask(binary, label="a", score=0.9):
    return InstanceMask.from_soft(np.where(binary, 0.9, 0.1), label, score)


# -- overlap -------------------------------------------------------------------------


def test_overlap_examples():
    A = square((20, 20), 0, 0, 10)
    assert overlap(A, A) == 1.0
    assert overlap(A, square((20, 20), 10, 10, 10)) == 0.0
    half = np.zeros((20, 20), bool)
    half[0:5, 0:10] = True
    assert overlap(half, A) == 0.5
    assert overlap(A, np.zeros((20, 20), bool)) == 0.0
    with pytest.raises(ValueError):
        overlap(A, np.zeros((10, 10), bool))


# -- associate -----------------------------------------------------------------------


def pred_map(shape=(30, 30)):
    inst = np.full(shape, NO_INSTANCE)
    inst[square(shape, 0, 0, 10)] = 1  # 100 pixels
    return inst


@pytest.mark.parametrize("covered,expect", [(29, None), (30, None), (31, 1)])
def test_threshold_is_strict(covered, expect):
    inst = pred_map()
    det_bin = np.zeros_like(inst, bool)
    det_bin.reshape(-1)[np.flatnonzero(inst == 1)[:covered]] = True
    det_bin[20:25, 20:25] = True  # extra pixels outside the prediction do not matter
    a = associate(Detection([mask(det_bin)]), fake_view(inst), [1])
    assert a[0].instance == expect
    if expect is not None:
        assert a[0].overlap == pytest.approx(covered / 100)
    assert OVERLAP_THRESHOLD == 0.3


def test_empty_map_and_identical_mask():
    inst = pred_map()
    m = mask(inst == 1)
    assert associate(Detection([m]), fake_view(np.full(inst.shape, NO_INSTANCE)), [])[0].instance is None
    a = associate(Detection([mask(inst == 1)]), fake_view(inst), [1])
    assert a[0].instance == 1 and a[0].overlap == 1.0


def test_one_mask_per_instance_and_tie_break():
    inst = pred_map()
    upper = np.zeros_like(inst, bool)
    upper[0:6, 0:10] = True  # 60 % of instance 1
    lower = np.zeros_like(inst, bool)
    lower[6:10, 0:10] = True  # 40 %, also above threshold but smaller
    a = associate(Detection([mask(lower, score=0.95), mask(upper, score=0.8)]), fake_view(inst), [1])
    assert a[1].instance == 1 and a[1].overlap == 0.6
    assert a[0].instance is None
    # equal overlap with two instances goes to the lower id
    inst2 = np.full((30, 30), NO_INSTANCE)
    inst2[0:10, 0:10] = 3
    inst2[0:10, 10:20] = 2
    both = np.zeros((30, 30), bool)
    both[0:10, 5:15] = True
    a = associate(Detection([mask(both)]), fake_view(inst2), [2, 3])
    assert a[0].instance == 2 and a[0].overlap == 0.5


def test_contested_mask_goes_to_higher_score():
    a = square((20, 20), 0, 0, 10)
    b = square((20, 20), 5, 5, 10)
    det = Detection([mask(a, score=0.6), mask(b, score=0.9)])
    assert not np.any(det.masks[0].binary & det.masks[1].binary)
    assert det.masks[1].binary.sum() == 100 and det.masks[0].binary.sum() == 75
    for mk in det.masks:
        np.testing.assert_array_equal(mk.binary, mk.soft > 0.5)


def test_instance_mask_validation():
    with pytest.raises(ValueError):
        InstanceMask(np.ones((4, 4), bool), np.full((4, 4), 0.4), "a")
    with pytest.raises(ValueError):
        InstanceMask.from_soft(np.full((4, 4), 1.2), "a")
    with pytest.raises(ValueError):
        InstanceMask.from_soft(np.zeros((4, 4)), "a", score=2.0)
    with pytest.raises(ValueError):
        InstanceMask.from_soft(np.zeros((4, 4)), "zzz").distribution(CLASSES)


# -- synthetic detector ------------------------------------------------------------------


def test_erosion_of_square_by_two():
    gt = np.zeros((40, 40), int)
    gt[10:30, 10:30] = 1
    det = synthetic_detect(gt, {1: "a"}, CLASSES, DetectorCorruption(erode_px=2), rng_seed=3)
    (mk,) = det.masks
    np.testing.assert_array_equal(mk.binary, square((40, 40), 12, 12, 16))
    rim = (gt == 1) & ~mk.binary
    assert rim.sum() == 400 - 256
    assert np.all((mk.soft[rim] >= 0.4) & (mk.soft[rim] < 0.5))
    assert np.all(mk.soft[mk.binary] >= 0.7)
    assert np.all(mk.soft[gt == 0] <= 0.2)


def test_zero_corruption_equals_ground_truth():
    gt = np.zeros((30, 40), int)
    gt[2:12, 3:15] = 1
    gt[15:25, 20:35] = 2
    det = synthetic_detect(gt, {1: "a", 2: "c"}, CLASSES, DetectorCorruption(), rng_seed=0)
    assert [m.class_label for m in det.masks] == ["a", "c"]
    for iid, mk in zip((1, 2), det.masks):
        np.testing.assert_array_equal(mk.binary, gt == iid)
        assert mk.soft[gt == iid].min() >= 0.7


def test_detector_is_deterministic_and_flips_labels():
    gt = np.zeros((30, 30), int)
    gt[5:20, 5:20] = 1
    c = DetectorCorruption(erode_px=1, class_flip_prob=1.0)
    d1 = synthetic_detect(gt, {1: "a"}, CLASSES, c, rng_seed=11)
    d2 = synthetic_detect(gt, {1: "a"}, CLASSES, c, rng_seed=11)
    assert d1.masks[0].class_label == d2.masks[0].class_label != "a"
    np.testing.assert_array_equal(d1.masks[0].soft, d2.masks[0].soft)
    d3 = synthetic_detect(gt, {1: "a"}, CLASSES, c, rng_seed=12)
    assert not np.array_equal(d1.masks[0].soft, d3.masks[0].soft)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 3), st.integers(1, 4))
def test_binarisation_law_and_disjointness(seed, erode, n_obj):
    rng = np.random.default_rng(seed)
    gt = np.zeros((32, 32), int)
    for k in range(1, n_obj + 1):
        r, c = rng.integers(0, 24, size=2)
        h, w = rng.integers(3, 12, size=2)
        gt[r:r + h, c:c + w] = k
    labels = {k: CLASSES[k % 3] for k in range(1, n_obj + 1)}
    det = synthetic_detect(gt, labels, CLASSES, DetectorCorruption(erode_px=erode), rng_seed=seed)
    taken = np.zeros_like(gt, bool)
    for mk in det.masks:
        np.testing.assert_array_equal(mk.binary, mk.soft > 0.5)
        assert not np.any(taken & mk.binary)
        taken |= mk.binary


def test_detection_disk_round_trip(tmp_path):
    gt = np.zeros((24, 32), int)
    gt[3:15, 4:20] = 1
    gt[16:22, 20:30] = 2
    det = synthetic_detect(gt, {1: "b", 2: "a"}, CLASSES, DetectorCorruption(erode_px=1), rng_seed=5,
                           frame_index=7)
    write_detection(det, tmp_path / "det")
    back = read_detection(tmp_path / "det")
    assert back.frame_index == 7
    for a, b in zip(det.masks, back.masks):
        np.testing.assert_array_equal(a.soft, b.soft)
        np.testing.assert_array_equal(a.binary, b.binary)
        assert a.class_label == b.class_label and a.score == b.score
        np.testing.assert_allclose(a.class_probs, b.class_probs)


# -- refinement ----------------------------------------------------------------------


def grid_map(labels: np.ndarray, p_o: np.ndarray):
    """One surfel per pixel on a 1 cm grid, so image 4-neighbours are voxel
    face neighbours."""
    H, W = labels.shape
    v, u = np.mgrid[0:H, 0:W]
    pos = np.stack([u * 0.01 + 0.005, v * 0.01 + 0.005, np.full((H, W), 0.005)], -1).reshape(-1, 3)
    m = SurfelMap(CLASSES)
    nrm = np.tile([0.0, 0.0, -1.0], (H * W, 1))
    m.add_surfels(pos, nrm, np.full(H * W, 0.005), np.zeros((H * W, 3)), labels.reshape(-1), p_o.reshape(-1))
    view = fake_view(labels.copy(), np.arange(H * W).reshape(H, W))
    return m, view


def two_surfels(p_o=0.45, neighbour=True):
    labels = np.array([[1, NO_INSTANCE]])
    if not neighbour:
        labels = np.array([[1, NO_INSTANCE, NO_INSTANCE, NO_INSTANCE]])
    pv = np.full(labels.shape, p_o)
    pv[0, 0] = 0.9
    m, view = grid_map(labels, pv)
    if not neighbour:
        # move the candidate two voxels away from the labelled surfel
        m.position[1] += [0.02, 0, 0]
    return m, view


def test_candidate_assigned_after_eleven_frames():
    m, view = two_surfels()
    frame = np.full(view.depth.shape, 0.45)
    p = RefineParams(n=10, sigma_object=10)
    for k in range(10):
        refine_step(m, view, frame, k, p)
        assert m.instance_id[1] == NO_INSTANCE
    assert m.refine_confidence[1] == 10
    st_ = refine_step(m, view, frame, 10, p)
    assert st_.checked and st_.assigned == 1
    assert m.instance_id[1] == 1 and m.refine_confidence[1] == 0


def test_out_of_band_surfel_is_never_a_candidate():
    m, view = two_surfels(p_o=0.55)
    frame = np.full(view.depth.shape, 0.45)
    for k in range(25):
        st_ = refine_step(m, view, frame, k)
        assert st_.candidates == 0
    assert m.instance_id[1] == NO_INSTANCE and m.refine_confidence[1] == 0
    for edge in (0.4, 0.5):
        m, view = two_surfels(p_o=edge)
        assert refine_step(m, view, frame, 0).candidates == 0


def test_failing_criteria_reset_counter():
    m, view = two_surfels()
    frame = np.full(view.depth.shape, 0.45)
    for k in range(5):
        refine_step(m, view, frame, k)
    assert m.refine_confidence[1] == 5
    refine_step(m, view, np.full(view.depth.shape, 0.4), 5)  # criterion (i) needs > 0.4
    assert m.refine_confidence[1] == 0
    m, view = two_surfels(neighbour=False)
    refine_step(m, view, np.full(view.depth.shape, 0.45), 0)
    assert m.refine_confidence[1] == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40))
def test_counter_never_exceeds_frames_since_reset(pattern):
    m, view = two_surfels()
    p = RefineParams(n=7, sigma_object=4)
    since = 0
    for k, good in enumerate(pattern):
        frame = np.full(view.depth.shape, 0.45 if good else 0.2)
        refine_step(m, view, frame, k, p)
        since = since + 1 if good else 0
        assert m.refine_confidence[1] <= since
        if m.instance_id[1] != NO_INSTANCE:
            break


def test_refinement_recovers_eroded_rim():
    H = W = 30
    gt = np.zeros((H, W), bool)
    gt[5:25, 5:25] = True
    core = np.zeros_like(gt)
    core[7:23, 7:23] = True
    labels = np.where(core, 1, NO_INSTANCE)
    p_o = np.where(core, 0.9, np.where(gt, 0.45, 0.1))
    m, view = grid_map(labels, p_o)
    frame = np.where(gt, np.where(core, 0.9, 0.45), 0.1)

    def iou(a, b):
        return (a & b).sum() / (a | b).sum()

    base = iou(core, gt)
    p = RefineParams(n=10, sigma_object=10)
    for k in range(11):
        refine_step(m, view, frame, k, p)
    refined = (m.instance_id == 1).reshape(H, W)
    assert iou(refined, gt) > base
    assert not np.any(refined & ~gt)
