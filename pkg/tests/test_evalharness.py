import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from posekit import tensorio
from posekit.errors import PosekitError
from posekit.evalharness import (
    CropTransform,
    PairSampleSpec,
    SynthConfig,
    compute_pose_metrics,
    crop_masked_object,
    export_manifest,
    mask_accuracy,
    mask_iou,
    retrieval_map,
    sample_balanced_pairs,
    synth_scene,
)
from posekit.rotations import skew


def test_synth_noiseless_epipolar_constraint():
    """Independent check: x_b^T [t]x R x_a = 0 with E built directly from gt."""
    cfg = SynthConfig(n_points=100, n_views=3, seed=0)
    sc = synth_scene(cfg)
    k_inv = np.linalg.inv(cfg.intrinsics.matrix())
    for (i, j), ms in sc.matchsets.items():
        r, t = sc.relative_pose(i, j)
        e = skew(t / np.linalg.norm(t)) @ r
        ah = np.column_stack([ms.points_a, np.ones(len(ms.points_a))]) @ k_inv.T
        bh = np.column_stack([ms.points_b, np.ones(len(ms.points_b))]) @ k_inv.T
        resid = np.abs(np.einsum("ij,jk,ik->i", bh, e, ah))
        assert resid.max() < 1e-10


def test_synth_exact_outlier_count():
    cfg = SynthConfig(n_points=200, outlier_ratio=0.5, seed=1)
    sc = synth_scene(cfg)
    ms = sc.matchsets[(0, 1)]
    assert (~ms.inlier_labels).sum() == 100


def test_synth_deterministic():
    cfg = SynthConfig(n_points=50, noise_px=1.0, outlier_ratio=0.2, n_views=3, seed=2)
    a, b = synth_scene(cfg), synth_scene(cfg)
    assert np.array_equal(a.points, b.points)
    for key in a.matchsets:
        assert np.array_equal(a.matchsets[key].points_b, b.matchsets[key].points_b)
        assert np.array_equal(a.matchsets[key].confidences, b.matchsets[key].confidences)


def test_synth_observations_shared_across_matchsets():
    """A view's observation of a point is the same pixel in every matchset."""
    cfg = SynthConfig(n_points=40, noise_px=1.0, n_views=3, seed=3)
    sc = synth_scene(cfg)
    assert np.array_equal(sc.matchsets[(0, 1)].points_a, sc.matchsets[(0, 2)].points_a)
    assert np.array_equal(sc.matchsets[(0, 1)].points_b, sc.matchsets[(1, 2)].points_a)


def test_synth_confidence_ranges():
    cfg = SynthConfig(n_points=300, noise_px=0.5, outlier_ratio=0.4, seed=4)
    ms = synth_scene(cfg).matchsets[(0, 1)]
    assert (ms.confidences[ms.inlier_labels] >= 0.85).all()
    assert (ms.confidences[~ms.inlier_labels] <= 0.9).all()


# --- balanced pairs ------------------------------------------------------------


def test_balanced_pairs_all_identical_poses_error():
    rots = [np.eye(3)] * 6
    spec = PairSampleSpec(bins=[(0.0, 10.0), (10.0, 20.0), (20.0, 30.0)], pairs_per_bin=2)
    with pytest.raises(PosekitError, match=r"bin \[10"):
        sample_balanced_pairs(rots, spec, seed=0)


def test_balanced_pairs_angles_fall_in_bins():
    rng = np.random.default_rng(5)
    rots = []
    for _ in range(40):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rots.append(Rotation.from_rotvec(axis * rng.uniform(0, np.radians(16))).as_matrix())
    spec = PairSampleSpec(bins=[(0.0, 10.0), (10.0, 20.0), (20.0, 30.0)], pairs_per_bin=10)
    pairs = sample_balanced_pairs(rots, spec, seed=1)
    assert len(pairs) == 30
    for idx, (lo, hi) in enumerate(spec.bins):
        for i, j in pairs[10 * idx : 10 * (idx + 1)]:
            ang = np.degrees(
                np.arccos(np.clip((np.trace(rots[i].T @ rots[j]) - 1) / 2, -1, 1))
            )
            assert lo - 1e-9 <= ang <= hi + 1e-9


def test_balanced_pairs_deterministic():
    rng = np.random.default_rng(6)
    rots = [Rotation.random(random_state=i).as_matrix() for i in range(25)]
    spec = PairSampleSpec(bins=[(0.0, 180.0)], pairs_per_bin=12)
    assert sample_balanced_pairs(rots, spec, seed=3) == sample_balanced_pairs(rots, spec, seed=3)


def test_pair_spec_validation():
    with pytest.raises(ValueError):
        PairSampleSpec(bins=[(5.0, 10.0)], pairs_per_bin=1)  # does not start at 0
    with pytest.raises(ValueError):
        PairSampleSpec(bins=[(0.0, 10.0), (15.0, 30.0)], pairs_per_bin=1)  # gap


# --- pose metrics ----------------------------------------------------------------


def test_metrics_hand_computed():
    rep = compute_pose_metrics([10.0, 20.0, 40.0])
    assert rep.median_err_deg == 20.0
    assert rep.acc30 == pytest.approx(2 / 3)
    assert rep.acc15 == pytest.approx(1 / 3)
    assert rep.n_pairs == 3


def test_metrics_all_zero():
    rep = compute_pose_metrics([0.0, 0.0, 0.0, 0.0])
    assert rep.median_err_deg == 0.0 and rep.acc15 == 1.0 and rep.acc30 == 1.0


def test_metrics_strict_thresholds():
    rep = compute_pose_metrics([15.0, 30.0])
    assert rep.acc15 == 0.0
    assert rep.acc30 == 0.5  # 15 < 30, 30 is excluded


def test_metrics_empty_errors():
    with pytest.raises(ValueError):
        compute_pose_metrics([])


@given(seed=st.integers(0, 10_000))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    errs = rng.uniform(0, 60, size=rng.integers(1, 50))
    a = compute_pose_metrics(errs)
    b = compute_pose_metrics(rng.permutation(errs))
    assert (a.median_err_deg, a.acc15, a.acc30) == (b.median_err_deg, b.acc15, b.acc30)


# --- segmentation metrics -----------------------------------------------------------


def test_iou_identical():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:5, 2:5] = 1
    assert mask_iou(m, m) == 1.0


def test_iou_disjoint():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[:2], b[6:] = 1, 1
    assert mask_iou(a, b) == 0.0


def test_iou_half_overlap():
    a = np.ones((4, 8), dtype=np.uint8)
    b = np.zeros((4, 8), dtype=np.uint8)
    b[:, :4] = 1
    assert mask_iou(a, b) == 0.5


def test_iou_both_empty_is_one():
    z = np.zeros((4, 4), dtype=np.uint8)
    assert mask_iou(z, z) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_mask_accuracy():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = a.copy()
    b[0, 0] = 1
    assert mask_accuracy(b, a) == pytest.approx(15 / 16)


@given(seed=st.integers(0, 5_000))
def test_iou_symmetric_and_one_iff_identical(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, size=(6, 6)).astype(np.uint8)
    b = rng.integers(0, 2, size=(6, 6)).astype(np.uint8)
    assert mask_iou(a, b) == mask_iou(b, a)
    assert (mask_iou(a, b) == 1.0) == np.array_equal(a, b)


# --- retrieval mAP ---------------------------------------------------------------------


def test_map_rank_one():
    assert retrieval_map([([3, 1, 2], 3), ([0, 5], 0)]) == 1.0


def test_map_rank_two():
    assert retrieval_map([([1, 3], 3), ([2, 0], 0)]) == 0.5


def test_map_mixed_ranks():
    res = [([0, 1, 2, 3], 0), ([1, 0, 2, 3], 0), ([1, 2, 3, 0], 0)]
    assert retrieval_map(res) == pytest.approx((1 + 0.5 + 0.25) / 3)


def test_map_missing_gt_contributes_zero():
    assert retrieval_map([([1, 2], 9), ([3], 3)]) == 0.5


def test_map_order_invariant():
    res = [([0, 1], 0), ([1, 0], 0), ([0, 1], 1)]
    assert retrieval_map(res) == retrieval_map(list(reversed(res)))


# --- crops ----------------------------------------------------------------------------------


def test_crop_full_mask_is_whole_image():
    img = np.arange(48, dtype=np.uint8).reshape(6, 8)
    crop, tf = crop_masked_object(img, np.ones((6, 8), dtype=np.uint8))
    assert crop.shape == img.shape
    assert (tf.dx, tf.dy) == (0, 0)
    assert np.array_equal(crop, img)


def test_crop_single_pixel():
    img = np.ones((9, 9, 3), dtype=np.uint8)
    mask = np.zeros((9, 9), dtype=np.uint8)
    mask[4, 4] = 1
    crop, tf = crop_masked_object(img, mask, pad_ratio=0.1)
    assert crop.shape == (1, 1, 3)
    assert (tf.dx, tf.dy) == (4, 4)


def test_crop_zeroes_background():
    img = np.full((6, 6), 9, dtype=np.uint8)
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[2:4, 2:4] = 1
    crop, tf = crop_masked_object(img, mask, pad_ratio=0.5)
    assert crop[0, 0] == 0  # padded region is background, zeroed
    assert crop[tf.to_crop([[2, 2]])[0][1].astype(int), 0] == 0


def test_crop_transform_round_trip():
    tf = CropTransform(dx=7, dy=11)
    pts = np.array([[3.0, 4.0], [0.0, 0.0], [12.5, -2.0]])
    assert np.array_equal(tf.to_crop(tf.to_full(pts)), pts)
    assert np.array_equal(tf.matrix() @ [1.0, 1.0, 1.0], [8.0, 12.0, 1.0])


def test_crop_empty_mask_errors():
    with pytest.raises(ValueError):
        crop_masked_object(np.ones((4, 4)), np.zeros((4, 4)))


# --- manifest export ---------------------------------------------------------------------------


def test_export_manifest_round_trip(tmp_path):
    cfg = SynthConfig(n_points=30, noise_px=0.5, n_views=3, seed=7)
    sc = synth_scene(cfg)
    path = export_manifest(sc, str(tmp_path / "bundle"))
    manifest = tensorio.load_manifest(path)
    assert len(manifest.views) == 3
    assert all(v.gt_pose is not None for v in manifest.views)
    assert len(manifest.prompts) == 1
    assert len(manifest.proposals) == 4
    ref = manifest.find_matchset(0, 1)
    pa, pb, conf, gt = manifest.matchset_arrays(ref)
    assert np.array_equal(pa, sc.matchsets[(0, 1)].points_a)
    assert np.array_equal(gt, sc.matchsets[(0, 1)].inlier_labels)


def test_export_manifest_byte_deterministic(tmp_path):
    cfg = SynthConfig(n_points=20, n_views=2, seed=8)
    p1 = export_manifest(synth_scene(cfg), str(tmp_path / "a"))
    p2 = export_manifest(synth_scene(cfg), str(tmp_path / "b"))
    assert open(p1, "rb").read() == open(p2, "rb").read()
    t1 = sorted((tmp_path / "a" / "tensors").iterdir())
    t2 = sorted((tmp_path / "b" / "tensors").iterdir())
    assert [t.name for t in t1] == [t.name for t in t2]
    for f1, f2 in zip(t1, t2):
        assert f1.read_bytes() == f2.read_bytes()
