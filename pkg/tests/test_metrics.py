"""Dice/Hausdorff against brute-force oracles, slice stacking, case-set evaluation."""

import numpy as np
import pytest
from helpers import dice_oracle, hausdorff_oracle

from tunet.errors import ContractError
from tunet.metrics import (
    LabelVolume,
    boundary_mask,
    dice,
    evaluate_case_set,
    grid_diagonal_mm,
    hausdorff,
    mean_foreground_dsc,
    stack_slices,
)

UNIT = (1.0, 1.0, 1.0)


def vol(voxels, spacing=UNIT, k=2):
    return LabelVolume(np.asarray(voxels, dtype=np.int32), spacing, k)


def random_mask_volume(rng, shape, p=0.1):
    return (rng.random(shape) < p).astype(np.int32)


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------


def test_dice_perfect_match():
    v = np.zeros((4, 8, 8), dtype=np.int32)
    v[1:3, 2:5, 2:5] = 1
    assert dice(vol(v), vol(v.copy()), 1) == 1.0


def test_dice_disjoint_equal_masks():
    a = np.zeros((2, 8, 8), dtype=np.int32)
    b = np.zeros((2, 8, 8), dtype=np.int32)
    a[0, :2, :2] = 1
    b[1, 4:6, 4:6] = 1
    assert dice(vol(a), vol(b), 1) == 0.0


def test_dice_both_empty_is_one():
    z = np.zeros((2, 4, 4), dtype=np.int32)
    assert dice(vol(z), vol(z.copy()), 1) == 1.0


def test_dice_grid_mismatch():
    with pytest.raises(ContractError):
        dice(vol(np.zeros((2, 4, 4))), vol(np.zeros((2, 4, 5))), 1)


def test_dice_symmetry():
    rng = np.random.default_rng(0)
    a = random_mask_volume(rng, (4, 8, 8))
    b = random_mask_volume(rng, (4, 8, 8))
    assert dice(vol(a), vol(b), 1) == dice(vol(b), vol(a), 1)


def test_dice_fifty_random_pairs_match_set_oracle():
    rng = np.random.default_rng(42)
    for _ in range(50):
        a = random_mask_volume(rng, (4, 16, 16), p=rng.uniform(0.02, 0.3))
        b = random_mask_volume(rng, (4, 16, 16), p=rng.uniform(0.02, 0.3))
        got = dice(vol(a), vol(b), 1)
        assert got == dice_oracle(a == 1, b == 1)


def test_dice_monotone_under_growing_symmetric_difference():
    # nested constructed case: moving mask away from gt never raises DSC
    gt = np.zeros((1, 8, 8), dtype=np.int32)
    gt[0, 2:6, 2:6] = 1
    prev = 1.0
    for shift in range(4):
        pred = np.zeros_like(gt)
        pred[0, 2 + shift : 6 + shift if 6 + shift <= 8 else 8, 2:6] = 1
        score = dice(vol(pred), vol(gt), 1)
        assert score <= prev + 1e-12
        prev = score


# ---------------------------------------------------------------------------
# hausdorff
# ---------------------------------------------------------------------------


def test_hausdorff_identical_masks():
    v = np.zeros((4, 8, 8), dtype=np.int32)
    v[1:3, 2:5, 3:6] = 1
    assert hausdorff(vol(v), vol(v.copy()), 1) == 0.0


def test_hausdorff_single_voxels_offset_three():
    a = np.zeros((8, 8, 8), dtype=np.int32)
    b = np.zeros((8, 8, 8), dtype=np.int32)
    a[2, 3, 3] = 1
    b[5, 3, 3] = 1  # offset 3 voxels along depth, spacing 1 mm
    assert hausdorff(vol(a), vol(b), 1) == 3.0


def test_hausdorff_respects_spacing():
    a = np.zeros((8, 8, 8), dtype=np.int32)
    b = np.zeros((8, 8, 8), dtype=np.int32)
    a[2, 3, 3] = 1
    b[5, 3, 3] = 1
    spacing = (1.0, 1.0, 2.5)  # depth axis uses sz
    assert hausdorff(vol(a, spacing), vol(b, spacing), 1) == 7.5


def test_hausdorff_empty_conventions():
    z = np.zeros((4, 8, 8), dtype=np.int32)
    m = z.copy()
    m[1, 2, 2] = 1
    assert hausdorff(vol(z), vol(z.copy()), 1) == 0.0
    penalty = grid_diagonal_mm((4, 8, 8), UNIT)
    assert hausdorff(vol(m), vol(z.copy()), 1) == penalty
    assert hausdorff(vol(z.copy()), vol(m), 1) == penalty


def test_hausdorff_symmetry():
    rng = np.random.default_rng(1)
    a = random_mask_volume(rng, (4, 8, 8), 0.15)
    b = random_mask_volume(rng, (4, 8, 8), 0.15)
    assert hausdorff(vol(a), vol(b), 1) == hausdorff(vol(b), vol(a), 1)


def test_hausdorff_fifty_random_pairs_match_brute_force():
    rng = np.random.default_rng(7)
    for trial in range(50):
        shape = (4, 8, 8)
        spacing = (1.0, 1.0, 1.0) if trial % 2 == 0 else (0.5, 1.5, 2.0)
        a = random_mask_volume(rng, shape, p=rng.uniform(0.05, 0.25))
        b = random_mask_volume(rng, shape, p=rng.uniform(0.05, 0.25))
        got = hausdorff(vol(a, spacing), vol(b, spacing), 1)
        want = hausdorff_oracle(a == 1, b == 1, spacing)
        assert got == want


def test_boundary_mask_grid_edges_count():
    m = np.ones((2, 2, 2), dtype=bool)
    assert np.array_equal(boundary_mask(m), m)  # all voxels touch the grid edge
    big = np.zeros((5, 5, 5), dtype=bool)
    big[1:4, 1:4, 1:4] = True
    inner = boundary_mask(big)
    assert not inner[2, 2, 2]
    assert inner[1, 1, 1]


# ---------------------------------------------------------------------------
# slice stacking
# ---------------------------------------------------------------------------


def test_stack_single_slice():
    logits = np.zeros((3, 4, 4), dtype=np.float32)
    logits[1] = 1.0
    v = stack_slices([logits], UNIT, 3)
    assert v.shape == (1, 4, 4)
    assert np.all(v.voxels == 1)


def test_stack_background_maximal():
    logits = np.zeros((3, 4, 4), dtype=np.float32)
    logits[0] = 5.0
    v = stack_slices([logits, logits], UNIT, 3)
    assert np.all(v.voxels == 0)


def test_stack_tie_goes_to_lowest_class():
    logits = np.zeros((4, 2, 2), dtype=np.float32)
    logits[1] = 2.0
    logits[3] = 2.0  # tie between classes 1 and 3
    v = stack_slices([logits], UNIT, 4)
    assert np.all(v.voxels == 1)


def test_stack_empty_list_rejected():
    with pytest.raises(ContractError):
        stack_slices([], UNIT, 2)


def test_stack_depth_equals_input_length():
    logits = [np.random.default_rng(i).standard_normal((3, 4, 4)) for i in range(5)]
    v = stack_slices(logits, UNIT, 3)
    assert v.shape[0] == 5
    assert v.voxels.max() < 3


# ---------------------------------------------------------------------------
# case-set evaluation
# ---------------------------------------------------------------------------


def _label_replay_predictor(k):
    """Stub predictor: the 'image' slice holds the labels to emit, one-hot."""

    def predict(slice2d):
        labels = slice2d.astype(np.int32)
        h, w = labels.shape
        logits = np.zeros((k, h, w), dtype=np.float32)
        yy, xx = np.indices((h, w))
        logits[labels, yy, xx] = 10.0
        return logits

    return predict


def test_perfect_prediction_scores_one_and_zero():
    gt = np.zeros((3, 8, 8), dtype=np.int32)
    gt[1, 2:5, 2:5] = 1
    gt[2, 4:7, 1:4] = 2
    case = ("c0", gt.astype(np.float32), vol(gt, k=3))
    report = evaluate_case_set([case], _label_replay_predictor(3))
    assert report.mean_dsc == 1.0
    assert report.mean_hd_mm == 0.0
    assert all(report.dsc[c] == 1.0 for c in report.class_ids)


def test_two_cases_average_dice():
    # case A: overlap 8 of 10/10 -> 0.8; case B: overlap 6 of 10/10 -> 0.6
    def build(overlap):
        gt = np.zeros((1, 4, 16), dtype=np.int32)
        gt[0, 1, 0:10] = 1
        pred = np.zeros_like(gt)
        pred[0, 1, 10 - overlap : 20 - overlap] = 1
        return pred, gt

    cases = []
    for i, overlap in enumerate((8, 6)):
        pred, gt = build(overlap)
        cases.append((f"c{i}", pred.astype(np.float32), vol(gt, k=2)))
    report = evaluate_case_set(cases, _label_replay_predictor(2))
    assert abs(report.mean_dsc - 0.7) < 1e-12


def test_absent_class_counts_dsc_one_and_skips_hd():
    gt = np.zeros((2, 6, 6), dtype=np.int32)
    gt[0, 1:3, 1:3] = 1  # class 2 absent everywhere
    case = ("c0", gt.astype(np.float32), vol(gt, k=3))
    report = evaluate_case_set([case], _label_replay_predictor(3))
    assert report.dsc[2] == 1.0
    assert np.isnan(report.hd_mm[2])
    assert report.mean_hd_mm == 0.0  # only class 1 contributes, and it is perfect


def test_report_is_deterministic():
    rng = np.random.default_rng(3)
    gt = random_mask_volume(rng, (3, 8, 8), 0.2)
    case = ("c0", gt.astype(np.float32), vol(gt, k=2))
    a = evaluate_case_set([case], _label_replay_predictor(2)).to_record()
    b = evaluate_case_set([case], _label_replay_predictor(2)).to_record()
    assert a == b


def test_report_serialization_fields():
    gt = np.zeros((1, 4, 4), dtype=np.int32)
    gt[0, 1:3, 1:3] = 1
    case = ("c0", gt.astype(np.float32), vol(gt, k=2))
    report = evaluate_case_set([case], _label_replay_predictor(2))
    rec = report.to_record()
    assert set(rec) == {"classes", "mean_dsc", "mean_hd_mm"}
    assert set(rec["classes"][0]) == {"class_id", "dsc", "hd_mm"}
    assert "dsc" in report.to_text()


def test_mean_foreground_dsc_ignores_background():
    gt = np.zeros((1, 4, 4), dtype=np.int32)
    gt[0, :2, :2] = 1
    pred = gt.copy()
    assert mean_foreground_dsc(vol(pred), vol(gt)) == 1.0
