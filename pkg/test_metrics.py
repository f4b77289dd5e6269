#!/usr/bin/env python3
"""Tests for the overlap metrics and HD95"""

import json
import math
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from errors import ContractError
from metrics import (
    ConfusionCounts,
    acc,
    boundary,
    confusion,
    counts_dict,
    diagonal,
    evaluate_dataset,
    f1,
    hausdorff,
    hausdorff_bruteforce,
    hd95,
    hd95_bruteforce,
    image_metrics,
    iou,
    write_report,
)


def square(size, top, left, side):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[top:top + side, left:left + side] = 1
    return mask


def test_two_by_two_example():
    counts = confusion(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [1, 0]]))
    assert counts == ConfusionCounts(tp=1, fp=1, fn=1, tn=1)
    assert iou(counts) == pytest.approx(1 / 3)
    assert f1(counts) == pytest.approx(0.5)
    assert acc(counts) == pytest.approx(0.5)
    assert counts_dict(counts) == {"tp": 1, "fp": 1, "fn": 1, "tn": 1}


def test_empty_masks_score_perfectly():
    empty = np.zeros((8, 8), dtype=np.uint8)
    counts = confusion(empty, empty)
    assert (iou(counts), f1(counts), acc(counts)) == (1.0, 1.0, 1.0)
    assert hd95(empty, empty) == 0.0
    assert hausdorff(empty, empty) == 0.0


def test_one_empty_mask_scores_the_diagonal():
    empty = np.zeros((6, 8), dtype=np.uint8)
    full = np.ones((6, 8), dtype=np.uint8)
    assert hd95(empty, full) == pytest.approx(10.0)
    assert hd95(full, empty, spacing=(2.0, 1.0)) == pytest.approx(diagonal((6, 8), (2.0, 1.0)))
    assert diagonal((6, 8), (2.0, 1.0)) == pytest.approx(math.hypot(12, 8))


def test_single_pixel_distances_follow_spacing():
    pred = np.zeros((10, 10), dtype=np.uint8)
    gt = np.zeros((10, 10), dtype=np.uint8)
    pred[0, 0] = 1
    gt[3, 4] = 1
    assert hd95(pred, gt) == pytest.approx(5.0)
    assert hd95(pred, gt, spacing=(2.0, 1.0)) == pytest.approx(math.sqrt(52))


def test_identical_masks_have_zero_distance():
    mask = square(16, 3, 4, 6)
    assert hd95(mask, mask) == 0.0
    metrics = image_metrics(mask, mask)
    assert metrics == {"iou": 1.0, "f1": 1.0, "acc": 1.0, "hd95": 0.0}


def test_shifted_square():
    gt = square(16, 2, 2, 4)
    pred = square(16, 2, 4, 4)
    assert hausdorff(pred, gt) == pytest.approx(2.0)
    assert hd95(pred, gt) == pytest.approx(hd95_bruteforce(pred, gt))
    counts = confusion(pred, gt)
    assert (counts.tp, counts.fp, counts.fn) == (8, 8, 8)


def test_boundary_includes_the_image_edge():
    assert boundary(np.ones((4, 4))).sum() == 12
    assert boundary(square(8, 2, 2, 4)).sum() == 12
    assert boundary(square(8, 2, 2, 1)).sum() == 1


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.6), st.sampled_from([(1.0, 1.0), (0.5, 2.0), (3.0, 0.75)]))
def test_distance_transform_matches_brute_force(seed, density, spacing):
    rng = np.random.default_rng(seed)
    pred = (rng.random((12, 14)) < density).astype(np.uint8)
    gt = (rng.random((12, 14)) < density).astype(np.uint8)
    assert hd95(pred, gt, spacing) == pytest.approx(hd95_bruteforce(pred, gt, spacing), rel=1e-9, abs=1e-9)
    assert hausdorff(pred, gt, spacing) == pytest.approx(hausdorff_bruteforce(pred, gt, spacing), rel=1e-9, abs=1e-9)


def test_hd95_is_symmetric(rng):
    pred = (rng.random((10, 10)) < 0.3).astype(np.uint8)
    gt = (rng.random((10, 10)) < 0.3).astype(np.uint8)
    assert hd95(pred, gt) == pytest.approx(hd95(gt, pred))


@pytest.mark.parametrize("pred, gt", [
    (np.full((2, 2), 2), np.zeros((2, 2))),
    (np.zeros((2, 2)), np.full((2, 2), 0.5)),
    (np.zeros((2, 2)), np.zeros((2, 3))),
])
def test_input_contracts(pred, gt):
    with pytest.raises(ContractError):
        confusion(pred, gt)
    with pytest.raises(ContractError):
        hd95(pred, gt)


def test_evaluate_dataset_sorts_rows_and_averages(rng):
    gts = {name: square(8, 1, 1, 4) for name in ("b", "a", "c")}
    preds = {"a": gts["a"], "b": np.zeros((8, 8), dtype=np.uint8), "c": square(8, 1, 1, 2)}
    report = evaluate_dataset(preds, gts, workers=2)
    assert report["count"] == 3
    assert [row["id"] for row in report["per_image"]] == ["a", "b", "c"]
    assert report["per_image"][0]["iou"] == 1.0
    assert report["per_image"][1]["iou"] == 0.0
    assert report["per_image"][2]["iou"] == pytest.approx(0.25)
    assert report["mean"]["iou"] == pytest.approx(1.25 / 3)
    assert report["per_image"][1]["hd95"] == pytest.approx(diagonal((8, 8)))


def test_evaluate_dataset_rejects_mismatched_ids():
    mask = square(4, 0, 0, 2)
    with pytest.raises(ContractError, match="mismatch"):
        evaluate_dataset({"a": mask}, {"b": mask})
    with pytest.raises(ContractError):
        evaluate_dataset({"a": mask}, {"a": mask, "b": mask})


def test_write_report(tmp_path):
    report = evaluate_dataset({"x": square(4, 0, 0, 2)}, {"x": square(4, 0, 0, 2)})
    path = write_report(tmp_path / "report.json", report)
    assert json.loads(path.read_text()) == report


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
