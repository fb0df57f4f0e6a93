"""Pseudo ground-truth filtering and the 2-threshold target split."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import exhaustive_filter, random_detections
from tripledet.boxes import BBox, Detection, iou
from tripledet.detector import DetectorConfig, detect, new_model
from tripledet.pseudo_gt import (Thresholds, build_training_targets,
                                 generate_pseudo_gt, pseudo_gt_manifest_entry)


# -- thresholds ----------------------------------------------------------------

def test_threshold_validation():
    Thresholds(0.1, 0.9, 0.3)
    Thresholds(0.5, 0.5, 0.3)
    with pytest.raises(ValueError):
        Thresholds(0.9, 0.1, 0.3)
    with pytest.raises(ValueError):
        Thresholds(0.0, 0.5, 0.3)
    with pytest.raises(ValueError):
        Thresholds(0.1, 0.9, 1.0)


# -- conflict filter -------------------------------------------------------------

def test_overlapping_pseudo_box_removed():
    th = Thresholds(0.1, 0.9, 0.3)
    box = Detection(BBox(0, 0, 10, 10), 1, 0.8)
    gt = [BBox(0, 0, 10, 5)]           # IoU 0.5 > 0.3
    assert exhaustive_filter([box], gt, th.theta_iou) == []


def test_filter_matches_exhaustive_oracle():
    rng = np.random.default_rng(50)
    for _ in range(200):
        dets = random_detections(rng, int(rng.integers(0, 6)))
        gts = [d.bbox for d in random_detections(rng, int(rng.integers(0, 3)))]
        theta = float(rng.uniform(0.1, 0.9))
        got = [d for d in dets if all(iou(d.bbox, g) <= theta for g in gts)]
        assert got == exhaustive_filter(dets, gts, theta)


def test_generate_pseudo_gt_empty_when_om_silent():
    # an untrained model with zeroed heads scores 0.5 everywhere; floor above it
    om = new_model(DetectorConfig(), 2, seed=1)
    om.freeze()
    image = np.random.default_rng(0).uniform(0, 1, (3, 64, 64))
    th = Thresholds(0.6, 0.9, 0.3)
    dets_at_floor = detect(om, image, score_thresh=th.theta_low, nms_thresh=th.theta_iou)
    got = generate_pseudo_gt(om, image, [], th)
    assert got == dets_at_floor   # no new-class boxes: filter is a no-op
    for d in got:
        assert d.score > th.theta_low


def test_generate_pseudo_gt_applies_conflict_filter():
    om = new_model(DetectorConfig(), 2, seed=2)
    om.freeze()
    image = np.random.default_rng(3).uniform(0, 1, (3, 64, 64))
    th = Thresholds(0.05, 0.9, 0.3)
    raw = detect(om, image, score_thresh=th.theta_low, nms_thresh=th.theta_iou)
    if not raw:
        pytest.skip("untrained model produced no detections above the floor")
    gt = [raw[0].bbox]                 # conflicts with itself at IoU 1
    got = generate_pseudo_gt(om, image, gt, th)
    assert got == exhaustive_filter(raw, gt, th.theta_iou)
    assert raw[0] not in got
    # pseudo boxes only ever carry the old model's (old) classes
    assert all(1 <= d.class_id <= om.num_classes for d in got)


# -- threshold splits ---------------------------------------------------------------

def test_split_mid_score_box_rpn_only():
    th = Thresholds(0.1, 0.9, 0.3)
    d = Detection(BBox(0, 0, 10, 10), 2, 0.5)
    out = build_training_targets([d], [], th)
    assert d.bbox in out.rpn_targets
    assert (d.bbox, 2) not in out.rcnn_targets


def test_split_collapses_when_thresholds_equal():
    th = Thresholds(0.5, 0.5, 0.3)
    rng = np.random.default_rng(51)
    dets = random_detections(rng, 10)
    out = build_training_targets(dets, [], th)
    # single-threshold baseline: both pseudo subsets are identical
    assert out.rpn_targets == [b for b, _ in out.rcnn_targets]


def test_split_matches_filter_oracle():
    th = Thresholds(0.2, 0.7, 0.3)
    rng = np.random.default_rng(52)
    dets = random_detections(rng, 20)
    gt = [(BBox(50, 50, 60, 60), 4)]
    out = build_training_targets(dets, gt, th)
    assert out.rpn_targets == [d.bbox for d in dets if d.score > 0.2] + [gt[0][0]]
    assert out.rcnn_targets == [(d.bbox, d.class_id) for d in dets if d.score > 0.7] + gt


def test_pseudo_subset_nesting_invariant():
    rng = np.random.default_rng(53)
    th = Thresholds(0.15, 0.85, 0.3)
    dets = random_detections(rng, 25)
    out = build_training_targets(dets, [], th)
    rcnn_boxes = [b for b, _ in out.rcnn_targets]
    assert all(b in out.rpn_targets for b in rcnn_boxes)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.05, 0.45), st.floats(0.5, 0.95))
@settings(max_examples=60, deadline=None)
def test_threshold_monotonicity(seed, low, high):
    rng = np.random.default_rng(seed)
    dets = random_detections(rng, 12)
    base = build_training_targets(dets, [], Thresholds(low, high, 0.3))
    tighter = build_training_targets(dets, [], Thresholds(low, min(high + 0.04, 0.99), 0.3))
    # raising theta_high never adds an rcnn target
    assert set((b, c) for b, c in tighter.rcnn_targets) <= set((b, c) for b, c in base.rcnn_targets)
    assert base.rpn_targets == tighter.rpn_targets


def test_two_threshold_class_ids_preserved():
    th = Thresholds(0.1, 0.5, 0.3)
    dets = [Detection(BBox(0, 0, 10, 10), 3, 0.9)]
    out = build_training_targets(dets, [(BBox(20, 20, 30, 30), 4)], th)
    assert (dets[0].bbox, 3) in out.rcnn_targets


# -- manifest dump --------------------------------------------------------------------

def test_manifest_entry_schema(tmp_path):
    dets = [Detection(BBox(1, 2, 11, 12), 2, 0.95)]
    entry = pseudo_gt_manifest_entry("scene_00000.ppm", 64, dets)
    path = tmp_path / "pseudo.json"
    path.write_text(json.dumps([entry]))
    back = json.loads(path.read_text())
    assert back[0]["objects"] == [
        {"x1": 1.0, "y1": 2.0, "x2": 11.0, "y2": 12.0, "class_id": 2}]
    assert set(back[0]) == {"file", "width", "height", "objects"}
