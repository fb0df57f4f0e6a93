"""Detector pipeline: forward contracts, proposals, losses, checkpoints."""

import numpy as np
import pytest

import tripledet.detector as det
from tripledet import autodiff as ad
from tripledet.autodiff import Tensor
from tripledet.boxes import BBox, iou_matrix, nms_indices
from tripledet.detector import (DetectorConfig, DetectorError, DetectorModel, anchor_boxes,
                                checkpoint_bytes, checkpoint_hash, detect, forward_features,
                                frcnn_loss, head_forward, load_checkpoint, match_anchors,
                                new_model, propose, roi_pool, sample_rois, save_checkpoint)
from tripledet.verification import MICRO_CONFIG, micro_image, micro_targets


@pytest.fixture(scope="module")
def model():
    return new_model(DetectorConfig(), 3, seed=0)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(1).uniform(0, 1, (3, 64, 64))


def zero_bias_model(seed=0):
    m = new_model(DetectorConfig(), 3, seed=seed)
    for name, p in m.params.items():
        if name.endswith(".b"):
            p.data[:] = 0.0
    return m


# -- forward_features -----------------------------------------------------------

def test_zero_image_zero_bias_gives_zero_features():
    m = zero_bias_model()
    f = forward_features(m, np.zeros((3, 64, 64)))
    assert np.array_equal(f.data, np.zeros((16, 16, 16)))


def test_feature_shape_contract(model, image):
    assert forward_features(model, image).shape == (16, 16, 16)


def test_wrong_image_shape_rejected(model):
    with pytest.raises(DetectorError):
        forward_features(model, np.zeros((3, 32, 32)))


def test_feature_grad_matches_fd_on_first_kernel(model, image):
    names = sorted(model.params)
    base = {n: model.params[n] for n in names}

    def f(w1):
        params = dict(base)
        params["backbone.conv1.w"] = w1
        m = DetectorModel(model.config, model.num_classes, params)
        return ad.tsum(forward_features(m, image))

    err = ad.grad_check(f, [model.params["backbone.conv1.w"].data], step=1e-5)
    assert err < 1e-4


# -- proposals ---------------------------------------------------------------------

def test_propose_uniform_scores_equals_anchor_nms():
    m = zero_bias_model()
    for name in ("rpn.obj.w", "rpn.delta.w"):
        m.params[name].data[:] = 0.0
    f = forward_features(m, np.random.default_rng(2).uniform(0, 1, (3, 64, 64)))
    props = propose(m, f)
    assert all(p.objectness == 0.5 for p in props)
    anchors = np.asarray(anchor_boxes(m.config))
    from tripledet.boxes import clip_boxes
    clipped = clip_boxes(anchors, 64, 64)
    keep = nms_indices(clipped, np.full(len(clipped), 0.5), 0.7,
                       max_keep=m.config.num_proposals)
    expect = clipped[keep]
    got = np.array([p.bbox.as_array() for p in props])
    assert np.array_equal(got, expect)


def test_proposals_within_image(model, image):
    f = forward_features(model, image)
    for p in propose(model, f):
        b = p.bbox
        assert 0 <= b.x1 < b.x2 <= 64 and 0 <= b.y1 < b.y2 <= 64


def test_propose_cap(model, image):
    f = forward_features(model, image)
    assert len(propose(model, f)) <= model.config.num_proposals


# -- roi pooling --------------------------------------------------------------------

def test_roi_pool_single_cell_constant():
    f = Tensor(np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4))
    out = roi_pool(f, [BBox(1.0, 2.0, 2.0, 3.0)], pool_size=4, stride=1)
    for c in range(2):
        assert np.all(out.data[0, c] == f.data[c, 2, 1])


def test_roi_pool_constant_map_constant_output():
    f = Tensor(np.full((3, 8, 8), 2.5))
    out = roi_pool(f, [BBox(0.0, 0.0, 30.0, 30.0)], pool_size=4, stride=4)
    assert np.all(out.data == 2.5)


def test_roi_pool_gradcheck():
    rng = np.random.default_rng(3)
    rois = [BBox(0.5, 0.5, 3.2, 3.6), BBox(1.0, 0.2, 3.8, 2.9)]
    err = ad.grad_check(
        lambda x: ad.tsum(ad.square(roi_pool(x, rois, pool_size=4, stride=1))),
        [rng.normal(size=(2, 4, 4))], step=1e-5)
    assert err < 1e-4


# -- head ------------------------------------------------------------------------------

def test_zero_head_weights_uniform_softmax(model, image):
    m = zero_bias_model()
    m.params["rcnn.cls.w"].data[:] = 0.0
    f = forward_features(m, image)
    pooled = roi_pool(f, [BBox(0, 0, 16, 16)], 4, 4)
    logits, deltas = head_forward(m, pooled)
    assert np.array_equal(logits.data, np.zeros((1, 4)))
    probs = ad.softmax(logits, axis=1).data
    assert np.allclose(probs, 0.25, atol=0, rtol=0)


def test_logit_width_contract(model, image):
    f = forward_features(model, image)
    pooled = roi_pool(f, [BBox(0, 0, 16, 16), BBox(8, 8, 32, 32)], 4, 4)
    logits, deltas = head_forward(model, pooled)
    assert logits.shape == (2, model.num_classes + 1)
    assert deltas.shape == (2, model.num_classes, 4)


def test_end_to_end_gradcheck_micro():
    rng = np.random.default_rng(4)
    m = new_model(MICRO_CONFIG, 2, seed=5)
    image = micro_image(rng)
    roi = [BBox(2.0, 2.0, 10.0, 10.0)]
    names = sorted(m.params)

    def f(*tensors):
        mm = DetectorModel(MICRO_CONFIG, 2, dict(zip(names, tensors)))
        feats = forward_features(mm, image)
        logits, _ = head_forward(mm, roi_pool(feats, roi, MICRO_CONFIG.pool_size,
                                              MICRO_CONFIG.stride))
        return ad.tsum(ad.square(logits))

    err = ad.grad_check(f, [m.params[n].data for n in names], step=1e-5)
    assert err < 1e-4


# -- detect ------------------------------------------------------------------------------

def test_detect_score_thresh_one_empty(model, image):
    assert detect(model, image, score_thresh=1.0) == []


def test_detect_never_emits_background(model, image):
    for d in detect(model, image, score_thresh=0.05):
        assert d.class_id >= 1


def test_detect_deterministic(model, image):
    a = detect(model, image, 0.1, 0.3)
    b = detect(model, image, 0.1, 0.3)
    assert a == b


# -- anchor matching and RoI sampling -------------------------------------------------------

def test_match_anchors_disjoint_and_cover_targets():
    cfg = DetectorConfig()
    anchors = anchor_boxes(cfg)
    rng = np.random.default_rng(6)
    for _ in range(20):
        targets = np.array([[x, y, x + w, y + h] for x, y, w, h in
                            zip(rng.uniform(0, 36, 3), rng.uniform(0, 36, 3),
                                rng.uniform(10, 28, 3), rng.uniform(10, 28, 3))])
        pos, neg, match = match_anchors(anchors, targets)
        assert not np.any(pos & neg)
        ious = iou_matrix(anchors, targets)
        # every target owns at least one positive anchor
        for t in range(len(targets)):
            assert pos[ious[:, t].argmax()]
        assert np.all(ious[neg].max(axis=1) <= det.RPN_NEG_IOU)


def test_match_anchors_no_targets_all_negative():
    cfg = DetectorConfig()
    anchors = anchor_boxes(cfg)
    pos, neg, match = match_anchors(anchors, np.zeros((0, 4)))
    assert not pos.any() and neg.all()


def test_sample_rois_cap_and_reproducibility():
    rng = np.random.default_rng(7)
    candidates = np.concatenate([rng.uniform(0, 30, (40, 2)),
                                 rng.uniform(32, 60, (40, 2))], axis=1)
    targets = candidates[:10].copy()
    labels = np.arange(1, 11)
    r1 = sample_rois(candidates, targets, labels, np.random.default_rng(9))
    r2 = sample_rois(candidates, targets, labels, np.random.default_rng(9))
    for a, b in zip(r1, r2):
        assert np.array_equal(a, b)
    rois, roi_labels, match = r1
    assert len(rois) <= det.ROI_SAMPLE_SIZE
    assert (roi_labels > 0).sum() <= det.ROI_POS_CAP


# -- losses -----------------------------------------------------------------------------

def test_loss_nonnegative_and_finite(model, image):
    targets = [(BBox(10, 10, 26, 26), 1), (BBox(40, 40, 58, 60), 2)]
    loss = frcnn_loss(model, image, [b for b, _ in targets], targets,
                      np.random.default_rng(0))
    assert np.isfinite(loss.item()) and loss.item() >= 0.0


def test_loss_no_targets_negative_only_defined(model, image):
    loss = frcnn_loss(model, image, [], [], np.random.default_rng(0))
    assert np.isfinite(loss.item()) and loss.item() >= 0.0


def test_loss_reproducible_under_seed(model, image):
    targets = [(BBox(5, 5, 20, 22), 3)]
    a = frcnn_loss(model, image, [b for b, _ in targets], targets, np.random.default_rng(11))
    b = frcnn_loss(model, image, [b for b, _ in targets], targets, np.random.default_rng(11))
    assert a.item() == b.item()


def test_loss_rejects_out_of_range_class(model, image):
    with pytest.raises(DetectorError):
        frcnn_loss(model, image, [], [(BBox(5, 5, 20, 22), 9)], np.random.default_rng(0))


def test_loss_gradcheck_micro_one_image():
    rng = np.random.default_rng(12)
    m = new_model(MICRO_CONFIG, 2, seed=13)
    image = micro_image(rng)
    targets = micro_targets(rng, 2)
    names = sorted(m.params)

    def f(*tensors):
        mm = DetectorModel(MICRO_CONFIG, 2, dict(zip(names, tensors)))
        return frcnn_loss(mm, image, [b for b, _ in targets], targets,
                          np.random.default_rng(99))

    err = ad.grad_check(f, [m.params[n].data for n in names], step=1e-5)
    assert err < 1e-4


# -- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.num_classes == model.num_classes
    assert back.config == model.config
    assert sorted(back.params) == sorted(model.params)
    for name in model.params:
        assert np.array_equal(back.params[name].data, model.params[name].data)
    assert checkpoint_bytes(back) == checkpoint_bytes(model)


def test_checkpoint_hash_tracks_parameters(model):
    h1 = checkpoint_hash(model)
    clone = model.clone()
    assert checkpoint_hash(clone) == h1
    clone.params["rcnn.cls.b"].data[0] += 1e-9
    assert checkpoint_hash(clone) != h1


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(DetectorError):
        load_checkpoint(p)
