"""Finite-difference verification of every loss in the package.

Each entry builds random instances (seeded, away from non-smooth points with
overwhelming probability at the chosen scales) and compares analytic
gradients against central differences via ``autodiff.grad_check``. The
detection and total losses are checked through a miniature model
configuration so the full parameter set stays small enough to probe
coordinate by coordinate.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, grad_check, topo_order
from .boxes import BBox
from .detector import (DetectorConfig, DetectorModel, forward_features, frcnn_loss,
                       new_model, roi_candidates)
from .distill import (FeatureTriple, LogitTriple, PooledTriple, attention_pair_loss,
                      classification_distill_loss, feature_distill_loss,
                      residual_base_loss, residual_pool_loss)
from .pseudo_gt import Thresholds, build_training_targets, generate_pseudo_gt
from .trainer import (TrainConfig, TripleNetwork, compute_losses, init_incremental,
                      init_residual, rm_local_targets)

MICRO_CONFIG = DetectorConfig(
    image_size=16,
    channels=(2, 2, 2),
    rpn_channels=2,
    anchor_sides=(6.0, 10.0),
    pool_size=2,
    fc_width=4,
    num_proposals=8,
)

GRAD_TOL = 1e-4
FD_STEP = 1e-5
# elementwise losses keep a wide berth; through a whole network only
# crossings within reach of the probe step matter, so 10x the step suffices
ELEMENTWISE_MARGIN = 1e-3
NETWORK_MARGIN = 10 * FD_STEP


def nonsmooth_margin(root: Tensor) -> float:
    """Distance of the computation from its nearest non-smooth point.

    Walks the graph and measures how close any relu or abs input is to zero
    and how close any max-pool window is to a tie. Exact zeros are ignored:
    in these graphs they are structurally pinned (relu-clamped cells and
    differences of such cells stay exactly zero under small parameter
    perturbations, provided biases are away from zero, which the margin on
    the nonzero values enforces). smooth-L1 is C1 and needs no margin.
    """
    worst = np.inf
    for node in topo_order(root):
        if not node.parents:
            continue
        x = node.parents[0].data
        if node.op in ("relu", "abs") and x.size:
            nonzero = np.abs(x[x != 0.0])
            if nonzero.size:
                worst = min(worst, nonzero.min())
        elif node.op == "max_pool2":
            c, h, w = x.shape
            win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(-1, 4)
            top2 = np.sort(win, axis=1)[:, -2:]
            live = top2[:, 1] != 0.0       # max of an all-clamped window cannot move
            if live.any():
                worst = min(worst, (top2[live, 1] - top2[live, 0]).min())
    return float(worst)


def _draw_safe_instance(rng: np.random.Generator, build, margin: float,
                        attempts: int = 50):
    """Rejection-sample an instance whose base-point margin is comfortable.

    `build(rng)` returns (f, points); f(*tensors) is the loss. Instances too
    close to a relu/abs/max-pool boundary are redrawn.
    """
    for _ in range(attempts):
        f, points = build(rng)
        loss = f(*[Tensor(p, requires_grad=True) for p in points])
        if nonsmooth_margin(loss) > margin:
            return f, points
    raise RuntimeError("could not find an instance away from non-smooth points")


def micro_image(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, (3, MICRO_CONFIG.image_size, MICRO_CONFIG.image_size))


def micro_targets(rng: np.random.Generator, num_classes: int, n: int = 2,
                  lo: int = 1) -> list[tuple[BBox, int]]:
    out = []
    size = MICRO_CONFIG.image_size
    for _ in range(n):
        w = rng.uniform(4.0, 9.0)
        h = rng.uniform(4.0, 9.0)
        x1 = rng.uniform(0.0, size - w)
        y1 = rng.uniform(0.0, size - h)
        out.append((BBox(x1, y1, x1 + w, y1 + h), int(rng.integers(lo, num_classes + 1))))
    return out


def _build_attention_pair(rng: np.random.Generator):
    ma = rng.normal(0.0, 1.0, (3, 4))
    mb = rng.normal(0.0, 1.0, (3, 4))
    return (lambda a, b: attention_pair_loss(a, b)), [ma, mb]


def _build_feature_distill(rng: np.random.Generator):
    ts = [rng.normal(0.0, 1.0, (2, 4, 4)) for _ in range(3)]
    return (lambda o, i, r: feature_distill_loss(FeatureTriple(o, i, r))), ts


def _build_residual_base(rng: np.random.Generator):
    ts = [rng.normal(0.0, 1.0, (2, 4, 4)) for _ in range(3)]
    return (lambda o, i, r: residual_base_loss(FeatureTriple(o, i, r))), ts


def _build_residual_pool(rng: np.random.Generator):
    ts = [rng.normal(0.0, 1.0, (2, 2, 2, 2)) for _ in range(3)]
    return (lambda o, i, r: residual_pool_loss(PooledTriple(o, i, r))), ts


def _build_cls_distill(rng: np.random.Generator):
    n, ca, cb = 3, 2, 2
    om = rng.normal(0.0, 1.0, (n, ca + 1))
    im = rng.normal(0.0, 1.0, (n, ca + cb + 1))
    rm = rng.normal(0.0, 1.0, (n, cb + 1))
    return (lambda o, y, r: classification_distill_loss(LogitTriple(o, y, r))), [om, im, rm]


def _model_param_arrays(model: DetectorModel) -> tuple[list[str], list[np.ndarray]]:
    names = sorted(model.params)
    return names, [model.params[n].data.copy() for n in names]


def _build_frcnn(rng: np.random.Generator):
    num_classes = 2
    model = new_model(MICRO_CONFIG, num_classes, int(rng.integers(0, 2 ** 31)))
    # nudge every parameter (biases included) so no relu input sits exactly
    # on its kink
    for p in model.params.values():
        p.data += rng.normal(0.0, 0.02, p.shape)
    image = micro_image(rng)
    targets = micro_targets(rng, num_classes)
    boxes = [b for b, _ in targets]
    names, arrays = _model_param_arrays(model)
    sample_seed = int(rng.integers(0, 2 ** 31))
    # pin the RoI candidate pool at the base point: proposal selection is
    # piecewise constant in the parameters, so this is the a.e. gradient
    candidates = roi_candidates(model, forward_features(model, image), targets)

    def f(*tensors):
        m = DetectorModel(MICRO_CONFIG, num_classes, dict(zip(names, tensors)))
        return frcnn_loss(m, image, boxes, targets, np.random.default_rng(sample_seed),
                          candidate_rois=candidates)

    return f, arrays


def micro_triple(rng: np.random.Generator) -> TripleNetwork:
    num_old, num_new = 1, 1
    om = new_model(MICRO_CONFIG, num_old, int(rng.integers(0, 2 ** 31)))
    # a short random walk so the frozen model is not at its raw initialization
    for p in om.params.values():
        p.data += rng.normal(0.0, 0.02, p.shape)
    om.freeze()
    im = init_incremental(om, num_new, int(rng.integers(0, 2 ** 31)))
    for p in im.params.values():
        p.data += rng.normal(0.0, 0.02, p.shape)
    rm = init_residual(om, num_new, int(rng.integers(0, 2 ** 31)))
    for p in rm.params.values():
        p.data += rng.normal(0.0, 0.02, p.shape)
    return TripleNetwork(om=om, im=im, rm=rm)


def _build_total_loss(rng: np.random.Generator):
    triple = micro_triple(rng)
    cfg = TrainConfig(epochs=1, thresholds=Thresholds(0.1, 0.9, 0.3))
    image = micro_image(rng)
    gt_new = micro_targets(rng, triple.im.num_classes, n=1, lo=triple.om.num_classes + 1)
    th = cfg.effective_thresholds()
    pseudo = generate_pseudo_gt(triple.om, image, [b for b, _ in gt_new], th)
    om_feat = forward_features(triple.om, image).data
    im_names, im_arrays = _model_param_arrays(triple.im)
    rm_names, rm_arrays = _model_param_arrays(triple.rm)
    sample_seed = int(rng.integers(0, 2 ** 31))
    # pin both candidate pools at the base point (see _build_frcnn)
    im_targets = build_training_targets(pseudo, gt_new, th).rcnn_targets
    cand_im = roi_candidates(triple.im, forward_features(triple.im, image), im_targets)
    gt_rm = rm_local_targets(gt_new, triple.om.num_classes)
    cand_rm = roi_candidates(triple.rm, forward_features(triple.rm, image), gt_rm)

    def f(*tensors):
        im_t = tensors[:len(im_names)]
        rm_t = tensors[len(im_names):]
        trip = TripleNetwork(
            om=triple.om,
            im=DetectorModel(MICRO_CONFIG, triple.im.num_classes, dict(zip(im_names, im_t))),
            rm=DetectorModel(MICRO_CONFIG, triple.rm.num_classes, dict(zip(rm_names, rm_t))),
        )
        total, _ = compute_losses(trip, image, gt_new, cfg,
                                  np.random.default_rng(sample_seed),
                                  pseudo=pseudo, om_features=om_feat,
                                  im_candidates=cand_im, rm_candidates=cand_rm)
        return total

    return f, im_arrays + rm_arrays


SUITE = {
    "attention_pair_loss": (_build_attention_pair, ELEMENTWISE_MARGIN),
    "feature_distill": (_build_feature_distill, ELEMENTWISE_MARGIN),
    "residual_distill_base": (_build_residual_base, ELEMENTWISE_MARGIN),
    "residual_distill_pool": (_build_residual_pool, ELEMENTWISE_MARGIN),
    "cls_distill": (_build_cls_distill, ELEMENTWISE_MARGIN),
    "frcnn_loss": (_build_frcnn, NETWORK_MARGIN),
    "total_loss": (_build_total_loss, NETWORK_MARGIN),
}


def check_loss_gradient(name: str, rng: np.random.Generator) -> float:
    """One margin-safe random instance of the named loss, grad-checked."""
    build, margin = SUITE[name]
    f, points = _draw_safe_instance(rng, build, margin)
    return grad_check(f, points, FD_STEP)


def run_gradient_suite(instances: int = 10, seed: int = 20240) -> dict[str, float]:
    """Max relative gradient error per loss over `instances` random cases."""
    results = {}
    for k, name in enumerate(SUITE):
        rng = np.random.default_rng([seed, k])
        results[name] = max(check_loss_gradient(name, rng) for _ in range(instances))
    return results
