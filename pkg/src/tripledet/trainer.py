"""Triple-network training: frozen old model, trainable incremental and
residual models, joint optimization with SGD + momentum.

Determinism contract: every random draw of a run flows from one seeded
generator in a documented order — model-init draws first, then per epoch one
shuffle permutation, then per step the incremental model's RoI sampling
followed by the residual model's. Identical config + data + seed therefore
reproduce bit-identical checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .boxes import BBox
from .detector import (DetectorModel, forward_features, frcnn_loss, head_forward,
                       new_model, roi_pool)
from .distill import (FeatureTriple, LogitTriple, PooledTriple,
                      classification_distill_loss, feature_distill_loss,
                      residual_distill_loss)
from .pseudo_gt import PseudoGTSet, Thresholds, build_training_targets, generate_pseudo_gt
from .synthdata import Scene

SINGLE_THRESHOLD = 0.5


class TrainingError(RuntimeError):
    """Raised when a loss term leaves the finite range."""


@dataclass
class TripleNetwork:
    om: DetectorModel     # frozen
    im: DetectorModel
    rm: DetectorModel

    def __post_init__(self):
        num_new = self.rm.num_classes
        if self.im.num_classes != self.om.num_classes + num_new:
            raise ValueError(
                f"incremental model must cover {self.om.num_classes}+{num_new} classes, "
                f"got {self.im.num_classes}")


@dataclass
class TrainConfig:
    lam: float = 1.0                     # distillation weight in the total loss
    epochs: int = 10
    lr: float = 5e-4                     # decays by lr_decay halfway through
    lr_decay: float = 0.1                # applied from epoch epochs//2 on
    momentum: float = 0.9
    batch_size: int = 2
    seed: int = 0
    thresholds: Thresholds = field(default_factory=Thresholds)
    d_fea: bool = True
    d_res: bool = True
    d_cls: bool = True
    two_threshold: bool = True
    use_pseudo_gt: bool = True
    rm_distill_grad: bool = True         # stop-gradient into RM distill inputs when False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def effective_thresholds(self) -> Thresholds:
        if self.two_threshold:
            return self.thresholds
        return Thresholds(SINGLE_THRESHOLD, SINGLE_THRESHOLD, self.thresholds.theta_iou)


@dataclass
class BaseTrainConfig:
    epochs: int = 50
    lr: float = 2e-3
    lr_decay_every: int = 25
    lr_gamma: float = 0.1
    momentum: float = 0.9
    batch_size: int = 2
    seed: int = 0


@dataclass
class LossBreakdown:
    loss_im: float
    loss_rm: float
    feature_distill: float
    residual_distill: float
    cls_distill: float
    total: float

    FIELDS = ("loss_im", "loss_rm", "feature_distill", "residual_distill",
              "cls_distill", "total")

    def as_tuple(self):
        return (self.loss_im, self.loss_rm, self.feature_distill,
                self.residual_distill, self.cls_distill, self.total)


class SGDMomentum:
    """Plain SGD with momentum: v <- mu*v + g; p <- p - lr*v. No weight decay."""

    def __init__(self, params: dict[str, Tensor], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v


# -- model construction ----------------------------------------------------------

def init_incremental(om: DetectorModel, num_new: int, seed: int) -> DetectorModel:
    """Copy of the old model widened by num_new classes.

    Old class columns of the classification and delta heads are copied; new
    columns draw from Normal(0, 0.01^2) with zero bias. Draw order: new
    classification columns, then new delta columns.
    """
    if num_new < 1:
        raise ValueError(f"num_new must be >= 1, got {num_new}")
    rng = np.random.default_rng(seed)
    im = om.clone(requires_grad=True)
    fw = om.config.fc_width
    cls_w = im.params["rcnn.cls.w"].data
    new_cls = rng.normal(0.0, 0.01, (fw, num_new))
    im.params["rcnn.cls.w"] = Tensor(np.hstack([cls_w, new_cls]), requires_grad=True)
    im.params["rcnn.cls.b"] = Tensor(
        np.concatenate([im.params["rcnn.cls.b"].data, np.zeros(num_new)]), requires_grad=True)
    delta_w = im.params["rcnn.delta.w"].data
    new_delta = rng.normal(0.0, 0.01, (fw, num_new * 4))
    im.params["rcnn.delta.w"] = Tensor(np.hstack([delta_w, new_delta]), requires_grad=True)
    im.params["rcnn.delta.b"] = Tensor(
        np.concatenate([im.params["rcnn.delta.b"].data, np.zeros(num_new * 4)]),
        requires_grad=True)
    im.num_classes = om.num_classes + num_new
    im.seed = seed
    return im


def init_residual(om: DetectorModel, num_new: int, seed: int,
                  pretrained_backbone: bool = True) -> DetectorModel:
    """Assistant model over the new classes only.

    By default the backbone is copied from the old model (the only available
    pretrained feature extractor at this scale); with
    pretrained_backbone=False it stays at its random initialization.
    """
    if num_new < 1:
        raise ValueError(f"num_new must be >= 1, got {num_new}")
    rm = new_model(om.config, num_new, seed)
    if pretrained_backbone:
        for name in list(rm.params):
            if name.startswith("backbone."):
                rm.params[name] = Tensor(om.params[name].data.copy(), requires_grad=True)
    return rm


def restrict_to_old(im: DetectorModel, num_old: int) -> DetectorModel:
    """View of the incremental model with only background + old class heads."""
    out = im.clone(requires_grad=False)
    out.params["rcnn.cls.w"] = Tensor(im.params["rcnn.cls.w"].data[:, :num_old + 1].copy())
    out.params["rcnn.cls.b"] = Tensor(im.params["rcnn.cls.b"].data[:num_old + 1].copy())
    out.params["rcnn.delta.w"] = Tensor(im.params["rcnn.delta.w"].data[:, :num_old * 4].copy())
    out.params["rcnn.delta.b"] = Tensor(im.params["rcnn.delta.b"].data[:num_old * 4].copy())
    out.num_classes = num_old
    return out


def rm_local_targets(gt_new: list[tuple[BBox, int]], num_old: int) -> list[tuple[BBox, int]]:
    """Map global new-class ids (num_old+1..) onto the residual model's 1..Cb."""
    return [(b, cid - num_old) for b, cid in gt_new]


# -- loss assembly ----------------------------------------------------------------

def compute_losses(triple: TripleNetwork, image, gt_new: list[tuple[BBox, int]],
                   cfg: TrainConfig, rng: np.random.Generator,
                   pseudo: list | None = None,
                   om_features: np.ndarray | None = None,
                   im_candidates: np.ndarray | None = None,
                   rm_candidates: np.ndarray | None = None) -> tuple[Tensor, LossBreakdown]:
    """Total loss tensor and its per-term breakdown for one image.

    Disabled terms contribute exactly zero. `pseudo` may carry precomputed
    surviving old-model detections (they depend only on the frozen old model,
    the image, and the thresholds); `om_features` may carry the old model's
    cached backbone features. `im_candidates`/`rm_candidates` pin the RoI
    candidate pools for gradient checking.
    """
    om, im, rm = triple.om, triple.im, triple.rm
    th = cfg.effective_thresholds()
    num_old = om.num_classes

    if cfg.use_pseudo_gt:
        if pseudo is None:
            pseudo = generate_pseudo_gt(om, image, [b for b, _ in gt_new], th)
        targets = build_training_targets(pseudo, gt_new, th)
    else:
        targets = PseudoGTSet(boxes_p=[],
                              rpn_targets=[b for b, _ in gt_new],
                              rcnn_targets=list(gt_new))

    f_im = forward_features(im, image)
    loss_im, internals = frcnn_loss(im, image, targets.rpn_targets, targets.rcnn_targets,
                                    rng, features=f_im, return_internals=True,
                                    candidate_rois=im_candidates)

    f_rm = forward_features(rm, image)
    gt_rm = rm_local_targets(gt_new, num_old)
    loss_rm = frcnn_loss(rm, image, [b for b, _ in gt_rm], gt_rm, rng, features=f_rm,
                         candidate_rois=rm_candidates)

    distill_on = cfg.d_fea or cfg.d_res or cfg.d_cls
    d_fea_t = d_res_t = d_cls_t = None
    if distill_on:
        if om_features is not None:
            f_om = Tensor(om_features)
        else:
            f_om = forward_features(om, image)
        f_rm_d = f_rm if cfg.rm_distill_grad else f_rm.detach()
        feat = FeatureTriple(f_om, f_im, f_rm_d)
        if cfg.d_fea:
            d_fea_t = feature_distill_loss(feat)
        if cfg.d_res or cfg.d_cls:
            rois = internals.rois
            p_om = roi_pool(f_om, rois, om.config.pool_size, om.config.stride)
            p_rm = roi_pool(f_rm_d, rois, rm.config.pool_size, rm.config.stride)
            if cfg.d_res:
                d_res_t = residual_distill_loss(feat, PooledTriple(p_om, internals.pooled, p_rm))
            if cfg.d_cls:
                om_logits, _ = head_forward(om, p_om)
                rm_logits, _ = head_forward(rm, p_rm)
                if not cfg.rm_distill_grad:
                    rm_logits = rm_logits.detach()
                d_cls_t = classification_distill_loss(
                    LogitTriple(om_logits, internals.cls_logits, rm_logits))

    total = loss_im + loss_rm
    active = [t for t in (d_fea_t, d_res_t, d_cls_t) if t is not None]
    if active:
        distill_sum = active[0]
        for t in active[1:]:
            distill_sum = distill_sum + t
        total = total + Tensor(cfg.lam) * distill_sum

    breakdown = LossBreakdown(
        loss_im=loss_im.item(),
        loss_rm=loss_rm.item(),
        feature_distill=d_fea_t.item() if d_fea_t is not None else 0.0,
        residual_distill=d_res_t.item() if d_res_t is not None else 0.0,
        cls_distill=d_cls_t.item() if d_cls_t is not None else 0.0,
        total=total.item(),
    )
    for name, value in zip(LossBreakdown.FIELDS, breakdown.as_tuple()):
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss term {name!r}: {value}")
    return total, breakdown


def train_step(triple: TripleNetwork, image, gt_new: list[tuple[BBox, int]],
               cfg: TrainConfig, rng: np.random.Generator,
               opt_im: SGDMomentum, opt_rm: SGDMomentum, lr: float,
               pseudo: list | None = None,
               om_features: np.ndarray | None = None) -> LossBreakdown:
    """One SGD update of the incremental and residual models; the old model
    is untouched."""
    total, breakdown = compute_losses(triple, image, gt_new, cfg, rng,
                                      pseudo=pseudo, om_features=om_features)
    total.backward()
    opt_im.step(lr)
    opt_rm.step(lr)
    return breakdown


@dataclass
class EpochStats:
    epoch: int
    losses: LossBreakdown
    map_old: float = float("nan")
    map_new: float = float("nan")
    map_all: float = float("nan")


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    arr = np.array([b.as_tuple() for b in items])
    return LossBreakdown(*arr.mean(axis=0))


def write_epoch_log(path, log: list[EpochStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", *LossBreakdown.FIELDS, "map_old", "map_new", "map_all"])
        for e in log:
            writer.writerow([e.epoch, *e.losses.as_tuple(), e.map_old, e.map_new, e.map_all])


def train_incremental(triple: TripleNetwork, scenes: list[Scene], cfg: TrainConfig,
                      eval_fn=None) -> list[EpochStats]:
    """Train the incremental and residual models on new-class scenes.

    `eval_fn(im_model) -> (map_old, map_new, map_all)` runs after each epoch
    when provided. Pseudo ground truth and old-model features depend only on
    frozen state, so they are precomputed once per scene.
    """
    if not scenes:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    om = triple.om
    th = cfg.effective_thresholds()
    pseudo_cache = []
    om_feat_cache = []
    if cfg.use_pseudo_gt or cfg.d_fea or cfg.d_res or cfg.d_cls:
        for scene in scenes:
            om_feat_cache.append(forward_features(om, scene.image).data)
            pseudo_cache.append(
                generate_pseudo_gt(om, scene.image, [b for b, _ in scene.annotations], th)
                if cfg.use_pseudo_gt else [])
    else:
        pseudo_cache = [[] for _ in scenes]
        om_feat_cache = [None for _ in scenes]

    opt_im = SGDMomentum(triple.im.trainable(), cfg.momentum)
    opt_rm = SGDMomentum(triple.rm.trainable(), cfg.momentum)
    log: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (cfg.lr_decay if epoch >= cfg.epochs // 2 else 1.0)
        order = rng.permutation(len(scenes))
        epoch_losses: list[LossBreakdown] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            total = None
            parts = []
            for idx in batch:
                scene = scenes[idx]
                t, breakdown = compute_losses(
                    triple, scene.image, scene.annotations, cfg, rng,
                    pseudo=pseudo_cache[idx], om_features=om_feat_cache[idx])
                parts.append(breakdown)
                total = t if total is None else total + t
            total = total * Tensor(1.0 / len(batch))
            total.backward()
            opt_im.step(lr)
            opt_rm.step(lr)
            epoch_losses.append(_mean_breakdown(parts))
        stats = EpochStats(epoch=epoch, losses=_mean_breakdown(epoch_losses))
        if eval_fn is not None:
            stats.map_old, stats.map_new, stats.map_all = eval_fn(triple.im)
        log.append(stats)
    return log


def train_base(model: DetectorModel, scenes: list[Scene], cfg: BaseTrainConfig,
               eval_fn=None) -> list[EpochStats]:
    """Train a single detector on fully annotated scenes."""
    if not scenes:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = SGDMomentum(model.trainable(), cfg.momentum)
    log: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (cfg.lr_gamma ** (epoch // cfg.lr_decay_every))
        order = rng.permutation(len(scenes))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            total = None
            vals = []
            for idx in batch:
                scene = scenes[idx]
                boxes = [b for b, _ in scene.annotations]
                t = frcnn_loss(model, scene.image, boxes, scene.annotations, rng)
                vals.append(t.item())
                total = t if total is None else total + t
            total = total * Tensor(1.0 / len(batch))
            loss_val = total.item()
            if not np.isfinite(loss_val):
                raise TrainingError(f"non-finite loss {loss_val} at epoch {epoch}")
            total.backward()
            opt.step(lr)
            epoch_losses.append(loss_val)
        mean_loss = float(np.mean(epoch_losses))
        stats = EpochStats(epoch=epoch,
                           losses=LossBreakdown(mean_loss, 0.0, 0.0, 0.0, 0.0, mean_loss))
        if eval_fn is not None:
            stats.map_old, stats.map_new, stats.map_all = eval_fn(model)
        log.append(stats)
    return log


def finetune_config(cfg: TrainConfig) -> TrainConfig:
    """The plain finetuning baseline: no pseudo ground truth, no distillation."""
    return replace(cfg, d_fea=False, d_res=False, d_cls=False,
                   two_threshold=False, use_pseudo_gt=False)
