"""Joint training of backbone, RPN and position-sensitive heads.

One image per step. The RPN and the RoI head each contribute a
cross-entropy term and a smooth-L1 box term; the four are summed and
minimised with momentum SGD.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .detection import encode_box, flatten_anchor_maps, iou_matrix, rpn_propose
from .errors import ContractError, DivergenceError, NonFiniteError
from .evaluation import DEFAULT_IOU, EvalResult, evaluate
from .model import DetectConfig, anchors_for, classify_rois, detect, forward
from .resnet import DropoutPlacement, NetworkConfig, Params, build_network, forward_backbone, is_trainable
from .synth import Scene
from .tensor import Tensor, backward, get_default_dtype, no_grad, smooth_l1, softmax

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 25
    seed: int = 0
    lr_decay: float = 0.1
    lr_decay_at: float = 2.0 / 3.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.epochs < 0 or self.seed < 0:
            raise ContractError("weight_decay, epochs and seed must be nonnegative")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; one step decay at ``lr_decay_at`` of the run."""
        boundary = math.ceil(self.epochs * self.lr_decay_at)
        return self.lr * (self.lr_decay if epoch > boundary else 1.0)


@dataclass(frozen=True)
class TrainConfig:
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64
    rpn_fg_fraction: float = 0.5
    rois_per_image: int = 32
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    loss_lambda: float = 1.0
    # training images used to re-estimate BN statistics before each evaluation; 0 disables
    bn_recalib_images: int = 64


class HeadLoss(NamedTuple):
    cls: Tensor
    reg: Tensor
    total: Tensor


@dataclass(frozen=True)
class LossReport:
    rpn_cls: float
    rpn_reg: float
    roi_cls: float
    roi_reg: float
    total: float

    @classmethod
    def from_heads(cls, rpn: HeadLoss, roi: HeadLoss) -> "LossReport":
        return cls(rpn.cls.item(), rpn.reg.item(), roi.cls.item(), roi.reg.item(), rpn.total.item() + roi.total.item())


def assign_rpn_targets(
    anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.7, neg_iou: float = 0.3
) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors 1 (object), 0 (background) or -1 (ignored) and encode box targets.

    An anchor is positive when its IoU with some box reaches ``pos_iou`` or
    when it is the first highest-IoU anchor of some box (IoU > 0). Box targets
    are taken against each anchor's best-IoU ground truth.
    """
    if pos_iou <= neg_iou:
        raise ContractError(f"pos_iou ({pos_iou}) must exceed neg_iou ({neg_iou})")
    n = anchors.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        labels[:] = 0
        return labels, targets
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n), best_gt]
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    for g in range(gt_boxes.shape[0]):
        a = int(ious[:, g].argmax())
        if ious[a, g] > 0:
            labels[a] = 1
    targets = encode_box(anchors, gt_boxes[best_gt])
    return labels, targets


def detection_loss(
    cls_probs: Tensor, cls_targets, reg_pred: Tensor, reg_targets, lam: float = 1.0
) -> HeadLoss:
    """Cross-entropy plus ``lam`` times smooth-L1 over positive samples.

    Class 0 is background; samples with a target above 0 are positives. The
    box term is summed over coordinates and divided by the positive count,
    and is zero when there are no positives.
    """
    if lam <= 0:
        raise ContractError(f"loss weight must be positive, got {lam}")
    t = np.asarray(cls_targets, dtype=np.int64)
    n = t.shape[0]
    if cls_probs.shape[0] != n or reg_pred.shape[0] != n:
        raise ContractError("predictions and targets disagree on sample count")
    cls = -(cls_probs[np.arange(n), t].log().mean())
    pos = np.flatnonzero(t > 0)
    if pos.size:
        diff = reg_pred[pos] - np.asarray(reg_targets, dtype=reg_pred.dtype)[pos]
        reg = smooth_l1(diff).sum() * (1.0 / pos.size)
    else:
        reg = Tensor(0.0)
    return HeadLoss(cls, reg, cls + reg * lam)


def sgd_step(
    params: Mapping[str, Tensor], state: dict[str, np.ndarray], opt: OptimConfig, lr: float | None = None
) -> None:
    """Momentum SGD in place: ``v = m*v + g + wd*p``, ``p -= lr*v``."""
    lr = opt.lr if lr is None else lr
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
        v = state.get(name)
        v = g + opt.weight_decay * p.data if v is None else opt.momentum * v + g + opt.weight_decay * p.data
        state[name] = v
        p.data -= lr * v


def _sample(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    if n >= pool.size:
        return pool
    return np.sort(rng.choice(pool, size=n, replace=False))


def scene_loss(
    scene: Scene,
    cfg: NetworkConfig,
    params: Mapping[str, Tensor],
    tcfg: TrainConfig,
    dcfg: DetectConfig,
    rng: np.random.Generator,
    training: bool = True,
) -> tuple[Tensor, LossReport]:
    """Forward one scene and return the summed training loss."""
    _, h, w = scene.image.shape
    img = Tensor(scene.image[None], dtype=get_default_dtype())
    out = forward(img, cfg, params, training, rng)
    gt = np.array([b for _, b in scene.annotations], dtype=np.float64).reshape(-1, 4)
    gt_cls = np.array([c for c, _ in scene.annotations], dtype=np.int64)

    anchors = anchors_for(cfg, h, w)
    labels, targets = assign_rpn_targets(anchors, gt, tcfg.rpn_pos_iou, tcfg.rpn_neg_iou)
    pos = _sample(rng, np.flatnonzero(labels == 1), int(tcfg.rpn_batch * tcfg.rpn_fg_fraction))
    neg = _sample(rng, np.flatnonzero(labels == 0), tcfg.rpn_batch - pos.size)
    idx = np.concatenate([pos, neg])
    obj = softmax(flatten_anchor_maps(out.rpn_obj, 2)[idx])
    rreg = flatten_anchor_maps(out.rpn_reg, 4)[idx]
    std = np.asarray(dcfg.bbox_std)
    rpn = detection_loss(obj, labels[idx], rreg, targets[idx] / std, tcfg.loss_lambda)

    rpn_deltas = dcfg.scale_deltas(flatten_anchor_maps(out.rpn_reg.data, 4))
    proposals, _ = rpn_propose(out.rpn_obj, rpn_deltas, anchors, dcfg.proposals, (h, w))
    rois = np.concatenate([proposals, gt]) if gt.size else proposals
    ious = iou_matrix(rois, gt) if gt.size else np.zeros((len(rois), 1))
    best = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)
    n_fg = int(round(tcfg.rois_per_image * tcfg.roi_fg_fraction))
    fg = _sample(rng, np.flatnonzero(best >= tcfg.roi_fg_iou), n_fg)
    bg = _sample(rng, np.flatnonzero(best < tcfg.roi_fg_iou), tcfg.rois_per_image - fg.size)
    sel = np.concatenate([fg, bg])
    sel_rois = rois[sel]
    roi_t = np.zeros(sel.size, dtype=np.int64)
    roi_reg_t = np.zeros((sel.size, 4))
    if fg.size:
        roi_t[: fg.size] = gt_cls[best_gt[fg]]
        roi_reg_t[: fg.size] = encode_box(rois[fg], gt[best_gt[fg]]) / std
    probs, deltas = classify_rois(out, sel_rois, cfg)
    roi = detection_loss(probs, roi_t, deltas, roi_reg_t, tcfg.loss_lambda)
    total = rpn.total + roi.total
    return total, LossReport.from_heads(rpn, roi)


def recalibrate_bn(params: Mapping[str, Tensor], cfg: NetworkConfig, scenes: Sequence[Scene]) -> None:
    """Replace BN running statistics with the statistics of one batch of ``scenes``.

    Dropout is switched off for this pass so that the statistics describe the
    activations seen at inference time.
    """
    if not scenes:
        return
    quiet = dataclasses.replace(cfg, dropout=DropoutPlacement.NONE, bn_momentum=1e-12)
    batch = Tensor(np.stack([s.image for s in scenes]), dtype=get_default_dtype())
    with no_grad():
        forward_backbone(batch, quiet, params, training=True)


def train_step(
    scene: Scene,
    cfg: NetworkConfig,
    params: Params,
    opt: OptimConfig,
    state: dict[str, np.ndarray],
    tcfg: TrainConfig,
    dcfg: DetectConfig,
    rng: np.random.Generator,
    lr: float,
) -> LossReport:
    for p in params.values():
        p.grad = None
    total, report = scene_loss(scene, cfg, params, tcfg, dcfg, rng)
    backward(total)
    sgd_step(params, state, opt, lr)
    return report


def detect_scenes(
    scenes: Sequence[Scene], cfg: NetworkConfig, params: Mapping[str, Tensor], dcfg: DetectConfig
) -> list:
    dets = []
    for s in scenes:
        dets.extend(detect(s.image, cfg, params, dcfg, s.image_id))
    return dets


def evaluate_scenes(
    scenes: Sequence[Scene],
    cfg: NetworkConfig,
    params: Mapping[str, Tensor],
    dcfg: DetectConfig,
    iou_thresh: float = DEFAULT_IOU,
) -> EvalResult:
    gt = {s.image_id: s.annotations for s in scenes}
    return evaluate(detect_scenes(scenes, cfg, params, dcfg), gt, cfg.num_classes, iou_thresh)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_map: float


@dataclass
class TrainResult:
    params: Params
    history: list[EpochRecord] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_val_map(self) -> float:
        return self.history[-1].val_map if self.history else float("nan")


def format_metrics(history: Sequence[EpochRecord]) -> str:
    return "".join(f"{r.epoch} {r.loss:.4f} {r.val_map:.4f}\n" for r in history)


def train(
    dataset: Mapping[str, Sequence[Scene]],
    net_cfg: NetworkConfig,
    opt: OptimConfig,
    out_dir=None,
    tcfg: TrainConfig = TrainConfig(),
    dcfg: DetectConfig = DetectConfig(),
    eval_iou: float = DEFAULT_IOU,
    progress: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train from scratch; writes ``model.psrd`` and ``metrics.txt`` into ``out_dir`` when given.

    The checkpoint is rewritten after every finished epoch, so a divergence
    leaves the last good one on disk.
    """
    train_set = list(dataset.get("train", ()))
    val_set = list(dataset.get("val", ()))
    if not train_set:
        raise ContractError("training split is empty")
    init_ss, shuffle_ss, step_ss = np.random.SeedSequence(opt.seed).spawn(3)
    params = build_network(net_cfg, np.random.Generator(np.random.PCG64(init_ss)))
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    step_rng = np.random.Generator(np.random.PCG64(step_ss))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out / "model.psrd")
        (out / "metrics.txt").write_text("", encoding="utf-8")
    result = TrainResult(params)
    state: dict[str, np.ndarray] = {}
    start = time.perf_counter()
    for epoch in range(1, opt.epochs + 1):
        lr = opt.lr_at(epoch)
        losses = []
        parts = []
        for i in shuffle_rng.permutation(len(train_set)):
            try:
                report = train_step(train_set[i], net_cfg, params, opt, state, tcfg, dcfg, step_rng, lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}, scene {train_set[i].image_id}: {exc}") from exc
            if not math.isfinite(report.total):
                raise DivergenceError(f"epoch {epoch}, scene {train_set[i].image_id}: loss is not finite")
            losses.append(report.total)
            parts.append((report.rpn_cls, report.rpn_reg, report.roi_cls, report.roi_reg))
        if tcfg.bn_recalib_images:
            recalibrate_bn(params, net_cfg, train_set[: tcfg.bn_recalib_images])
        val_map = evaluate_scenes(val_set, net_cfg, params, dcfg, eval_iou).mean_ap if val_set else float("nan")
        record = EpochRecord(epoch, float(np.mean(losses)), val_map)
        result.history.append(record)
        logger.info(
            "epoch %d loss %.4f (rpn %.3f/%.3f roi %.3f/%.3f) val_mAP %.4f lr %g",
            epoch, record.loss, *np.mean(parts, axis=0), val_map, lr,
        )
        if progress is not None:
            progress(record)
        if out is not None:
            save_checkpoint(params, out / "model.psrd")
            (out / "metrics.txt").write_text(format_metrics(result.history), encoding="utf-8")
    result.seconds = time.perf_counter() - start
    return result


def format_table(rows: Sequence[tuple[str, float]]) -> str:
    width = max([len("variant")] + [len(label) for label, _ in rows])
    lines = [f"{'variant':<{width}}  mAP"]
    lines.extend(f"{label:<{width}}  {value:.4f}" for label, value in rows)
    return "\n".join(lines) + "\n"


def ablation_sweep(
    variants: Sequence[tuple[str, NetworkConfig]],
    dataset: Mapping[str, Sequence[Scene]],
    opt: OptimConfig,
    out_dir=None,
    tcfg: TrainConfig = TrainConfig(),
    dcfg: DetectConfig = DetectConfig(),
    eval_iou: float = DEFAULT_IOU,
) -> list[tuple[str, float]]:
    """Train every variant with the same seed and optimiser; one (label, val mAP) row each."""
    if len(variants) < 2:
        raise ContractError("an ablation sweep needs at least two variants")
    rows = []
    for label, cfg in variants:
        res = train(dataset, cfg, opt, None, tcfg, dcfg, eval_iou)
        rows.append((label, res.final_val_map))
        logger.info("variant %s: val mAP %.4f", label, res.final_val_map)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(format_table(rows), encoding="utf-8")
    return rows


def trainable(params: Mapping[str, Tensor]) -> list[str]:
    return [n for n in params if is_trainable(n)]

