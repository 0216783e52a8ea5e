"""Box geometry, anchors, proposals and position-sensitive RoI pooling.

Boxes are ``(x1, y1, x2, y2)`` in image pixels. Vectorised helpers take
``(..., 4)`` float arrays; the :class:`Box` tuple is the scalar form used in
annotations and detections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, GeometryError, ParseError
from .tensor import Tensor, _result, softmax

# Largest log-scale delta accepted by decode_box (a 1000/16 size ratio).
MAX_LOG_DELTA = math.log(1000.0 / 16)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def is_valid(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2


@dataclass(frozen=True)
class RoI:
    box: Box
    batch_index: int = 0


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    image_id: str = ""


@dataclass(frozen=True)
class PSHeadConfig:
    """Position-sensitive head layout: ``k*k*(C+1)`` class maps, ``4*k*k`` box maps."""

    k: int = 3
    num_classes: int = 3
    feature_stride: int = 8

    def __post_init__(self):
        if self.k < 1 or self.num_classes < 1 or self.feature_stride < 1:
            raise GeometryError(f"invalid PSHeadConfig {self}")

    @property
    def cls_channels(self) -> int:
        return self.k * self.k * (self.num_classes + 1)

    @property
    def reg_channels(self) -> int:
        return 4 * self.k * self.k


@dataclass(frozen=True)
class AnchorSpec:
    base_sizes: tuple[float, ...] = (10.0, 16.0, 22.0)
    aspect_ratios: tuple[float, ...] = (1.0,)

    @property
    def per_location(self) -> int:
        return len(self.base_sizes) * len(self.aspect_ratios)


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms: int = 200
    post_nms: int = 50
    nms_thresh: float = 0.7
    min_size: float = 2.0


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.shape[-1] != 4:
        raise DimensionError(f"boxes need a trailing axis of 4, got {arr.shape}")
    return arr


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between ``a[N,4]`` and ``b[M,4]``."""
    a = as_boxes(a).reshape(-1, 4)
    b = as_boxes(b).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def generate_anchors(spec: AnchorSpec, hf: int, wf: int, stride: int) -> np.ndarray:
    """Anchors for every feature cell, row-major over cells then ratio-major.

    Returns an ``(hf*wf*A, 4)`` array with ``A = len(ratios) * len(sizes)``.
    """
    if hf < 1 or wf < 1:
        raise GeometryError(f"anchor grid must be at least 1x1, got {hf}x{wf}")
    shapes = []
    for r in spec.aspect_ratios:
        for s in spec.base_sizes:
            shapes.append((s * math.sqrt(r), s / math.sqrt(r)))
    wh = np.array(shapes, dtype=np.float64)
    cy, cx = np.meshgrid((np.arange(hf) + 0.5) * stride, (np.arange(wf) + 0.5) * stride, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    c = centers[:, None, :]
    half = wh[None, :, :] / 2
    return np.concatenate([c - half, c + half], axis=2).reshape(-1, 4)


def _center_size(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_box(anchor, gt) -> np.ndarray:
    """Centre/log-size deltas ``(tx, ty, tw, th)`` taking ``anchor`` to ``gt``."""
    anchor = as_boxes(anchor)
    gt = as_boxes(gt)
    ax, ay, aw, ah = _center_size(anchor)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("encode_box: anchor must have positive width and height")
    gx, gy, gw, gh = _center_size(gt)
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise GeometryError("encode_box: target box must have positive width and height")
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_box(anchor, delta, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse of :func:`encode_box`, optionally clipped to ``(height, width)``."""
    anchor = as_boxes(anchor)
    delta = np.asarray(delta, dtype=np.float64)
    ax, ay, aw, ah = _center_size(anchor)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("decode_box: anchor must have positive width and height")
    cx = ax + delta[..., 0] * aw
    cy = ay + delta[..., 1] * ah
    w = aw * np.exp(np.minimum(delta[..., 2], MAX_LOG_DELTA))
    h = ah * np.exp(np.minimum(delta[..., 3], MAX_LOG_DELTA))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes, image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 0::2] = np.clip(out[..., 0::2], 0, w)
    out[..., 1::2] = np.clip(out[..., 1::2], 0, h)
    return out


def nms(boxes, scores, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns kept indices in descending score order; equal scores keep the
    lower original index first.
    """
    boxes = as_boxes(boxes).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise GeometryError("nms: scores must be finite")
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ov = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= iou_thresh]
    return np.array(keep, dtype=np.int64)


def flatten_anchor_maps(maps, per_anchor: int) -> np.ndarray | Tensor:
    """Reshape ``[1, A*d, Hf, Wf]`` head output to ``[Hf*Wf*A, d]`` in anchor order."""
    shape = maps.shape
    if len(shape) == 3:
        shape = (1,) + tuple(shape)
        maps = maps.reshape(shape)
    n, ch, hf, wf = shape
    if n != 1 or ch % per_anchor:
        raise DimensionError(f"cannot split {shape} into per-anchor groups of {per_anchor}")
    a = ch // per_anchor
    if isinstance(maps, Tensor):
        return maps.reshape(a, per_anchor, hf, wf).transpose(2, 3, 0, 1).reshape(hf * wf * a, per_anchor)
    return np.asarray(maps).reshape(a, per_anchor, hf, wf).transpose(2, 3, 0, 1).reshape(hf * wf * a, per_anchor)


def rpn_propose(
    objectness,
    reg,
    anchors: np.ndarray,
    cfg: ProposalConfig,
    image_size: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Turn RPN outputs for one image into proposal boxes and foreground scores.

    ``objectness`` holds (bg, fg) logits per anchor, ``reg`` four deltas per
    anchor, either as raw head maps or already flattened in anchor order.
    """
    obj = objectness.data if isinstance(objectness, Tensor) else np.asarray(objectness)
    deltas = reg.data if isinstance(reg, Tensor) else np.asarray(reg)
    if obj.ndim != 2:
        obj = flatten_anchor_maps(obj, 2)
    if deltas.ndim != 2:
        deltas = flatten_anchor_maps(deltas, 4)
    if obj.shape[0] != anchors.shape[0] or deltas.shape[0] != anchors.shape[0]:
        raise DimensionError(
            f"rpn_propose: {obj.shape[0]} objectness rows, {deltas.shape[0]} reg rows, {anchors.shape[0]} anchors"
        )
    z = obj - obj.max(axis=1, keepdims=True)
    e = np.exp(z)
    fg = e[:, 1] / e.sum(axis=1)
    boxes = decode_box(anchors, deltas, image_size)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    ok = np.flatnonzero((w >= cfg.min_size) & (h >= cfg.min_size))
    order = ok[np.argsort(-fg[ok], kind="stable")][: cfg.pre_nms]
    keep = nms(boxes[order], fg[order], cfg.nms_thresh)[: cfg.post_nms]
    sel = order[keep]
    return boxes[sel], fg[sel]


# position-sensitive pooling


def bin_weights(rois_feat: np.ndarray, k: int, hf: int, wf: int) -> np.ndarray:
    """Averaging weights ``[R, k*k, hf*wf]`` for a k x k grid over each RoI.

    ``rois_feat`` is in feature-map units. Cell ``(y, x)`` belongs to bin
    ``(i, j)`` when its centre lies in the bin's half-open interval on both
    axes; an empty bin has all-zero weights.
    """
    r = rois_feat.shape[0]
    steps = np.arange(k + 1, dtype=np.float64) / k
    x1, y1, x2, y2 = (rois_feat[:, i : i + 1] for i in range(4))
    bx = x1 + (x2 - x1) * steps[None, :]
    by = y1 + (y2 - y1) * steps[None, :]
    # exact outer edges; x1 + (x2 - x1) can differ from x2 in the last ulp
    bx[:, -1:] = x2
    by[:, -1:] = y2
    cx = np.arange(wf, dtype=np.float64) + 0.5
    cy = np.arange(hf, dtype=np.float64) + 0.5
    mx = (bx[:, :-1, None] <= cx) & (cx < bx[:, 1:, None])
    my = (by[:, :-1, None] <= cy) & (cy < by[:, 1:, None])
    mask = my[:, :, None, :, None] & mx[:, None, :, None, :]
    mask = mask.reshape(r, k * k, hf * wf).astype(np.float64)
    count = mask.sum(axis=2, keepdims=True)
    return np.divide(mask, count, out=np.zeros_like(mask), where=count > 0)


def ps_roi_pool_batch(maps: Tensor, rois, batch_index, k: int, groups: int, stride: int) -> Tensor:
    """Pool ``maps[N, k*k*groups, Hf, Wf]`` into ``[R, groups, k, k]``.

    Bin ``(i, j)`` of output group ``g`` reads only channel
    ``(i*k + j)*groups + g``.
    """
    if maps.ndim != 4:
        raise DimensionError(f"score maps must be 4-d, got {maps.shape}")
    n, ch, hf, wf = maps.shape
    if ch != k * k * groups:
        raise DimensionError(f"score maps have {ch} channels, expected k*k*groups = {k * k * groups}")
    rois = as_boxes(rois).reshape(-1, 4)
    bidx = np.broadcast_to(np.asarray(batch_index, dtype=np.int64), (rois.shape[0],))
    if np.any(bidx < 0) or np.any(bidx >= n):
        raise GeometryError(f"RoI batch index out of range for N={n}")
    weights = bin_weights(rois / stride, k, hf, wf)
    m = maps.data.reshape(n, k * k, groups, hf * wf)
    out = np.empty((rois.shape[0], groups, k * k), dtype=maps.dtype)
    for b in np.unique(bidx):
        sel = np.flatnonzero(bidx == b)
        out[sel] = np.einsum("rbp,bgp->rgb", weights[sel], m[b])

    def fn(g):
        g = g.reshape(rois.shape[0], groups, k * k)
        gm = np.zeros_like(m)
        for b in np.unique(bidx):
            sel = np.flatnonzero(bidx == b)
            gm[b] = np.einsum("rgb,rbp->bgp", g[sel], weights[sel])
        return (gm.reshape(maps.shape),)

    return _result(out.reshape(rois.shape[0], groups, k, k), (maps,), fn, "ps_roi_pool")


def _check_roi_inside(roi: RoI, ps: PSHeadConfig, hf: int, wf: int) -> None:
    x1, y1, x2, y2 = (v / ps.feature_stride for v in roi.box)
    if x2 <= 0 or y2 <= 0 or x1 >= wf or y1 >= hf:
        raise GeometryError(f"RoI {tuple(roi.box)} lies entirely outside the {hf}x{wf} feature map")


def ps_roi_pool(cls_maps: Tensor, roi: RoI, ps: PSHeadConfig) -> Tensor:
    """Position-sensitive average pooling of one RoI into ``[C+1, k, k]``."""
    _check_roi_inside(roi, ps, cls_maps.shape[2], cls_maps.shape[3])
    out = ps_roi_pool_batch(cls_maps, [roi.box], [roi.batch_index], ps.k, ps.num_classes + 1, ps.feature_stride)
    return out.reshape(ps.num_classes + 1, ps.k, ps.k)


def ps_vote_classify(pooled: Tensor) -> Tensor:
    """Average the k x k bins per class, then softmax over classes.

    Accepts ``[C+1, k, k]`` or a batch ``[R, C+1, k, k]``.
    """
    return softmax(pooled.mean(axis=(-2, -1)))


def ps_roi_pool_reg(reg_maps: Tensor, roi: RoI, ps: PSHeadConfig) -> Tensor:
    """Class-agnostic box deltas for one RoI, average-voted over the grid."""
    _check_roi_inside(roi, ps, reg_maps.shape[2], reg_maps.shape[3])
    pooled = ps_roi_pool_batch(reg_maps, [roi.box], [roi.batch_index], ps.k, 4, ps.feature_stride)
    return pooled.mean(axis=(-2, -1)).reshape(4)


# detection text format: image_id class_id score x1 y1 x2 y2


def format_detection(det: Detection) -> str:
    x1, y1, x2, y2 = det.box
    return f"{det.image_id} {det.class_id} {det.score:.6g} {x1:.6g} {y1:.6g} {x2:.6g} {y2:.6g}"


def write_detections(path, detections: Iterable[Detection]) -> None:
    lines = [format_detection(d) for d in detections]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def parse_detections(lines: Sequence[str], path=None) -> list[Detection]:
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ParseError(f"expected 7 fields, got {len(parts)}", path, lineno)
        try:
            box = Box(*(float(v) for v in parts[3:]))
            out.append(Detection(box, int(parts[1]), float(parts[2]), parts[0]))
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return out


def read_detections(path) -> list[Detection]:
    return parse_detections(Path(path).read_text(encoding="utf-8").splitlines(), path)
