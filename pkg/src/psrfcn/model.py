"""Full detector forward pass and inference on single images."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, NamedTuple

import numpy as np

from .detection import (
    Box,
    Detection,
    ProposalConfig,
    decode_box,
    flatten_anchor_maps,
    generate_anchors,
    nms,
    ps_roi_pool_batch,
    rpn_propose,
)
from .resnet import NetworkConfig, forward_backbone, rpn_heads, score_map_heads
from .tensor import Tensor, get_default_dtype, no_grad, softmax


@dataclass(frozen=True)
class DetectConfig:
    pre_nms: int = 200
    post_nms: int = 50
    rpn_nms: float = 0.7
    min_size: float = 2.0
    det_nms: float = 0.3
    score_thresh: float = 0.05
    max_detections: int = 20
    # head outputs are box deltas divided by these per-coordinate scales
    bbox_std: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)

    @property
    def proposals(self) -> ProposalConfig:
        return ProposalConfig(self.pre_nms, self.post_nms, self.rpn_nms, self.min_size)

    def scale_deltas(self, deltas: np.ndarray) -> np.ndarray:
        return np.asarray(deltas) * np.asarray(self.bbox_std)


class HeadOutputs(NamedTuple):
    feat: Tensor
    rpn_obj: Tensor
    rpn_reg: Tensor
    cls_maps: Tensor
    reg_maps: Tensor


def forward(
    images: Tensor,
    cfg: NetworkConfig,
    params: Mapping[str, Tensor],
    training: bool,
    rng: np.random.Generator | None = None,
) -> HeadOutputs:
    feat = forward_backbone(images, cfg, params, training, rng)
    obj, reg = rpn_heads(feat, params)
    cls_maps, reg_maps = score_map_heads(feat, cfg.ps_head, params)
    return HeadOutputs(feat, obj, reg, cls_maps, reg_maps)


@lru_cache(maxsize=16)
def _anchors(cfg: NetworkConfig, hf: int, wf: int) -> np.ndarray:
    a = generate_anchors(cfg.anchors, hf, wf, cfg.feature_stride)
    a.setflags(write=False)
    return a


def anchors_for(cfg: NetworkConfig, height: int, width: int) -> np.ndarray:
    st = cfg.feature_stride
    return _anchors(cfg, height // st, width // st)


def classify_rois(out: HeadOutputs, rois: np.ndarray, cfg: NetworkConfig) -> tuple[Tensor, Tensor]:
    """Class probabilities ``[R, C+1]`` and class-agnostic deltas ``[R, 4]`` for RoIs of image 0."""
    ps = cfg.ps_head
    pooled = ps_roi_pool_batch(out.cls_maps, rois, 0, ps.k, ps.num_classes + 1, ps.feature_stride)
    probs = softmax(pooled.mean(axis=(2, 3)))
    deltas = ps_roi_pool_batch(out.reg_maps, rois, 0, ps.k, 4, ps.feature_stride).mean(axis=(2, 3))
    return probs, deltas


def detect(
    image: np.ndarray,
    cfg: NetworkConfig,
    params: Mapping[str, Tensor],
    dcfg: DetectConfig,
    image_id: str = "",
) -> list[Detection]:
    """Run the detector in eval mode on one ``[3, H, W]`` image."""
    _, h, w = image.shape
    with no_grad():
        x = Tensor(image[None], dtype=get_default_dtype())
        out = forward(x, cfg, params, training=False)
        anchors = anchors_for(cfg, h, w)
        rois, _ = rpn_propose(out.rpn_obj, dcfg.scale_deltas(flatten_anchor_maps(out.rpn_reg.data, 4)), anchors, dcfg.proposals, (h, w))
        if len(rois) == 0:
            return []
        probs, deltas = classify_rois(out, rois, cfg)
    boxes = decode_box(rois, dcfg.scale_deltas(deltas.data), (h, w))
    probs = probs.data
    dets: list[Detection] = []
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    for c in range(1, cfg.num_classes + 1):
        cand = np.flatnonzero(ok & (probs[:, c] >= dcfg.score_thresh))
        if cand.size == 0:
            continue
        keep = cand[nms(boxes[cand], probs[cand, c], dcfg.det_nms)]
        dets.extend(Detection(Box(*map(float, boxes[i])), c, float(probs[i, c]), image_id) for i in keep)
    dets.sort(key=lambda d: -d.score)
    return dets[: dcfg.max_detections]
