"""Small residual backbone with the compared block and dropout variants.

Parameters live in a flat ``dict`` keyed by slash-separated layer paths
(``stage1/block0/conv1/w``), the same names the checkpoint file uses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .detection import AnchorSpec, PSHeadConfig
from .errors import ConfigError, DimensionError
from .tensor import BN_MOMENTUM, BNParams, Tensor, batch_norm, conv2d, dropout, get_default_dtype, max_pool2d, relu

Params = dict[str, Tensor]

RUNNING_SUFFIXES = ("running_mean", "running_var")


class BlockVariant(enum.Enum):
    ORIGINAL = "ORIGINAL"
    BN_AFTER_ADD = "BN_AFTER_ADD"
    NO_SECOND_RELU = "NO_SECOND_RELU"


class DropoutPlacement(enum.Enum):
    NONE = "NONE"
    AFTER_FIRST_POOL = "AFTER_FIRST_POOL"
    INSIDE_BLOCK = "INSIDE_BLOCK"


@dataclass(frozen=True)
class NetworkConfig:
    """Wiring plan for the backbone and its detection heads.

    ``stages`` is a sequence of ``(blocks, width, stride)`` triples.
    """

    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    pool_window: int = 2
    pool_stride: int = 2
    stages: tuple[tuple[int, int, int], ...] = ((2, 16, 1), (2, 24, 1), (2, 32, 1))
    block_variant: BlockVariant = BlockVariant.ORIGINAL
    dropout: DropoutPlacement = DropoutPlacement.AFTER_FIRST_POOL
    dropout_rate: float = 0.5
    head_reduce_channels: int = 64
    bn_momentum: float = BN_MOMENTUM
    rpn_channels: int = 64
    k: int = 3
    num_classes: int = 3
    anchors: AnchorSpec = field(default_factory=AnchorSpec)

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("network needs at least one stage")
        widths = [w for _, w, _ in self.stages]
        if any(b < 1 for b, _, _ in self.stages):
            raise ConfigError("every stage needs at least one block")
        if widths != sorted(widths):
            raise ConfigError(f"stage widths must be nondecreasing, got {widths}")
        if any(s not in (1, 2) for _, _, s in self.stages):
            raise ConfigError("stage strides must be 1 or 2")
        if self.stem_stride < 1 or self.pool_stride < 1:
            raise ConfigError("stem and pool strides must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError(f"bn_momentum must lie in (0, 1), got {self.bn_momentum}")
        if self.head_reduce_channels < 1 or self.rpn_channels < 1:
            raise ConfigError("head channel counts must be positive")

    @property
    def feature_stride(self) -> int:
        return self.stem_stride * self.pool_stride * math.prod(s for _, _, s in self.stages)

    @property
    def ps_head(self) -> PSHeadConfig:
        return PSHeadConfig(self.k, self.num_classes, self.feature_stride)


def he_normal(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def _add_conv(params: Params, name: str, cout: int, cin: int, k: int, rng, bias: bool = False) -> None:
    dtype = get_default_dtype()
    params[f"{name}/w"] = Tensor(he_normal((cout, cin, k, k), rng), requires_grad=True, name=f"{name}/w", dtype=dtype)
    if bias:
        params[f"{name}/b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}/b", dtype=dtype)


def _add_bn(params: Params, name: str, channels: int) -> None:
    dtype = get_default_dtype()
    params[f"{name}/gamma"] = Tensor(np.ones(channels), requires_grad=True, name=f"{name}/gamma", dtype=dtype)
    params[f"{name}/beta"] = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}/beta", dtype=dtype)
    params[f"{name}/running_mean"] = Tensor(np.zeros(channels), name=f"{name}/running_mean", dtype=dtype)
    params[f"{name}/running_var"] = Tensor(np.ones(channels), name=f"{name}/running_var", dtype=dtype)


def bn_params(params: Mapping[str, Tensor], name: str, momentum_stat: float = BN_MOMENTUM) -> BNParams:
    return BNParams(
        params[f"{name}/gamma"],
        params[f"{name}/beta"],
        params[f"{name}/running_mean"],
        params[f"{name}/running_var"],
        momentum_stat=momentum_stat,
    )


def needs_projection(cin: int, cout: int, stride: int) -> bool:
    return cin != cout or stride != 1


def build_network(cfg: NetworkConfig, rng: np.random.Generator) -> Params:
    """He-initialised parameters for backbone, RPN head and position-sensitive heads."""
    p: Params = {}
    _add_conv(p, "stem/conv", cfg.stem_channels, 3, cfg.stem_kernel, rng)
    _add_bn(p, "stem/bn", cfg.stem_channels)
    cin = cfg.stem_channels
    for si, (blocks, width, stride) in enumerate(cfg.stages, 1):
        for bi in range(blocks):
            s = stride if bi == 0 else 1
            pre = f"stage{si}/block{bi}"
            _add_conv(p, f"{pre}/conv1", width, cin, 3, rng)
            _add_bn(p, f"{pre}/bn1", width)
            _add_conv(p, f"{pre}/conv2", width, width, 3, rng)
            _add_bn(p, f"{pre}/bn2", width)
            if needs_projection(cin, width, s):
                _add_conv(p, f"{pre}/proj", width, cin, 1, rng)
                _add_bn(p, f"{pre}/proj_bn", width)
            cin = width
    _add_conv(p, "head/reduce", cfg.head_reduce_channels, cin, 1, rng, bias=True)
    a = cfg.anchors.per_location
    _add_conv(p, "rpn/conv", cfg.rpn_channels, cfg.head_reduce_channels, 3, rng, bias=True)
    _add_conv(p, "rpn/cls", 2 * a, cfg.rpn_channels, 1, rng, bias=True)
    _add_conv(p, "rpn/reg", 4 * a, cfg.rpn_channels, 1, rng, bias=True)
    ps = cfg.ps_head
    _add_conv(p, "ps/cls", ps.cls_channels, cfg.head_reduce_channels, 1, rng, bias=True)
    _add_conv(p, "ps/reg", ps.reg_channels, cfg.head_reduce_channels, 1, rng, bias=True)
    return p


def is_trainable(name: str) -> bool:
    return not name.endswith(RUNNING_SUFFIXES)


def parameter_count(params: Mapping[str, Tensor]) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return sum(t.size for name, t in params.items() if is_trainable(name))


def forward_block(
    x: Tensor,
    variant: BlockVariant,
    params: Mapping[str, Tensor],
    prefix: str,
    training: bool,
    stride: int = 1,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    bn_momentum: float = BN_MOMENTUM,
) -> Tensor:
    """One two-conv residual block under the requested wiring.

    ``dropout_rate > 0`` places dropout between the two convolutions of the
    residual branch; the shortcut path is never dropped.
    """
    w1 = params[f"{prefix}/conv1/w"]
    if x.shape[1] != w1.shape[1]:
        raise DimensionError(f"{prefix}: input has {x.shape[1]} channels, conv1 expects {w1.shape[1]}")
    h = relu(batch_norm(conv2d(x, w1, stride=stride, pad=1), bn_params(params, f"{prefix}/bn1", bn_momentum), training))
    h = dropout(h, dropout_rate, training, rng)
    h = conv2d(h, params[f"{prefix}/conv2/w"], stride=1, pad=1)
    if f"{prefix}/proj/w" in params:
        shortcut = batch_norm(
            conv2d(x, params[f"{prefix}/proj/w"], stride=stride), bn_params(params, f"{prefix}/proj_bn", bn_momentum), training
        )
    else:
        if stride != 1 or x.shape[1] != h.shape[1]:
            raise DimensionError(
                f"{prefix}: shortcut shape {x.shape} differs from branch {h.shape} and no projection exists"
            )
        shortcut = x
    if shortcut.shape != h.shape:
        raise DimensionError(f"{prefix}: branch shape {h.shape} != shortcut shape {shortcut.shape}")
    bn2 = bn_params(params, f"{prefix}/bn2", bn_momentum)
    if variant is BlockVariant.ORIGINAL:
        return relu(batch_norm(h, bn2, training) + shortcut)
    if variant is BlockVariant.BN_AFTER_ADD:
        return relu(batch_norm(h + shortcut, bn2, training))
    if variant is BlockVariant.NO_SECOND_RELU:
        return batch_norm(h, bn2, training) + shortcut
    raise ConfigError(f"unknown block variant {variant!r}")


def forward_backbone(
    img: Tensor,
    cfg: NetworkConfig,
    params: Mapping[str, Tensor],
    training: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Stem, stages and head-reduction conv; returns ``[N, Cf, H/stride, W/stride]``."""
    if img.ndim != 4:
        raise DimensionError(f"backbone expects [N, 3, H, W], got {img.shape}")
    h, w = img.shape[2:]
    st = cfg.feature_stride
    if h % st or w % st:
        raise DimensionError(f"input {h}x{w} (axes H, W) is not divisible by feature stride {st}")
    x = conv2d(img, params["stem/conv/w"], stride=cfg.stem_stride, pad=cfg.stem_kernel // 2)
    x = relu(batch_norm(x, bn_params(params, "stem/bn", cfg.bn_momentum), training))
    x = max_pool2d(x, cfg.pool_window, cfg.pool_stride)
    if cfg.dropout is DropoutPlacement.AFTER_FIRST_POOL:
        x = dropout(x, cfg.dropout_rate, training, rng)
    inner = cfg.dropout_rate if cfg.dropout is DropoutPlacement.INSIDE_BLOCK else 0.0
    for si, (blocks, _, stride) in enumerate(cfg.stages, 1):
        for bi in range(blocks):
            x = forward_block(
                x,
                cfg.block_variant,
                params,
                f"stage{si}/block{bi}",
                training,
                stride=stride if bi == 0 else 1,
                dropout_rate=inner,
                rng=rng,
                bn_momentum=cfg.bn_momentum,
            )
    x = relu(conv2d(x, params["head/reduce/w"], params["head/reduce/b"]))
    if x.shape[2:] != (h // st, w // st):
        raise DimensionError(f"feature map {x.shape[2:]} does not match stride {st} for input {h}x{w}")
    return x


def rpn_heads(feat: Tensor, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Objectness logits ``[N, 2A, Hf, Wf]`` and box deltas ``[N, 4A, Hf, Wf]``."""
    h = relu(conv2d(feat, params["rpn/conv/w"], params["rpn/conv/b"], pad=1))
    return (
        conv2d(h, params["rpn/cls/w"], params["rpn/cls/b"]),
        conv2d(h, params["rpn/reg/w"], params["rpn/reg/b"]),
    )


def score_map_heads(feat: Tensor, ps: PSHeadConfig, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Sibling 1x1 convs giving ``k*k*(C+1)`` class maps and ``4*k*k`` box maps."""
    cls_w = params["ps/cls/w"]
    reg_w = params["ps/reg/w"]
    if cls_w.shape[0] != ps.cls_channels or reg_w.shape[0] != ps.reg_channels:
        raise DimensionError(
            f"score-map weights give {cls_w.shape[0]}/{reg_w.shape[0]} channels, "
            f"head config needs {ps.cls_channels}/{ps.reg_channels}"
        )
    return conv2d(feat, cls_w, params["ps/cls/b"]), conv2d(feat, reg_w, params["ps/reg/b"])


def params_from_arrays(arrays: Mapping[str, np.ndarray]) -> Params:
    dtype = get_default_dtype()
    return {
        name: Tensor(arr, requires_grad=is_trainable(name), name=name, dtype=dtype) for name, arr in arrays.items()
    }
