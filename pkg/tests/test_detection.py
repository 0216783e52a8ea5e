import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import iou_scalar, nms_brute, ps_pool_bins, roi_average
from psrfcn.detection import (
    AnchorSpec,
    Box,
    Detection,
    PSHeadConfig,
    ProposalConfig,
    RoI,
    decode_box,
    encode_box,
    flatten_anchor_maps,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
    parse_detections,
    ps_roi_pool,
    ps_roi_pool_batch,
    ps_roi_pool_reg,
    ps_vote_classify,
    read_detections,
    rpn_propose,
    write_detections,
)
from psrfcn.errors import GeometryError, ParseError
from psrfcn.tensor import Tensor, softmax


@st.composite
def boxes(draw, lo=0.0, hi=60.0, min_side=0.5):
    x1 = draw(st.floats(lo, hi - min_side))
    y1 = draw(st.floats(lo, hi - min_side))
    x2 = draw(st.floats(x1 + min_side, hi))
    y2 = draw(st.floats(y1 + min_side, hi))
    return Box(x1, y1, x2, y2)


def random_boxes(rng, n, side=40.0):
    xy = rng.uniform(0, side, size=(n, 2))
    wh = rng.uniform(2, 20, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


# IoU


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_bounded_and_matches_matrix(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert v == pytest.approx(iou_matrix([a], [b])[0, 0], abs=1e-12)
    assert v == pytest.approx(iou_scalar(a, b), abs=1e-12)


# anchors


def test_anchor_count_and_first_anchor():
    assert generate_anchors(AnchorSpec((16.0,), (1.0,)), 2, 2, 8).shape == (4, 4)
    a = generate_anchors(AnchorSpec((16.0,), (1.0,)), 3, 3, 8)
    assert np.array_equal(a[0], [-4.0, -4.0, 12.0, 12.0])


def test_anchor_order_row_major_ratio_major():
    spec = AnchorSpec((8.0, 16.0), (0.5, 2.0))
    a = generate_anchors(spec, 2, 3, 4)
    assert a.shape == (2 * 3 * 4, 4)
    # cell (0, 1) starts at index 4; within a cell, ratio-major then size
    cx = (a[4:8, 0] + a[4:8, 2]) / 2
    assert np.allclose(cx, 6.0)
    w = a[:4, 2] - a[:4, 0]
    h = a[:4, 3] - a[:4, 1]
    np.testing.assert_allclose(w / h, [0.5, 0.5, 2.0, 2.0])
    np.testing.assert_allclose(w * h, [64.0, 256.0, 64.0, 256.0])
    # cell (1, 0) is index 3 in row-major order
    assert np.allclose((a[12:16, 1] + a[12:16, 3]) / 2, 6.0)


@given(st.floats(0.2, 5.0), st.floats(2.0, 40.0))
def test_anchor_ratio_exact(r, s):
    a = generate_anchors(AnchorSpec((s,), (r,)), 1, 1, 4)[0]
    w, h = a[2] - a[0], a[3] - a[1]
    assert w / h == pytest.approx(r, rel=1e-12)
    assert w * h == pytest.approx(s * s, rel=1e-12)


# box coding


def test_encode_examples():
    assert np.allclose(encode_box((0, 0, 10, 10), (0, 0, 10, 10)), 0.0)
    np.testing.assert_allclose(encode_box((0, 0, 10, 10), (5, 5, 15, 15)), [0.5, 0.5, 0.0, 0.0])


def test_encode_rejects_degenerate_anchor():
    with pytest.raises(GeometryError):
        encode_box((0, 0, 0, 5), (0, 0, 1, 1))
    with pytest.raises(GeometryError):
        decode_box((3, 3, 3, 4), (0, 0, 0, 0))


@given(boxes(min_side=1.0), boxes(min_side=1.0))
def test_decode_inverts_encode(a, g):
    np.testing.assert_allclose(decode_box(a, encode_box(a, g)), g, atol=1e-9)


def test_decode_clips_to_image():
    out = decode_box((50, 50, 70, 70), (0.5, 0.5, 0.5, 0.5), (64, 64))
    assert out[2] == 64 and out[3] == 64


# NMS


def test_nms_examples():
    assert list(nms([(0, 0, 1, 1)], [0.3], 0.5)) == [0]
    assert list(nms([(0, 0, 1, 1), (5, 5, 6, 6)], [0.1, 0.2], 0.0)) == [1, 0]
    assert list(nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.9, 0.8], 0.5)) == [0]


def test_nms_ties_keep_lower_index():
    assert list(nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.5, 0.5], 0.5)) == [0]


@settings(max_examples=60)
@given(st.integers(0, 10_000), st.integers(1, 25), st.floats(0.1, 0.9))
def test_nms_matches_brute_force(seed, n, thr):
    rng = np.random.default_rng(seed)
    b = random_boxes(rng, n)
    s = np.round(rng.uniform(size=n), 2)
    assert list(nms(b, s, thr)) == nms_brute(b.tolist(), s.tolist(), thr)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_nms_invariant_under_monotone_score_transform(seed, n):
    rng = np.random.default_rng(seed)
    b = random_boxes(rng, n)
    s = rng.uniform(size=n)
    assert np.array_equal(nms(b, s, 0.4), nms(b, np.exp(3 * s) - 7, 0.4))


# proposals


def _flat_objectness(fg_logit):
    return np.stack([np.zeros_like(fg_logit), fg_logit], axis=1)


def test_propose_single_anchor():
    anchors = np.array([[4.0, 4.0, 20.0, 20.0]])
    b, s = rpn_propose(_flat_objectness(np.zeros(1)), np.zeros((1, 4)), anchors, ProposalConfig(), (64, 64))
    assert np.array_equal(b, anchors) and s[0] == 0.5


def test_propose_zero_deltas_returns_clipped_anchors():
    anchors = generate_anchors(AnchorSpec((16.0,), (1.0,)), 2, 2, 16)
    b, _ = rpn_propose(_flat_objectness(np.arange(4.0)), np.zeros((4, 4)), anchors, ProposalConfig(nms_thresh=1.0), (32, 32))
    expected = np.clip(anchors, 0, 32)[::-1]
    assert np.array_equal(b, expected)


def _propose_brute(fg_logits, deltas, anchors, cfg, size):
    h, w = size
    fg = [1 / (1 + math.exp(-z)) for z in fg_logits]
    cand = []
    for i, (a, d) in enumerate(zip(anchors, deltas)):
        aw, ah = a[2] - a[0], a[3] - a[1]
        cx, cy = a[0] + aw / 2 + d[0] * aw, a[1] + ah / 2 + d[1] * ah
        bw, bh = aw * math.exp(d[2]), ah * math.exp(d[3])
        box = [min(max(cx - bw / 2, 0), w), min(max(cy - bh / 2, 0), h), min(max(cx + bw / 2, 0), w), min(max(cy + bh / 2, 0), h)]
        if box[2] - box[0] >= cfg.min_size and box[3] - box[1] >= cfg.min_size:
            cand.append(i)
    cand.sort(key=lambda i: (-fg[i], i))
    cand = cand[: cfg.pre_nms]
    boxes_ = []
    for i in cand:
        a, d = anchors[i], deltas[i]
        aw, ah = a[2] - a[0], a[3] - a[1]
        cx, cy = a[0] + aw / 2 + d[0] * aw, a[1] + ah / 2 + d[1] * ah
        bw, bh = aw * math.exp(d[2]), ah * math.exp(d[3])
        boxes_.append([min(max(cx - bw / 2, 0), w), min(max(cy - bh / 2, 0), h), min(max(cx + bw / 2, 0), w), min(max(cy + bh / 2, 0), h)])
    kept = nms_brute(boxes_, [fg[i] for i in cand], cfg.nms_thresh)[: cfg.post_nms]
    return [cand[k] for k in kept]


@pytest.mark.parametrize("seed", range(8))
def test_propose_matches_brute_force_on_ten_anchors(seed):
    rng = np.random.default_rng(seed)
    anchors = random_boxes(rng, 10, side=30)
    logits = np.round(rng.normal(size=10), 1)
    deltas = rng.normal(scale=0.3, size=(10, 4))
    cfg = ProposalConfig(pre_nms=7, post_nms=4, nms_thresh=0.5, min_size=3.0)
    b, s = rpn_propose(_flat_objectness(logits), deltas, anchors, cfg, (40, 40))
    idx = _propose_brute(logits, deltas, anchors, cfg, (40, 40))
    assert len(b) == len(idx)
    np.testing.assert_allclose(b, decode_box(anchors[idx], deltas[idx], (40, 40)), atol=1e-12)


def test_flatten_anchor_maps_layout():
    a, d, hf, wf = 2, 4, 2, 3
    maps = np.arange(a * d * hf * wf, dtype=float).reshape(1, a * d, hf, wf)
    flat = flatten_anchor_maps(maps, d)
    # row = (cell * A + anchor), column = coordinate; channel = anchor * d + coord
    for y in range(hf):
        for x in range(wf):
            for an in range(a):
                for c in range(d):
                    assert flat[(y * wf + x) * a + an, c] == maps[0, an * d + c, y, x]


# position-sensitive pooling


def test_ps_pool_k1_constant_map():
    maps = np.zeros((1, 4, 5, 5))
    for c in range(4):
        maps[0, c] = c * 1.5 - 2
    out = ps_roi_pool(Tensor(maps), RoI(Box(3, 3, 17, 12)), PSHeadConfig(1, 3, 4)).data
    assert np.array_equal(out[:, 0, 0], [c * 1.5 - 2 for c in range(4)])


def test_ps_pool_channel_coding_routing():
    maps = np.zeros((1, 8, 4, 4))
    for g in range(8):
        maps[0, g] = g
    out = ps_roi_pool(Tensor(maps), RoI(Box(0, 0, 4, 4)), PSHeadConfig(2, 1, 1)).data
    for c in range(2):
        for i in range(2):
            for j in range(2):
                assert out[c, i, j] == (i * 2 + j) * 2 + c


@pytest.mark.parametrize("k", [1, 2, 3])
def test_ps_pool_output_shape(k):
    maps = Tensor(np.zeros((1, k * k * 5, 6, 6)))
    assert ps_roi_pool(maps, RoI(Box(1, 2, 9, 11)), PSHeadConfig(k, 4, 2)).shape == (5, k, k)


def test_ps_pool_outside_is_geometry_error():
    with pytest.raises(GeometryError):
        ps_roi_pool(Tensor(np.zeros((1, 4, 4, 4))), RoI(Box(40, 40, 50, 50)), PSHeadConfig(1, 3, 4))


def test_ps_pool_empty_bins_are_zero():
    # RoI about one cell wide: only the middle bin holds the cell centre 0.5
    maps = Tensor(np.ones((1, 9 * 2, 4, 4)))
    out = ps_roi_pool(maps, RoI(Box(0.2, 0.2, 1.0, 1.0)), PSHeadConfig(3, 1, 1)).data
    assert out[:, 1, 1].tolist() == [1.0, 1.0]
    assert np.count_nonzero(out) == 2


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3]))
def test_ps_pool_permuting_groups_permutes_bins(seed, k):
    # with maps constant per channel, routing alone decides each bin's value
    rng = np.random.default_rng(seed)
    c = 2
    const = np.broadcast_to(rng.normal(size=(1, k * k * (c + 1), 1, 1)), (1, k * k * (c + 1), 6, 6)).copy()
    perm = rng.permutation(k * k)
    permuted = const.reshape(1, k * k, c + 1, 6, 6)[:, perm].reshape(const.shape)
    roi = RoI(Box(0, 0, 24, 24))
    ps = PSHeadConfig(k, c, 4)
    a = ps_roi_pool(Tensor(const), roi, ps).data.reshape(c + 1, k * k)
    b = ps_roi_pool(Tensor(permuted), roi, ps).data.reshape(c + 1, k * k)
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-14)


def test_ps_pool_batch_matches_single():
    rng = np.random.default_rng(8)
    maps = rng.normal(size=(2, 18, 6, 6))
    rois = [Box(0, 0, 20, 20), Box(4, 2, 23, 17)]
    batch = ps_roi_pool_batch(Tensor(maps), rois, [0, 1], 3, 2, 4).data
    for r, (box, bi) in enumerate(zip(rois, [0, 1])):
        single = ps_roi_pool(Tensor(maps), RoI(box, batch_index=bi), PSHeadConfig(3, 1, 4)).data
        np.testing.assert_allclose(batch[r], single, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_ps_pool_matches_per_bin_loop(seed):
    rng = np.random.default_rng(100 + seed)
    k = int(rng.choice([1, 2, 3, 7]))
    c = int(rng.integers(1, 4))
    stride = int(rng.choice([1, 2, 4]))
    hf, wf = (int(v) for v in rng.integers(3, 10, size=2))
    maps = rng.normal(size=(k * k * (c + 1), hf, wf))
    x1, y1 = rng.uniform(-2, wf * stride / 2), rng.uniform(-2, hf * stride / 2)
    box = Box(x1, y1, x1 + rng.uniform(1, wf * stride), y1 + rng.uniform(1, hf * stride))
    out = ps_roi_pool(Tensor(maps[None]), RoI(box), PSHeadConfig(k, c, stride)).data
    np.testing.assert_allclose(out, ps_pool_bins(maps, box, k, c + 1, stride), atol=1e-12, rtol=0)


def test_ps_pool_k1_is_roi_average():
    rng = np.random.default_rng(3)
    maps = rng.normal(size=(4, 8, 8))
    box = Box(3.3, 1.0, 25.9, 30.2)
    out = ps_roi_pool(Tensor(maps[None]), RoI(box), PSHeadConfig(1, 3, 4)).data[:, 0, 0]
    np.testing.assert_allclose(out, roi_average(maps, box, 4), atol=1e-12)


def test_ps_pool_batch_index_selects_image():
    maps = np.zeros((2, 4, 3, 3))
    maps[1] = 7.0
    out = ps_roi_pool(Tensor(maps), RoI(Box(0, 0, 3, 3), batch_index=1), PSHeadConfig(1, 3, 1)).data
    np.testing.assert_allclose(out, 7.0, rtol=1e-14)


# voting and regression


def test_vote_examples():
    pooled = np.random.default_rng(4).normal(size=(4, 1, 1))
    np.testing.assert_allclose(ps_vote_classify(Tensor(pooled)).data, softmax(Tensor(pooled[:, 0, 0])).data)
    assert np.allclose(ps_vote_classify(Tensor(np.full((4, 3, 3), 2.5))).data, 0.25)
    dom = np.random.default_rng(5).normal(size=(4, 3, 3))
    dom[2] += 10
    assert int(np.argmax(ps_vote_classify(Tensor(dom)).data)) == 2


def test_reg_examples():
    ps = PSHeadConfig(3, 3, 4)
    roi = RoI(Box(4, 4, 28, 28))
    zero = ps_roi_pool_reg(Tensor(np.zeros((1, 36, 8, 8))), roi, ps).data
    assert np.array_equal(zero, [0, 0, 0, 0])
    assert np.array_equal(decode_box(roi.box, zero), roi.box)
    const = ps_roi_pool_reg(Tensor(np.full((1, 36, 8, 8), 0.7)), roi, ps).data
    np.testing.assert_allclose(const, [0.7] * 4, rtol=1e-15)


def test_reg_channel_coding_vote():
    # k=2, channel g filled with g: bin (i, j), coordinate d reads channel (i*2+j)*4+d
    maps = np.zeros((1, 16, 4, 4))
    for g in range(16):
        maps[0, g] = g
    vote = ps_roi_pool_reg(Tensor(maps), RoI(Box(0, 0, 4, 4)), PSHeadConfig(2, 1, 1)).data
    # mean over bins of (n*4 + d) for n = 0..3 is 6 + d
    assert np.array_equal(vote, [6.0, 7.0, 8.0, 9.0])


# detection text format


def test_detection_round_trip(tmp_path):
    dets = [Detection(Box(1.5, 2.25, 30.125, 40.0), 2, 0.875, "img_0"), Detection(Box(0, 0, 8, 8), 1, 0.1, "img_1")]
    path = tmp_path / "d.txt"
    write_detections(path, dets)
    assert path.read_text().splitlines()[0] == "img_0 2 0.875 1.5 2.25 30.125 40"
    assert read_detections(path) == dets


def test_detection_parse_error_has_line_number():
    with pytest.raises(ParseError, match=":2:"):
        parse_detections(["a 1 0.5 0 0 1 1", "a 1 0.5 0 0 1"], "dets.txt")
