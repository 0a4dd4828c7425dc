"""Detection head: proposals, RoIAlign, the RoI cross-transformer and matching.

The region-proposal head scores anchors with a support-conditioned objectness
(query tokens gated by a pooled support prototype) and regresses anchor
deltas.  RoI features for the surviving proposals and for the averaged
support crop are then refined jointly by one more cross-transformer stage in
which the batch roles are reversed relative to the backbone: many proposals
against one support map.  A pooled-and-concatenated two-layer MLP finally
scores each (proposal, support) pair and refines the box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .attention import CrossTransformerLayer, LayerConfig
from .boxes import (
    as_box_array,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    iou_matrix,
    nms,
)
from .embed import QUERY, SUPPORT, EmbeddingTable, TokenSequence
from .tensor import ShapeError, Tensor


@dataclass
class HeadConfig:
    top_k: int = 16                      # proposals kept per query
    roi_size: int = 7
    sampling_ratio: int = 2
    anchor_sizes: tuple = (24.0,)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_nms_iou: float = 0.7
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    match_pos_iou: float = 0.5
    matcher_hidden: int = 64
    rcnn_hidden: int = 64
    stage4_layers: int = 1
    stage4_heads: int = 4
    score_thresh: float = 0.05
    det_nms_iou: float = 0.5
    smooth_l1_beta: float = 0.5

    @property
    def anchors_per_cell(self):
        return len(self.anchor_sizes) * len(self.anchor_ratios)


@dataclass
class Proposal:
    box: np.ndarray       # [4] pixels, clipped
    objectness: float


@dataclass
class DetectionResult:
    box: np.ndarray
    score: float
    class_id: int


def proposal_boxes(proposals) -> np.ndarray:
    if not proposals:
        return np.zeros((0, 4))
    return np.stack([p.box for p in proposals])


def _boxes_of(proposals) -> np.ndarray:
    """Accept a list of Proposal objects or a plain [P, 4] array."""
    if isinstance(proposals, np.ndarray):
        return as_box_array(proposals)
    if len(proposals) and isinstance(proposals[0], Proposal):
        return proposal_boxes(proposals)
    return as_box_array(proposals)


# -- region proposal head ------------------------------------------------------


class RpnHead(nn.Module):
    """Objectness and anchor deltas over the stage-3 query tokens.

    With a support branch present, each query token is gated elementwise by
    the pooled support prototype before the objectness projection, making the
    proposals class-specific.  The delta projection is class-agnostic.
    """

    def __init__(self, rng, channels, anchors_per_cell):
        self.cls = nn.Linear(rng, channels, anchors_per_cell)
        self.delta = nn.Linear(rng, channels, 4 * anchors_per_cell)

    def forward(self, query_feat: TokenSequence, support_feat: TokenSequence | None):
        tokens = query_feat.tokens                      # [1, N, C]
        if support_feat is not None:
            per_image = T.mean(support_feat.tokens, axis=1, keepdims=True)   # [B_s, 1, C]
            prototype = T.batch_mean_sorted(per_image)                       # [1, 1, C]
            gated = T.mul(tokens, prototype)
        else:
            gated = tokens
        n = tokens.shape[1]
        logits = T.reshape(self.cls(gated), (-1,))                  # [N*A]
        deltas = T.reshape(self.delta(tokens), (n * self.cls.weight.shape[1], 4))
        return logits, deltas


def generate_proposals(obj_logits, deltas, anchors, image_size, cfg: HeadConfig):
    """Decode, clip, drop degenerates, NMS, keep top_k. Inputs are numpy."""
    scores = 1.0 / (1.0 + np.exp(-np.asarray(obj_logits, dtype=np.float64)))
    boxes = clip_boxes(decode_deltas(deltas, anchors), image_size, image_size)
    wh = boxes[:, 2:] - boxes[:, :2]
    ok = (wh[:, 0] * wh[:, 1]) >= 1.0
    boxes, scores = boxes[ok], scores[ok]
    if len(boxes) == 0:
        return []
    keep = nms(boxes, scores, cfg.rpn_nms_iou)[: cfg.top_k]
    return [Proposal(boxes[i].copy(), float(scores[i])) for i in keep]


# -- RoIAlign -------------------------------------------------------------------


def _bilinear_plan(boxes, grid, roi_size, sampling_ratio, stride):
    """Gather plan for RoI sampling: four (flat index, weight) arrays.

    The feature pixel (i, j) is treated as centered at (i+0.5, j+0.5) in
    feature coordinates; each output bin averages sampling_ratio^2 bilinear
    samples placed on a regular sub-grid inside the bin.
    """
    boxes = as_box_array(boxes)
    wh = boxes[:, 2:] - boxes[:, :2]
    if np.any(wh[:, 0] * wh[:, 1] < 1.0):
        raise ValueError("degenerate box (area < 1 px^2) passed to roi_align")
    h, w = grid
    s = sampling_ratio

    fb = boxes / float(stride)                                  # feature coords
    bin_w = (fb[:, 2] - fb[:, 0]) / roi_size                    # [P]
    bin_h = (fb[:, 3] - fb[:, 1]) / roi_size

    # sample centers: [P, roi, roi, s, s]
    iy = np.arange(roi_size)[None, :, None, None, None]
    ix = np.arange(roi_size)[None, None, :, None, None]
    sy = (np.arange(s)[None, None, None, :, None] + 0.5) / s
    sx = (np.arange(s)[None, None, None, None, :] + 0.5) / s
    ys = fb[:, 1][:, None, None, None, None] + (iy + sy) * bin_h[:, None, None, None, None]
    xs = fb[:, 0][:, None, None, None, None] + (ix + sx) * bin_w[:, None, None, None, None]

    # shift into center-index space, clamp to the border pixels
    uy = np.clip(ys - 0.5, 0.0, h - 1.0)
    ux = np.clip(xs - 0.5, 0.0, w - 1.0)
    y0 = np.floor(uy).astype(np.intp)
    x0 = np.floor(ux).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = uy - y0
    fx = ux - x0
    flat_idx = []
    flat_wgt = []
    m = boxes.shape[0] * roi_size * roi_size * s * s
    for yi, xi, wgt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    ):
        cell = np.broadcast_to(yi * w + xi, wgt.shape).reshape(-1)
        flat_idx.append(np.arange(m) * (h * w) + cell)
        flat_wgt.append(wgt.reshape(-1))
    # dense sampling operator [M, H*W]: row m holds the (clamp-merged)
    # bilinear weights of sample m; RoI pooling becomes one matmul
    matrix = np.bincount(
        np.concatenate(flat_idx), weights=np.concatenate(flat_wgt), minlength=m * h * w
    ).reshape(m, h * w)
    return matrix


def roi_align(feat: TokenSequence, boxes, roi_size, sampling_ratio, stride) -> Tensor:
    """Bilinear RoI pooling of a batch-1 feature map to [P, roi, roi, C]."""
    if feat.batch != 1:
        raise ShapeError(f"roi_align expects a batch-1 feature map, got batch {feat.batch}")
    boxes = as_box_array(boxes)
    if boxes.shape[0] == 0:
        raise ShapeError("roi_align called with no boxes")
    h, w = feat.grid
    c = feat.channels
    s = sampling_ratio
    matrix = _bilinear_plan(boxes, feat.grid, roi_size, s, stride)
    rows = T.reshape(feat.tokens, (h * w, c))
    out = T.matmul(Tensor(matrix), rows)
    out = T.reshape(out, (boxes.shape[0], roi_size, roi_size, s * s, c))
    return T.mean(out, axis=3)


def roi_align_support(feat: TokenSequence, support_size, roi_size, sampling_ratio, stride) -> Tensor:
    """Whole-image RoI per support crop, averaged over the batch -> [1,r,r,C].

    The single-box sampling operator is broadcast across the support batch;
    one batched matmul serves every crop before the batch mean.
    """
    b = feat.batch
    s = sampling_ratio
    full = np.array([[0.0, 0.0, float(support_size), float(support_size)]])
    matrix = _bilinear_plan(full, feat.grid, roi_size, s, stride)
    out = T.matmul(Tensor(matrix[None]), feat.tokens)        # [B, M, C]
    out = T.reshape(out, (b, roi_size, roi_size, s * s, feat.channels))
    return T.batch_mean_sorted(T.mean(out, axis=3))


# -- RoI cross-transformer (stage 4) --------------------------------------------


class RoiCrossExtractor(nn.Module):
    """Joint refinement of proposal and support RoI grids, roles reversed.

    The proposal branch has batch B_p >= 1 and the support branch batch 1, so
    the support K/V are repeated across proposals and the proposal K/V are
    averaged down for the support side; the same aggregation machinery as the
    backbone, mirrored.
    """

    def __init__(self, rng, channels, roi_size, cfg: HeadConfig, plan_opts=None):
        opts = plan_opts or {}
        layer_cfg = LayerConfig(
            channels=channels,
            heads=cfg.stage4_heads,
            sr_ratio=1,
            mlp_ratio=opts.get("mlp_ratio", 2.0),
            prenorm=opts.get("prenorm", True),
        )
        self.roi_size = roi_size
        n = roi_size * roi_size
        self.embed = EmbeddingTable(rng, n, n, channels)
        self.layers = [CrossTransformerLayer(rng, layer_cfg) for _ in range(cfg.stage4_layers)]
        self.use_branch_embed = opts.get("use_branch_embed", True)

    def _to_tokens(self, fmap: Tensor, branch) -> TokenSequence:
        b, h, w, c = fmap.shape
        if (h, w) != (self.roi_size, self.roi_size):
            raise ShapeError(f"RoI grid {(h, w)} does not match extractor size {self.roi_size}")
        return TokenSequence(T.reshape(fmap, (b, h * w, c)), (h, w), branch)

    def forward(self, f_p: Tensor, f_s: Tensor, interact=True):
        xp = self.embed(self._to_tokens(f_p, QUERY), use_branch=self.use_branch_embed)
        xs = self.embed(self._to_tokens(f_s, SUPPORT), use_branch=self.use_branch_embed)
        for j, layer in enumerate(self.layers):
            tag = ("stage4", j)
            if interact:
                xp, xs = layer(xp, xs, tag=tag)
            else:
                xp = layer.forward_single(xp, tag=tag)
                xs = layer.forward_single(xs, tag=tag)
        return xp, xs

    def forward_single(self, f: Tensor) -> TokenSequence:
        x = self.embed(self._to_tokens(f, QUERY), use_branch=False)
        for j, layer in enumerate(self.layers):
            x = layer.forward_single(x, tag=("stage4", j))
        return x


def stage4_roi_extract(extractor: RoiCrossExtractor, f_p: Tensor, f_s: Tensor):
    return extractor(f_p, f_s)


# -- pairwise matcher and the single-branch classification head -----------------


class PairMatcher(nn.Module):
    """Pooled proposal/support vectors -> matching logit + box deltas."""

    def __init__(self, rng, channels, hidden):
        self.fc1 = nn.Linear(rng, 2 * channels, hidden)
        self.fc_logit = nn.Linear(rng, hidden, 1)
        self.fc_delta = nn.Linear(rng, hidden, 4)

    def forward(self, g_p: TokenSequence, g_s: TokenSequence):
        p = g_p.batch
        p_vec = T.mean(g_p.tokens, axis=1, keepdims=True)        # [P, 1, C]
        s_vec = T.mean(g_s.tokens, axis=1, keepdims=True)        # [1, 1, C]
        s_rep = T.repeat(s_vec, p, axis=0)
        # proposals stay on the batch axis so a reordering of f_p permutes
        # the outputs bit-for-bit (row-blocked matmuls would not)
        h = T.gelu(self.fc1(T.concat([p_vec, s_rep], axis=2)))
        logit = T.reshape(self.fc_logit(h), (-1,))
        return logit, T.reshape(self.fc_delta(h), (p, 4))


class RcnnHead(nn.Module):
    """Multi-class classifier + class-agnostic box deltas over pooled RoIs."""

    def __init__(self, rng, channels, hidden, num_classes):
        self.num_classes = num_classes
        self.fc1 = nn.Linear(rng, channels, hidden)
        self.fc_cls = nn.Linear(rng, hidden, num_classes + 1)    # + background
        self.fc_delta = nn.Linear(rng, hidden, 4)

    def forward(self, g: TokenSequence):
        h = T.gelu(self.fc1(T.mean(g.tokens, axis=1)))
        return self.fc_cls(h), self.fc_delta(h)


# -- losses ----------------------------------------------------------------------


def _scalar(value=0.0):
    return Tensor(np.asarray(value))


def anchor_targets(anchors, gt_boxes, pos_iou, neg_iou):
    """Labels per anchor: 1 positive, 0 negative, -1 ignored; plus matched gt."""
    a = as_box_array(anchors)
    g = as_box_array(gt_boxes)
    if g.shape[0] == 0:
        return np.zeros(a.shape[0], dtype=np.intp), np.zeros(a.shape[0], dtype=np.intp)
    ious = iou_matrix(a, g)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels = np.full(a.shape[0], -1, dtype=np.intp)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    labels[ious.argmax(axis=0)] = 1      # best anchor per gt is always positive
    return labels, matched


def rpn_loss(logits: Tensor, deltas: Tensor, anchors, gt_boxes, cfg: HeadConfig) -> Tensor:
    labels, matched = anchor_targets(anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    used = np.flatnonzero(labels >= 0)
    cls = T.mean(T.binary_cross_entropy(T.take(logits, used), labels[used].astype(np.float64)))
    pos = np.flatnonzero(labels == 1)
    if len(pos) == 0:
        return cls
    targets = encode_deltas(as_box_array(gt_boxes)[matched[pos]], as_box_array(anchors)[pos])
    reg = T.mean(T.smooth_l1(T.take(deltas, pos), targets, cfg.smooth_l1_beta))
    return T.add(cls, reg)


def matching_loss(match_logits: Tensor, match_deltas: Tensor, proposals, gt_boxes,
                  cfg: HeadConfig) -> Tensor:
    boxes = _boxes_of(proposals)
    g = as_box_array(gt_boxes)
    ious = iou_matrix(boxes, g)
    best = ious.max(axis=1) if g.shape[0] else np.zeros(boxes.shape[0])
    matched = ious.argmax(axis=1) if g.shape[0] else np.zeros(boxes.shape[0], dtype=np.intp)
    labels = (best >= cfg.match_pos_iou).astype(np.float64)
    cls = T.mean(T.binary_cross_entropy(match_logits, labels))
    pos = np.flatnonzero(labels > 0)
    if len(pos) == 0:
        return cls
    targets = encode_deltas(g[matched[pos]], boxes[pos])
    reg = T.mean(T.smooth_l1(T.take(match_deltas, pos), targets, cfg.smooth_l1_beta))
    return T.add(cls, reg)


def head_losses(match_out, proposals, rpn_out, anchors, gt_boxes, cfg: HeadConfig):
    """(L_matching, L_att_rpn) for one episode of the two-branch model."""
    match_logits, match_deltas = match_out
    rpn_logits, rpn_deltas = rpn_out
    l_match = matching_loss(match_logits, match_deltas, proposals, gt_boxes, cfg)
    l_rpn = rpn_loss(rpn_logits, rpn_deltas, anchors, gt_boxes, cfg)
    return l_match, l_rpn


def rcnn_loss(cls_logits: Tensor, box_deltas: Tensor, proposals, gt_boxes, gt_labels,
              num_classes, cfg: HeadConfig) -> Tensor:
    boxes = _boxes_of(proposals)
    g = as_box_array(gt_boxes)
    bg = num_classes
    if g.shape[0] == 0:
        labels = np.full(boxes.shape[0], bg, dtype=np.intp)
        return T.mean(T.cross_entropy(cls_logits, labels))
    ious = iou_matrix(boxes, g)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels = np.where(best >= cfg.match_pos_iou, np.asarray(gt_labels)[matched], bg).astype(np.intp)
    cls = T.mean(T.cross_entropy(cls_logits, labels))
    pos = np.flatnonzero(labels != bg)
    if len(pos) == 0:
        return cls
    targets = encode_deltas(g[matched[pos]], boxes[pos])
    reg = T.mean(T.smooth_l1(T.take(box_deltas, pos), targets, cfg.smooth_l1_beta))
    return T.add(cls, reg)


def single_branch_losses(rcnn_out, proposals, rpn_out, anchors, gt_boxes, gt_labels,
                         num_classes, cfg: HeadConfig):
    """(L_rcnn, L_rpn): multi-class head loss plus class-agnostic RPN loss."""
    cls_logits, box_deltas = rcnn_out
    rpn_logits, rpn_deltas = rpn_out
    l_rcnn = rcnn_loss(cls_logits, box_deltas, proposals, gt_boxes, gt_labels, num_classes, cfg)
    l_rpn = rpn_loss(rpn_logits, rpn_deltas, anchors, gt_boxes, cfg)
    return l_rcnn, l_rpn


# -- final detections ------------------------------------------------------------


def postprocess(match_logits, match_deltas, proposals, class_id, image_size,
                cfg: HeadConfig) -> list:
    """Sigmoid scores, threshold, per-class NMS, descending order."""
    boxes = _boxes_of(proposals)
    logits = np.asarray(match_logits, dtype=np.float64).reshape(-1)
    scores = 1.0 / (1.0 + np.exp(-logits))
    refined = clip_boxes(decode_deltas(match_deltas, boxes), image_size, image_size)
    ok = scores >= cfg.score_thresh
    wh = refined[:, 2:] - refined[:, :2]
    ok &= (wh[:, 0] > 0) & (wh[:, 1] > 0)
    if not ok.any():
        return []
    refined, scores = refined[ok], scores[ok]
    keep = nms(refined, scores, cfg.det_nms_iou)
    return [DetectionResult(refined[i].copy(), float(scores[i]), class_id) for i in keep]
