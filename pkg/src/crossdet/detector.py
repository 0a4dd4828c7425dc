"""Full detector: backbone + RPN + RoI cross-transformer + heads.

One parameter registry serves both operating modes.  The single-branch mode
(used for pretraining and as the comparison baseline) runs self-attention
everywhere and classifies proposals with a multi-class head; the two-branch
mode conditions the RPN on the support prototype, refines RoIs jointly with
the averaged support crop and scores proposals with the pairwise matcher.
Only the branch-embedding rows and the matcher are exclusive to the
two-branch mode; the multi-class head is exclusive to the single-branch mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .backbone import CrossBackbone, StagePlan
from .boxes import clip_boxes, decode_deltas, make_anchors, nms
from .data import EpisodeBatch
from .head import (
    DetectionResult,
    HeadConfig,
    PairMatcher,
    Proposal,
    RcnnHead,
    RoiCrossExtractor,
    RpnHead,
    generate_proposals,
    head_losses,
    proposal_boxes,
    roi_align,
    roi_align_support,
    single_branch_losses,
)
from .tensor import Tensor


@dataclass
class EpisodeForward:
    rpn_logits: Tensor
    rpn_deltas: Tensor
    proposals: list
    boxes: np.ndarray
    match_logits: Tensor
    match_deltas: Tensor


@dataclass
class SingleForward:
    rpn_logits: Tensor
    rpn_deltas: Tensor
    proposals: list
    boxes: np.ndarray
    cls_logits: Tensor
    box_deltas: Tensor


class FewShotDetector(nn.Module):
    def __init__(self, rng, plan: StagePlan = None, head_cfg: HeadConfig = None, num_classes=12):
        self.plan = plan or StagePlan()
        self.head_cfg = head_cfg or HeadConfig()
        self.num_classes = num_classes
        self.backbone = CrossBackbone(rng, self.plan)
        c3 = self.plan.out_channels
        self.rpn = RpnHead(rng, c3, self.head_cfg.anchors_per_cell)
        self.roi_extractor = RoiCrossExtractor(
            rng, c3, self.head_cfg.roi_size, self.head_cfg,
            plan_opts={
                "mlp_ratio": self.plan.mlp_ratio,
                "prenorm": self.plan.prenorm,
                "use_branch_embed": self.plan.use_branch_embed,
            },
        )
        self.matcher = PairMatcher(rng, c3, self.head_cfg.matcher_hidden)
        self.rcnn = RcnnHead(rng, c3, self.head_cfg.rcnn_hidden, num_classes)
        grid = self.plan.grid_after(len(self.plan.stages) - 1, self.plan.query_size)
        self.anchors = make_anchors(
            grid, self.plan.out_stride, self.head_cfg.anchor_sizes, self.head_cfg.anchor_ratios
        )

    # -- mode-specific parameter sets -------------------------------------------

    def cross_param_names(self):
        return [n for n, _ in self.named_params() if not n.startswith("rcnn.")]

    def single_param_names(self):
        return [
            n for n, _ in self.named_params()
            if not n.startswith("matcher.")
            and not n.endswith("embed.branch")
            and "pos_support" not in n
        ]

    def zero_branch_embeddings(self):
        self.backbone.zero_branch_embeddings()
        self.roi_extractor.embed.branch.data[:] = 0.0

    def reinit_new_parameters(self, rng):
        """Fresh start for everything the single-branch checkpoint cannot seed."""
        self.zero_branch_embeddings()
        for _, p in self.matcher.named_params():
            if p.ndim == 2:
                p.data[:] = rng.normal(0.0, 0.02, size=p.shape)
            else:
                p.data[:] = 0.0

    def load_state(self, arrays: dict):
        for name, p in self.named_params():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arrays[name].shape} != model {p.data.shape}"
                )
            p.data[:] = arrays[name]

    # -- two-branch episode paths ------------------------------------------------

    def _roi_features(self, query_feat, support_feat, boxes):
        cfg = self.head_cfg
        stride = self.plan.out_stride
        f_p = roi_align(query_feat, boxes, cfg.roi_size, cfg.sampling_ratio, stride)
        f_s = roi_align_support(
            support_feat, self.plan.support_size, cfg.roi_size, cfg.sampling_ratio, stride
        )
        return f_p, f_s

    def episode_forward(self, episode: EpisodeBatch, train=False, interact=True) -> EpisodeForward | None:
        cfg = self.head_cfg
        out = self.backbone.forward_pair(
            Tensor(episode.query_image), Tensor(episode.support_images), interact=interact
        )
        rpn_logits, rpn_deltas = self.rpn(out.query_feat, out.support_feat)
        proposals = generate_proposals(
            rpn_logits.data, rpn_deltas.data, self.anchors, self.plan.query_size, cfg
        )
        boxes = proposal_boxes(proposals)
        if train:
            # ground truth joins the RoI set so the matcher always sees positives
            boxes = np.concatenate([boxes, episode.gt_boxes]) if len(boxes) else episode.gt_boxes
        if len(boxes) == 0:
            return None
        f_p, f_s = self._roi_features(out.query_feat, out.support_feat, boxes)
        g_p, g_s = self.roi_extractor(f_p, f_s, interact=interact)
        match_logits, match_deltas = self.matcher(g_p, g_s)
        return EpisodeForward(rpn_logits, rpn_deltas, proposals, boxes, match_logits, match_deltas)

    def episode_loss(self, episode: EpisodeBatch, train=True, interact=True):
        fwd = self.episode_forward(episode, train=train, interact=interact)
        l_match, l_rpn = head_losses(
            (fwd.match_logits, fwd.match_deltas),
            fwd.boxes,
            (fwd.rpn_logits, fwd.rpn_deltas),
            self.anchors,
            episode.gt_boxes,
            self.head_cfg,
        )
        total = T.add(l_match, l_rpn)
        return total, {"matching": l_match.item(), "att_rpn": l_rpn.item()}

    def detect_episode(self, episode: EpisodeBatch, score_thresh=None) -> list:
        from .head import postprocess

        cfg = self.head_cfg
        fwd = self.episode_forward(episode, train=False)
        if fwd is None:
            return []
        if score_thresh is not None:
            from dataclasses import replace

            cfg = replace(cfg, score_thresh=score_thresh)
        return postprocess(
            fwd.match_logits.data, fwd.match_deltas.data, fwd.boxes,
            episode.class_id, self.plan.query_size, cfg,
        )

    # -- single-branch paths -------------------------------------------------------

    def single_forward(self, image: np.ndarray, gt_boxes=None, train=False) -> SingleForward | None:
        cfg = self.head_cfg
        feat = self.backbone.forward_single(Tensor(image))
        rpn_logits, rpn_deltas = self.rpn(feat, None)
        proposals = generate_proposals(
            rpn_logits.data, rpn_deltas.data, self.anchors, self.plan.query_size, cfg
        )
        boxes = proposal_boxes(proposals)
        if train and gt_boxes is not None and len(gt_boxes):
            boxes = np.concatenate([boxes, gt_boxes]) if len(boxes) else np.asarray(gt_boxes)
        if len(boxes) == 0:
            return None
        f = roi_align(feat, boxes, cfg.roi_size, cfg.sampling_ratio, self.plan.out_stride)
        g = self.roi_extractor.forward_single(f)
        cls_logits, box_deltas = self.rcnn(g)
        return SingleForward(rpn_logits, rpn_deltas, proposals, boxes, cls_logits, box_deltas)

    def single_loss(self, image: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray):
        fwd = self.single_forward(image, gt_boxes, train=True)
        l_rcnn, l_rpn = single_branch_losses(
            (fwd.cls_logits, fwd.box_deltas),
            fwd.boxes,
            (fwd.rpn_logits, fwd.rpn_deltas),
            self.anchors,
            gt_boxes,
            gt_labels,
            self.num_classes,
            self.head_cfg,
        )
        total = T.add(l_rcnn, l_rpn)
        return total, {"rcnn": l_rcnn.item(), "rpn": l_rpn.item()}

    def detect_single(self, image: np.ndarray, class_ids) -> list:
        cfg = self.head_cfg
        fwd = self.single_forward(image, train=False)
        if fwd is None:
            return []
        logits = fwd.cls_logits.data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        refined = clip_boxes(
            decode_deltas(fwd.box_deltas.data, fwd.boxes), self.plan.query_size, self.plan.query_size
        )
        results = []
        for c in class_ids:
            scores = probs[:, c]
            ok = scores >= cfg.score_thresh
            wh = refined[:, 2:] - refined[:, :2]
            ok &= (wh[:, 0] > 0) & (wh[:, 1] > 0)
            if not ok.any():
                continue
            keep = nms(refined[ok], scores[ok], cfg.det_nms_iou)
            kept_boxes, kept_scores = refined[ok][keep], scores[ok][keep]
            results.extend(
                DetectionResult(b.copy(), float(s), int(c)) for b, s in zip(kept_boxes, kept_scores)
            )
        return results
