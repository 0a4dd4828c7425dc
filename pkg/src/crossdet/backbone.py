"""Three-stage cross-transformer feature backbone.

Each stage tokenizes (stage 1) or merges (stages 2+) the incoming grid, adds
its embedding tables, and runs a stack of cross-transformer layers in which
the query and support branches exchange keys and values.  The same stages can
run in single-branch mode, where every layer falls back to self-attention;
that mode is what gets pretrained before the branches are cross-wired.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attention import POOL, CrossTransformerLayer, LayerConfig
from .embed import QUERY, SUPPORT, EmbeddingTable, PatchEmbed, PatchMerge, TokenSequence
from .tensor import ShapeError, Tensor


@dataclass
class StageSpec:
    channels: int
    layers: int
    heads: int
    sr_ratio: int
    stride: int              # patch size for stage 1, merge stride afterwards


@dataclass
class StagePlan:
    """Desk-scale stage layout plus fixed branch input resolutions."""

    stages: list = field(default_factory=lambda: [
        StageSpec(16, 1, 2, 4, 4),
        StageSpec(32, 1, 2, 2, 2),
        StageSpec(64, 2, 4, 1, 2),
    ])
    query_size: int = 64
    support_size: int = 32
    sr_mode: str = POOL
    mlp_ratio: float = 2.0
    prenorm: bool = True
    sr_norm: bool = False
    use_branch_embed: bool = True

    def __post_init__(self):
        prev_c = 0
        for i, s in enumerate(self.stages):
            if s.channels % s.heads:
                raise ShapeError(f"stage {i}: channels {s.channels} not divisible by heads {s.heads}")
            if s.channels < prev_c:
                raise ShapeError("channels must be non-decreasing across stages")
            prev_c = s.channels
            for size, name in ((self.query_size, "query"), (self.support_size, "support")):
                g = self.grid_after(i, size)
                if g[0] % s.sr_ratio or g[1] % s.sr_ratio:
                    raise ShapeError(
                        f"stage {i} {name} grid {g} not divisible by sr_ratio {s.sr_ratio}"
                    )

    def cumulative_stride(self, upto=None):
        out = 1
        for s in self.stages[: len(self.stages) if upto is None else upto]:
            out *= s.stride
        return out

    def grid_after(self, stage_idx, size):
        stride = self.cumulative_stride(stage_idx + 1)
        if size % stride:
            raise ShapeError(f"input size {size} not divisible by cumulative stride {stride}")
        return (size // stride, size // stride)

    def layer_config(self, stage_idx) -> LayerConfig:
        s = self.stages[stage_idx]
        return LayerConfig(
            channels=s.channels,
            heads=s.heads,
            sr_ratio=s.sr_ratio,
            sr_mode=self.sr_mode,
            mlp_ratio=self.mlp_ratio,
            prenorm=self.prenorm,
            sr_norm=self.sr_norm,
        )

    @property
    def out_channels(self):
        return self.stages[-1].channels

    @property
    def out_stride(self):
        return self.cumulative_stride()


@dataclass
class BackboneOutput:
    query_feat: TokenSequence    # B = 1
    support_feat: TokenSequence  # B = B_s


class Stage(nn.Module):
    def __init__(self, rng, plan: StagePlan, idx: int):
        spec = plan.stages[idx]
        in_c = 3 if idx == 0 else plan.stages[idx - 1].channels
        if idx == 0:
            self.tokenize = PatchEmbed(rng, spec.stride, in_c, spec.channels)
        else:
            self.tokenize = PatchMerge(rng, spec.stride, in_c, spec.channels)
        gq = plan.grid_after(idx, plan.query_size)
        gs = plan.grid_after(idx, plan.support_size)
        self.embed = EmbeddingTable(rng, gq[0] * gq[1], gs[0] * gs[1], spec.channels)
        cfg = plan.layer_config(idx)
        self.layers = [CrossTransformerLayer(rng, cfg) for _ in range(spec.layers)]


class CrossBackbone(nn.Module):
    """Stages 1..3; produces stage-3 features for both branches."""

    def __init__(self, rng, plan: StagePlan):
        self.plan = plan
        self.stages = [Stage(rng, plan, i) for i in range(len(plan.stages))]

    def forward_pair(self, image_q: Tensor, image_s: Tensor, interact=True) -> BackboneOutput:
        """Joint two-branch forward.

        ``interact=False`` keeps the two branches on their self-attention
        paths (no K/V exchange) while still adding branch embeddings; it is
        the separate-feature-extraction ablation and the bridge used to check
        weight transfer from the single-branch checkpoint.
        """
        if image_q.shape[0] != 1:
            raise ShapeError(f"query batch must be 1, got {image_q.shape}")
        xq: TokenSequence | Tensor = image_q
        xs: TokenSequence | Tensor = image_s
        use_branch = self.plan.use_branch_embed
        for i, stage in enumerate(self.stages):
            if i == 0:
                xq = stage.tokenize(xq, QUERY)
                xs = stage.tokenize(xs, SUPPORT)
            else:
                xq = stage.tokenize(xq)
                xs = stage.tokenize(xs)
            xq = stage.embed(xq, use_branch=use_branch)
            xs = stage.embed(xs, use_branch=use_branch)
            for j, layer in enumerate(stage.layers):
                tag = (f"stage{i + 1}", j)
                if interact:
                    xq, xs = layer(xq, xs, tag=tag)
                else:
                    xq = layer.forward_single(xq, tag=tag)
                    xs = layer.forward_single(xs, tag=tag)
        return BackboneOutput(xq, xs)

    def forward_single(self, images: Tensor) -> TokenSequence:
        """Single-branch forward at query resolution; no branch embedding."""
        x: TokenSequence | Tensor = images
        for i, stage in enumerate(self.stages):
            x = stage.tokenize(x, QUERY) if i == 0 else stage.tokenize(x)
            x = stage.embed(x, use_branch=False)
            for j, layer in enumerate(stage.layers):
                x = layer.forward_single(x, tag=(f"stage{i + 1}", j))
        return x

    def zero_branch_embeddings(self):
        for stage in self.stages:
            stage.embed.branch.data[:] = 0.0
