"""Patch tokenization and position/branch embeddings.

Images enter as [B, H, W, 3] arrays and become token sequences [B, N, C]
with an attached (H_tok, W_tok) grid.  Each backbone stage either embeds raw
pixels (stage 1) or merges the previous stage's token grid with a strided
linear projection, then adds a learned position table plus a per-branch row.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

QUERY = "query"
SUPPORT = "support"


@dataclass
class TokenSequence:
    tokens: Tensor          # [B, N, C]
    grid: tuple             # (H_tok, W_tok), H_tok * W_tok == N
    branch: str = QUERY

    def __post_init__(self):
        h, w = self.grid
        if h * w != self.tokens.shape[1]:
            raise ShapeError(f"grid {self.grid} does not cover {self.tokens.shape[1]} tokens")

    @property
    def batch(self):
        return self.tokens.shape[0]

    @property
    def channels(self):
        return self.tokens.shape[2]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)


def tokens_to_map(seq: TokenSequence) -> Tensor:
    h, w = seq.grid
    b, _, c = seq.tokens.shape
    return T.reshape(seq.tokens, (b, h, w, c))


def map_to_tokens(fmap: Tensor, branch=QUERY) -> TokenSequence:
    b, h, w, c = fmap.shape
    return TokenSequence(T.reshape(fmap, (b, h * w, c)), (h, w), branch)


def _window_flatten(fmap: Tensor, k: int) -> Tensor:
    """[B, H, W, C] -> [B, (H/k)*(W/k), k*k*C], one row per k-by-k window."""
    b, h, w, c = fmap.shape
    if h % k or w % k:
        raise ShapeError(f"grid {h}x{w} not divisible by window {k}")
    x = T.reshape(fmap, (b, h // k, k, w // k, k, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, (h // k) * (w // k), k * k * c))


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping patch*patch pixel blocks."""

    def __init__(self, rng, patch, in_channels, out_channels, std=0.02):
        self.patch = patch
        self.proj = nn.Linear(rng, patch * patch * in_channels, out_channels, std=std)

    def forward(self, image: Tensor, branch=QUERY) -> TokenSequence:
        b, h, w, c = image.shape
        if h % self.patch or w % self.patch:
            raise ShapeError(f"image {h}x{w} not divisible by patch {self.patch}")
        flat = _window_flatten(image, self.patch)
        return TokenSequence(self.proj(flat), (h // self.patch, w // self.patch), branch)


class PatchMerge(nn.Module):
    """Strided re-embedding of the token grid: N shrinks by stride^2."""

    def __init__(self, rng, stride, in_channels, out_channels, std=0.02):
        self.stride = stride
        self.proj = nn.Linear(rng, stride * stride * in_channels, out_channels, std=std)

    def forward(self, seq: TokenSequence) -> TokenSequence:
        h, w = seq.grid
        flat = _window_flatten(tokens_to_map(seq), self.stride)
        return TokenSequence(self.proj(flat), (h // self.stride, w // self.stride), seq.branch)


class EmbeddingTable(nn.Module):
    """Learned per-stage position tables plus a two-row branch table.

    The branch rows start at zero so a freshly cross-wired model computes
    exactly what its single-branch initialization did.
    """

    def __init__(self, rng, n_query, n_support, channels, std=0.02):
        self.pos_query = nn.normal_param(rng, (n_query, channels), std)
        self.pos_support = nn.normal_param(rng, (n_support, channels), std)
        self.branch = nn.zeros_param((2, channels))

    def pos_for(self, branch):
        return self.pos_query if branch == QUERY else self.pos_support

    def forward(self, seq: TokenSequence, use_branch=True) -> TokenSequence:
        pos = self.pos_for(seq.branch)
        if pos.shape[0] != seq.tokens.shape[1]:
            raise ShapeError(
                f"position table {pos.shape} does not match {seq.tokens.shape[1]} "
                f"{seq.branch} tokens (fixed-resolution stages, no interpolation)"
            )
        out = T.add(seq.tokens, T.reshape(pos, (1,) + tuple(pos.shape)))
        if use_branch:
            row = T.take(self.branch, [0 if seq.branch == QUERY else 1])
            out = T.add(out, T.reshape(row, (1, 1, row.shape[1])))
        return seq.with_tokens(out)


def add_embeddings(seq: TokenSequence, table: EmbeddingTable, use_branch=True) -> TokenSequence:
    return table(seq, use_branch)
