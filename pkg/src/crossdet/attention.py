"""Multi-head cross-attention between two branches with unequal batch sizes.

Both branches share one set of projection weights.  Keys and values are
computed from spatially reduced token grids, then exchanged: the side with
the larger batch is average-pooled down to batch 1 before it augments the
batch-1 side, and the batch-1 side is repeated before it augments the larger
side.  Concatenation order is always [primary-branch block, secondary-branch
block] along the token axis, mirroring how the attention row is later split
for visualization.

In the feature backbone the primary branch is the single query image and the
secondary branch is the stack of support crops; in the RoI extractor the
roles flip (many proposals against one averaged support).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor
from .embed import TokenSequence, tokens_to_map, map_to_tokens, _window_flatten

POOL = "pool"
STRIDED = "strided"


@dataclass
class LayerConfig:
    channels: int
    heads: int
    sr_ratio: int = 1
    sr_mode: str = POOL
    mlp_ratio: float = 2.0
    eps: float = 1e-6
    prenorm: bool = True
    sr_norm: bool = False

    def __post_init__(self):
        if self.channels % self.heads:
            raise ShapeError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.sr_mode not in (POOL, STRIDED):
            raise ValueError(f"unknown sr_mode {self.sr_mode!r}")

    @property
    def head_dim(self):
        return self.channels // self.heads


# -- attention tracing (memory accounting and mask visualization) -------------


@dataclass
class AttentionTrace:
    tag: tuple              # caller-supplied identity, e.g. ("stage2", 0)
    branch: str             # "primary" or "secondary"
    weights: "np.ndarray"   # [B, h, N_q, N_kv] softmax output
    parts: list             # [(part_name, reduced_grid), ...] splitting N_kv


class AttentionRecorder:
    def __init__(self, keep_patterns=False):
        self.keep_patterns = keep_patterns
        self.score_bytes = 0
        self.traces: list[AttentionTrace] = []


_RECORDER: AttentionRecorder | None = None


@contextmanager
def record_attention(keep_patterns=False):
    global _RECORDER
    prev = _RECORDER
    _RECORDER = AttentionRecorder(keep_patterns)
    try:
        yield _RECORDER
    finally:
        _RECORDER = prev


# -- building blocks -----------------------------------------------------------


class AttentionWeights(nn.Module):
    """Q/K/V/output projections plus optional strided-reduction weights."""

    def __init__(self, rng, cfg: LayerConfig):
        c = cfg.channels
        self.w_query = nn.normal_param(rng, (c, c))
        self.w_key = nn.normal_param(rng, (c, c))
        self.w_value = nn.normal_param(rng, (c, c))
        self.w_out = nn.normal_param(rng, (c, c))
        if cfg.sr_mode == STRIDED and cfg.sr_ratio > 1:
            self.sr_proj = nn.Linear(rng, cfg.sr_ratio * cfg.sr_ratio * c, c)
        if cfg.sr_norm:
            self.sr_ln = nn.LayerNorm(c, cfg.eps)


def spatial_reduce(seq: TokenSequence, r: int, mode=POOL, weights: AttentionWeights | None = None,
                   sr_norm=False) -> TokenSequence:
    """Shrink the token grid by r in each direction before K/V projection."""
    if r == 1:
        return seq
    h, w = seq.grid
    if h % r or w % r:
        raise ShapeError(f"token grid {h}x{w} not divisible by reduction ratio {r}")
    if mode == POOL:
        reduced = map_to_tokens(T.avg_pool2d(tokens_to_map(seq), r), seq.branch)
    else:
        flat = _window_flatten(tokens_to_map(seq), r)
        reduced = TokenSequence(weights.sr_proj(flat), (h // r, w // r), seq.branch)
    if sr_norm:
        reduced = reduced.with_tokens(weights.sr_ln(reduced.tokens))
    return reduced


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def project_qkv(x_q: TokenSequence, x_s: TokenSequence, w: AttentionWeights, cfg: LayerConfig):
    """Shared-weight projections: Q at full resolution, K/V after reduction.

    Returns (Q_q, K_q, V_q, Q_s, K_s, V_s) shaped [B, heads, N, head_dim].
    """
    if x_q.channels != cfg.channels or x_s.channels != cfg.channels:
        raise ShapeError(
            f"branch channels {x_q.channels}/{x_s.channels} do not match config {cfg.channels}"
        )

    def branch(seq):
        q = _split_heads(T.matmul(seq.tokens, w.w_query), cfg.heads)
        red = spatial_reduce(seq, cfg.sr_ratio, cfg.sr_mode, w, cfg.sr_norm)
        k = _split_heads(T.matmul(red.tokens, w.w_key), cfg.heads)
        v = _split_heads(T.matmul(red.tokens, w.w_value), cfg.heads)
        return q, k, v, red.grid

    q_q, k_q, v_q, _ = branch(x_q)
    q_s, k_s, v_s, _ = branch(x_s)
    return q_q, k_q, v_q, q_s, k_s, v_s


def _adapt_batch(x: Tensor, target: int) -> Tensor:
    """Bring the batch axis of [B, h, N, d] to ``target`` rows."""
    b = x.shape[0]
    if b == target:
        return x
    if target == 1:
        return batch_pool(x)
    if b == 1:
        return T.repeat(x, target, axis=0)
    raise ShapeError(f"cannot adapt batch {b} to {target}; one side must be 1")


def batch_pool(x: Tensor) -> Tensor:
    return T.batch_mean_sorted(x)


def aggregate_kv_for_query(k_q, v_q, k_s, v_s, b_s=None):
    """Support K/V pooled over the batch, then appended to the query's."""
    k_cat = T.concat([k_q, _adapt_batch(k_s, k_q.shape[0])], axis=2)
    v_cat = T.concat([v_q, _adapt_batch(v_s, v_q.shape[0])], axis=2)
    return k_cat, v_cat


def aggregate_kv_for_support(k_q, v_q, k_s, v_s, b_s=None):
    """Query K/V repeated across the support batch, prepended to the support's."""
    k_cat = T.concat([_adapt_batch(k_q, k_s.shape[0]), k_s], axis=2)
    v_cat = T.concat([_adapt_batch(v_q, v_s.shape[0]), v_s], axis=2)
    return k_cat, v_cat


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float, trace_info=None) -> Tensor:
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    attn = T.softmax(scores, axis=-1)
    if _RECORDER is not None:
        _RECORDER.score_bytes += scores.data.nbytes
        if _RECORDER.keep_patterns and trace_info is not None:
            tag, branch, parts = trace_info
            _RECORDER.traces.append(AttentionTrace(tag, branch, attn.data.copy(), parts))
    return T.matmul(attn, v)


def multihead_cross_attention(x_q: TokenSequence, x_s: TokenSequence, w: AttentionWeights,
                              cfg: LayerConfig, tag=()):
    """Asymmetric-batched cross-attention; output shapes match the inputs."""
    q_q, k_q, v_q, q_s, k_s, v_s = project_qkv(x_q, x_s, w, cfg)
    k_qcat, v_qcat = aggregate_kv_for_query(k_q, v_q, k_s, v_s)
    k_scat, v_scat = aggregate_kv_for_support(k_q, v_q, k_s, v_s)

    scale = 1.0 / math.sqrt(cfg.head_dim)
    r = cfg.sr_ratio
    parts = [
        ("primary", (x_q.grid[0] // r, x_q.grid[1] // r)),
        ("secondary", (x_s.grid[0] // r, x_s.grid[1] // r)),
    ]
    heads_q = _attend(q_q, k_qcat, v_qcat, scale, (tag, "primary", parts))
    heads_s = _attend(q_s, k_scat, v_scat, scale, (tag, "secondary", parts))

    out_q = T.matmul(_merge_heads(heads_q), w.w_out)
    out_s = T.matmul(_merge_heads(heads_s), w.w_out)
    return x_q.with_tokens(out_q), x_s.with_tokens(out_s)


def multihead_self_attention(x: TokenSequence, w: AttentionWeights, cfg: LayerConfig, tag=()) -> TokenSequence:
    """Single-branch path: K/V come from the branch's own reduced tokens."""
    q = _split_heads(T.matmul(x.tokens, w.w_query), cfg.heads)
    red = spatial_reduce(x, cfg.sr_ratio, cfg.sr_mode, w, cfg.sr_norm)
    k = _split_heads(T.matmul(red.tokens, w.w_key), cfg.heads)
    v = _split_heads(T.matmul(red.tokens, w.w_value), cfg.heads)
    parts = [("primary", red.grid)]
    heads = _attend(q, k, v, 1.0 / math.sqrt(cfg.head_dim), (tag, "primary", parts))
    return x.with_tokens(T.matmul(_merge_heads(heads), w.w_out))


class FeedForward(nn.Module):
    """Token-wise residual MLP: x + W2(gelu(W1(LN(x))))."""

    def __init__(self, rng, cfg: LayerConfig):
        hidden = int(round(cfg.channels * cfg.mlp_ratio))
        self.norm = nn.LayerNorm(cfg.channels, cfg.eps)
        self.fc1 = nn.Linear(rng, cfg.channels, hidden)
        self.fc2 = nn.Linear(rng, hidden, cfg.channels)
        self.prenorm = cfg.prenorm

    def forward(self, x: Tensor) -> Tensor:
        if self.prenorm:
            return T.add(x, self.fc2(T.gelu(self.fc1(self.norm(x)))))
        return self.norm(T.add(x, self.fc2(T.gelu(self.fc1(x)))))


class CrossTransformerLayer(nn.Module):
    """Attention sublayer plus one shared feed-forward applied to each branch."""

    def __init__(self, rng, cfg: LayerConfig):
        self.cfg = cfg
        self.norm = nn.LayerNorm(cfg.channels, cfg.eps)
        self.attn = AttentionWeights(rng, cfg)
        self.ffn = FeedForward(rng, cfg)

    def forward(self, x_q: TokenSequence, x_s: TokenSequence, tag=()):
        cfg = self.cfg
        if cfg.prenorm:
            a_q = x_q.with_tokens(self.norm(x_q.tokens))
            a_s = x_s.with_tokens(self.norm(x_s.tokens))
            y_q, y_s = multihead_cross_attention(a_q, a_s, self.attn, cfg, tag)
            x_q = x_q.with_tokens(T.add(x_q.tokens, y_q.tokens))
            x_s = x_s.with_tokens(T.add(x_s.tokens, y_s.tokens))
        else:
            y_q, y_s = multihead_cross_attention(x_q, x_s, self.attn, cfg, tag)
            x_q = x_q.with_tokens(self.norm(T.add(x_q.tokens, y_q.tokens)))
            x_s = x_s.with_tokens(self.norm(T.add(x_s.tokens, y_s.tokens)))
        return x_q.with_tokens(self.ffn(x_q.tokens)), x_s.with_tokens(self.ffn(x_s.tokens))

    def forward_single(self, x: TokenSequence, tag=()) -> TokenSequence:
        cfg = self.cfg
        if cfg.prenorm:
            y = multihead_self_attention(x.with_tokens(self.norm(x.tokens)), self.attn, cfg, tag)
            x = x.with_tokens(T.add(x.tokens, y.tokens))
        else:
            y = multihead_self_attention(x, self.attn, cfg, tag)
            x = x.with_tokens(self.norm(T.add(x.tokens, y.tokens)))
        return x.with_tokens(self.ffn(x.tokens))
