"""Risk attention: scaled dot-product multi-head attention, the
survival-attention pooling over the last backbone map, and the per-sentence
embedders that fuse grouped region features with the pooled risk feature.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ModelConfig
from .errors import ShapeError


class MultiHeadAttention(nn.Module):
    """MHA(X, Y): Y supplies queries, X supplies keys and values.

    Projections are bias-free linear maps, one set per head, applied as a
    single fused matrix per role.
    """

    def __init__(self, dim: int, heads: int, seed: int = 0):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"model width {dim} not divisible by {heads} heads")
        torch.manual_seed(seed)
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, y: torch.Tensor, return_weights: bool = False):
        """x: (..., m, d) keys/values; y: (..., q, d) queries -> (..., q, d)."""
        if x.shape[-1] != self.dim or y.shape[-1] != self.dim:
            raise ShapeError(
                f"inputs must have width {self.dim}, got {x.shape[-1]} and {y.shape[-1]}"
            )
        squeeze = x.dim() == 2
        if squeeze:
            x, y = x.unsqueeze(0), y.unsqueeze(0)
        b, m, _ = x.shape
        q = y.shape[1]
        qh = self.query(y).reshape(b, q, self.heads, self.head_dim).transpose(1, 2)
        kh = self.key(x).reshape(b, m, self.heads, self.head_dim).transpose(1, 2)
        vh = self.value(x).reshape(b, m, self.heads, self.head_dim).transpose(1, 2)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ vh).transpose(1, 2).reshape(b, q, self.dim)
        result = self.out(mixed)
        if squeeze:
            result = result.squeeze(0)
            weights = weights.squeeze(0)
        return (result, weights) if return_weights else result


class SurvivalAttention(nn.Module):
    """Pools the last backbone map into one risk feature row.

    The flattened spatial sequence (plus a learnable positional table) forms
    keys/values; the channel-wise mean (plus its own positional row) is the
    single query.
    """

    def __init__(self, dim: int, heads: int, positions: int, seed: int = 0):
        super().__init__()
        self.mha = MultiHeadAttention(dim, heads, seed=seed)
        torch.manual_seed(seed + 1)
        self.pos = nn.Parameter(0.02 * torch.randn(positions, dim))
        self.pos_query = nn.Parameter(0.02 * torch.randn(1, dim))

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """grid: (C,H,W) or (B,C,H,W) -> (1,C) or (B,1,C)."""
        squeeze = grid.dim() == 3
        if squeeze:
            grid = grid.unsqueeze(0)
        if grid.dim() != 4:
            raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(grid.shape)}")
        b, c, h, w = grid.shape
        if c != self.mha.dim or h * w != self.pos.shape[0]:
            raise ShapeError(
                f"grid {tuple(grid.shape[1:])} does not match state "
                f"(dim {self.mha.dim}, positions {self.pos.shape[0]})"
            )
        sequence = grid.reshape(b, c, h * w).transpose(1, 2)    # (B, P, C)
        query = sequence.mean(dim=1, keepdim=True)              # (B, 1, C)
        pooled = self.mha(sequence + self.pos, query + self.pos_query)
        return pooled.squeeze(0) if squeeze else pooled


class SentenceEmbedders(nn.Module):
    """Per-sentence local/global embedders plus the shared region-to-sentence
    map: v_i = shared(local_i(grouped features) + global_i(pooled risk)).
    """

    def __init__(self, config: ModelConfig, group_table: dict, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        width = config.region_feature_width
        self.group_table = {i: sorted(group_table[i]) for i in sorted(group_table)}
        self.local = nn.ModuleList(
            nn.Linear(width * len(self.group_table[i]), config.sentence_width)
            for i in sorted(self.group_table)
        )
        self.globals = nn.ModuleList(
            nn.Linear(config.attention_dim, config.sentence_width)
            for _ in self.group_table
        )
        self.shared = nn.Linear(config.sentence_width, config.sentence_width)

    def encode_sentence(self, grouped: torch.Tensor, pooled: torch.Tensor,
                        sentence: int) -> torch.Tensor:
        """1-based sentence index; grouped (..., W*|group|), pooled (..., C)."""
        local = self.local[sentence - 1]
        if grouped.shape[-1] != local.in_features:
            raise ShapeError(
                f"sentence {sentence} expects width {local.in_features}, got {grouped.shape[-1]}"
            )
        return self.shared(local(grouped) + self.globals[sentence - 1](pooled))

    def forward(self, grouped_features: list, pooled: torch.Tensor) -> list:
        return [
            self.encode_sentence(g, pooled, i + 1)
            for i, g in enumerate(grouped_features)
        ]
