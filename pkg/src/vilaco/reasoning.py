"""Adaptive vision-language reasoning.

Visual patch features query the two class text embeddings through a
multi-head cross-attention layer (residual), a learnable soft attention
pool compresses the enhanced patches into one context vector, and an FFN
with a double residual folds that context back into the text embeddings,
yielding the tampering-aware text rows used by both prediction heads.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ReasoningConfig
from .errors import ConfigError


class TextGuidedAttention(nn.Module):
    """Cross attention: patch queries over per-class text keys/values."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        # identity at init: text guidance blends in only as training
        # grows the output projection away from zero
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, visual: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        # visual: (B, n, d); text: (2, d) shared across the batch
        squeeze = visual.dim() == 2
        if squeeze:
            visual = visual.unsqueeze(0)
        if text.shape[-1] != visual.shape[-1]:
            raise ConfigError(
                f"text dim {text.shape[-1]} != visual dim {visual.shape[-1]}"
            )
        B, n, d = visual.shape
        dh = d // self.heads
        q = self.q_proj(visual).view(B, n, self.heads, dh).transpose(1, 2)
        kv = text.unsqueeze(0).expand(B, -1, -1)
        k = self.k_proj(kv).view(B, -1, self.heads, dh).transpose(1, 2)
        v = self.v_proj(kv).view(B, -1, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(B, n, d)
        out = visual + self.out_proj(mixed)
        return out.squeeze(0) if squeeze else out


class SoftAttentionPool(nn.Module):
    """Learnable scoring vector -> softmax weights -> convex patch blend."""

    def __init__(self, dim: int):
        super().__init__()
        self.score = nn.Parameter(torch.zeros(dim))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        squeeze = features.dim() == 2
        if squeeze:
            features = features.unsqueeze(0)
        weights = torch.softmax(features @ self.score.to(features.dtype), dim=-1)
        pooled = torch.einsum("bn,bnd->bd", weights, features)
        return pooled.squeeze(0) if squeeze else pooled

    def attention_weights(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(features @ self.score.to(features.dtype), dim=-1)


class ForgeryAwareAggregator(nn.Module):
    """FFN(ctx + text) + ctx + text, applied per class row."""

    def __init__(self, dim: int, ffn_mult: int):
        super().__init__()
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim),
            nn.GELU(),
            nn.Linear(ffn_mult * dim, dim),
        )
        nn.init.zeros_(self.ffn[-1].weight)  # start as the plain residual sum
        nn.init.zeros_(self.ffn[-1].bias)

    def forward(self, visual_context: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        # visual_context: (B, d) or (d,); text: (2, d)
        squeeze = visual_context.dim() == 1
        if squeeze:
            visual_context = visual_context.unsqueeze(0)
        base = visual_context.unsqueeze(1) + text.unsqueeze(0)  # (B, 2, d)
        out = self.ffn(base) + base
        return out.squeeze(0) if squeeze else out


class ReasoningModule(nn.Module):
    def __init__(self, dim: int, cfg: ReasoningConfig):
        super().__init__()
        cfg.validate(dim=dim)
        self.cross_attention = TextGuidedAttention(dim, cfg.heads)
        self.pool = SoftAttentionPool(dim)
        self.aggregator = ForgeryAwareAggregator(dim, cfg.ffn_mult)

    def forward(self, spatial: torch.Tensor, text: torch.Tensor):
        """-> (enhanced patches (B, n, d), tamper-aware text (B, 2, d))."""
        enhanced = self.cross_attention(spatial, text)
        context = self.pool(enhanced)
        tamper_text = self.aggregator(context, text)
        return enhanced, tamper_text
