"""Local-global spatial adapter.

Refines frozen patch features in two stages: (1) windowed self-attention
over non-overlapping windows, then over windows shifted by half a window
(cyclic roll), capturing local inconsistencies; (2) a light graph
propagation step over two row-softmaxed adjacencies -- feature cosine
similarity and negative scaled grid distance -- whose propagated signals
are concatenated, linearly mixed and passed through GELU. The adapter
output is added residually to its input, so zeroed mixing weights leave
the frozen features untouched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import as_grid
from .config import AdapterConfig
from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)


@dataclass
class AdjacencyPair:
    """Pre-softmax logits: feature similarity and spatial proximity."""

    h_sim: torch.Tensor  # (..., n, n) cosine similarities
    h_dis: torch.Tensor  # (..., n, n) -dist/sigma, symmetric, diag 0


def window_index(grid, window: int, shift: int = 0) -> torch.Tensor:
    """Window id per token (row-major) under an optional cyclic shift.

    Two tokens attend to each other in a pass iff their ids here match.
    """
    rows, cols = as_grid(grid)
    r = torch.arange(rows).view(-1, 1).expand(rows, cols)
    c = torch.arange(cols).view(1, -1).expand(rows, cols)
    rr = (r - shift) % rows
    cc = (c - shift) % cols
    wid = (rr // window) * (cols // window) + (cc // window)
    return wid.reshape(-1)


class _WindowPass(nn.Module):
    """One pre-norm window-attention layer with residual."""

    def __init__(self, dim: int, heads: int, window: int, shift: int):
        super().__init__()
        self.heads = heads
        self.window = window
        self.shift = shift
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)
        # zero-init the output projection: the pass starts as an identity,
        # so the frozen features pass through untouched until attention
        # mixing has actually earned its weights
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        B, n, d = x.shape
        rows, cols = grid
        w, s = self.window, self.shift
        h = self.norm(x).view(B, rows, cols, d)
        if s:
            h = torch.roll(h, shifts=(-s, -s), dims=(1, 2))
        # partition into (B * n_windows, w*w, d)
        h = h.view(B, rows // w, w, cols // w, w, d)
        h = h.permute(0, 1, 3, 2, 4, 5).reshape(-1, w * w, d)
        q, k, v = torch.chunk(self.qkv(h), 3, dim=-1)
        dh = d // self.heads
        L = w * w
        q = q.view(-1, L, self.heads, dh).transpose(1, 2)
        k = k.view(-1, L, self.heads, dh).transpose(1, 2)
        v = v.view(-1, L, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(-1, L, d)
        h = self.proj(h)
        # reverse the partition
        h = h.view(B, rows // w, cols // w, w, w, d)
        h = h.permute(0, 1, 3, 2, 4, 5).reshape(B, rows, cols, d)
        if s:
            h = torch.roll(h, shifts=(s, s), dims=(1, 2))
        return x + h.reshape(B, n, d)


def grid_distance_logits(grid, sigma: float, dtype=torch.float32,
                         device=None) -> torch.Tensor:
    """(n, n) matrix of -euclidean grid distance / sigma."""
    rows, cols = as_grid(grid)
    r = torch.arange(rows, dtype=dtype, device=device).view(-1, 1).expand(rows, cols)
    c = torch.arange(cols, dtype=dtype, device=device).view(1, -1).expand(rows, cols)
    pos = torch.stack([r.reshape(-1), c.reshape(-1)], dim=1)  # (n, 2)
    return -torch.cdist(pos, pos) / sigma


def build_adjacencies(x: torch.Tensor, grid,
                      sigma_dist: float | None = None) -> AdjacencyPair:
    """Cosine-similarity and grid-distance adjacency logits for x.

    Zero-norm feature rows get cosine 0 against everything (logged).
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    grid = as_grid(grid)
    rows, cols = grid
    if x.shape[1] != rows * cols:
        raise ConfigError(f"feature count {x.shape[1]} does not match grid {grid}")
    if sigma_dist is None:
        sigma_dist = rows / 4.0
    norms = x.norm(dim=-1, keepdim=True)
    zero_rows = norms.squeeze(-1) == 0
    if zero_rows.any():
        log.warning("build_adjacencies: %d zero-norm feature rows, cosine set to 0",
                    int(zero_rows.sum()))
    unit = x / norms.clamp_min(torch.finfo(x.dtype).tiny)
    unit = torch.where(zero_rows.unsqueeze(-1), torch.zeros_like(unit), unit)
    h_sim = unit @ unit.transpose(-2, -1)
    h_dis = grid_distance_logits(grid, sigma_dist, dtype=x.dtype, device=x.device)
    h_dis = h_dis.unsqueeze(0).expand(x.shape[0], -1, -1)
    if squeeze:
        return AdjacencyPair(h_sim.squeeze(0), h_dis.squeeze(0))
    return AdjacencyPair(h_sim, h_dis)


def normalized_adjacencies(adj: AdjacencyPair) -> AdjacencyPair:
    """Row-softmax both logit matrices into row-stochastic form."""
    if not torch.isfinite(adj.h_sim).all() or not torch.isfinite(adj.h_dis).all():
        raise NumericalError("non-finite adjacency logits", {
            "h_sim_finite": bool(torch.isfinite(adj.h_sim).all()),
            "h_dis_finite": bool(torch.isfinite(adj.h_dis).all()),
        })
    return AdjacencyPair(torch.softmax(adj.h_sim, dim=-1),
                         torch.softmax(adj.h_dis, dim=-1))


def gcn_propagate(x: torch.Tensor, adj: AdjacencyPair, weight: torch.Tensor) -> torch.Tensor:
    """Row-softmax both adjacencies, propagate, concatenate, mix, GELU.

    x: (..., n, d); weight: (2d, d); returns (..., n, d).
    """
    norm = normalized_adjacencies(adj)
    mixed = torch.cat([norm.h_sim @ x, norm.h_dis @ x], dim=-1)
    return F.gelu(mixed @ weight)


class LGSAdapter(nn.Module):
    """Two window-attention passes followed by graph propagation + residual."""

    def __init__(self, dim: int, cfg: AdapterConfig):
        super().__init__()
        cfg.validate(dim=dim)
        self.cfg = cfg
        self.dim = dim
        shift = cfg.resolved_shift()
        self.passes = nn.ModuleList([
            _WindowPass(dim, cfg.heads, cfg.window, 0),
            _WindowPass(dim, cfg.heads, cfg.window, shift),
        ])
        # starts at zero: the whole adapter is then the identity map, and
        # graph propagation only contributes once training grows the weight
        self.gcn_weight = nn.Parameter(torch.zeros(2 * dim, dim))

    def local_attention(self, x: torch.Tensor, grid) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        grid = as_grid(grid)
        rows, cols = grid
        if rows % self.cfg.window or cols % self.cfg.window:
            raise ConfigError(f"window {self.cfg.window} does not divide grid {grid}")
        if x.shape[1] != rows * cols:
            raise ConfigError(f"feature count {x.shape[1]} does not match grid {grid}")
        for layer in self.passes:
            x = layer(x, grid)
        return x.squeeze(0) if squeeze else x

    def forward(self, features: torch.Tensor, grid) -> torch.Tensor:
        grid = as_grid(grid)
        local = self.local_attention(features, grid)
        adj = build_adjacencies(local, grid, self.cfg.sigma_dist)
        propagated = gcn_propagate(local, adj, self.gcn_weight)
        return propagated + features
