"""Dual prediction heads.

Coarse: per-patch tamper probabilities, image score = mean of the K
highest (K = max(1, ceil(k_ratio * n)); K = n is mean pooling, K = 1 is
max pooling). Fine: a fake-minus-real text similarity map over patches,
decoded to image resolution by conv + GELU + 2x bilinear stages (one per
halving in the patch size), and squeezed into an image score by soft-gated
pooling with a learnable threshold and temperature.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .backbone import as_grid
from .config import HeadConfig
from .errors import ConfigError, InputError

SG_TEMP_FLOOR = 1e-3
SG_EPS = 1e-8


def top_k_count(n: int, k_ratio: float) -> int:
    if not 0 < k_ratio <= 1:
        raise ConfigError(f"k_ratio must be in (0, 1], got {k_ratio}")
    return max(1, math.ceil(k_ratio * n))


class CoarseHead(nn.Module):
    def __init__(self, dim: int, k_ratio: float):
        super().__init__()
        self.k_ratio = k_ratio
        self.classifier = nn.Linear(dim, 1)
        # neutral start: every patch opens at probability 0.5, so real and
        # fake images pull the classifier with balanced gradients instead of
        # first spending steps un-learning a random bias
        nn.init.zeros_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)

    def patch_probs(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.classifier(features).squeeze(-1))

    def forward(self, features: torch.Tensor):
        """(B, n, d) -> (image probability (B,), patch probabilities (B, n))."""
        squeeze = features.dim() == 2
        if squeeze:
            features = features.unsqueeze(0)
        probs = self.patch_probs(features)
        k = top_k_count(probs.shape[-1], self.k_ratio)
        score = probs.topk(k, dim=-1).values.mean(dim=-1)
        if squeeze:
            return score.squeeze(0), probs.squeeze(0)
        return score, probs


def similarity_map(features: torch.Tensor, text: torch.Tensor,
                   grid) -> torch.Tensor:
    """Per-patch (fake - real) text affinity, scaled by 1/sqrt(d).

    features: (B, n, d); text: (B, 2, d) or (2, d) rows [real, fake].
    Returns (B, rows, cols); positive values lean tampered.
    """
    grid = as_grid(grid)
    squeeze = features.dim() == 2
    if squeeze:
        features = features.unsqueeze(0)
    if text.dim() == 2:
        text = text.unsqueeze(0).expand(features.shape[0], -1, -1)
    d = features.shape[-1]
    if text.shape[-1] != d:
        raise ConfigError(f"text dim {text.shape[-1]} != feature dim {d}")
    contrast = text[:, 1, :] - text[:, 0, :]  # fake minus real
    scores = torch.einsum("bnd,bd->bn", features, contrast) / math.sqrt(d)
    out = scores.view(features.shape[0], *grid)
    return out.squeeze(0) if squeeze else out


class MaskDecoder(nn.Module):
    """Upsample a patch-grid map to pixels: ceil(log2(p)) conv+GELU+2x stages."""

    def __init__(self, patch_size: int, channels: int = 16):
        super().__init__()
        if patch_size < 1 or patch_size & (patch_size - 1):
            raise ConfigError(f"decoder needs a power-of-two patch size, got {patch_size}")
        self.patch_size = patch_size
        stages = max(1, int(math.log2(patch_size))) if patch_size > 1 else 0
        convs = []
        for i in range(stages):
            convs.append(nn.Conv2d(1 if i == 0 else channels, channels, 3, padding=1))
        self.stage_convs = nn.ModuleList(convs)
        self.head = nn.Conv2d(channels if stages else 1, 1, 1)
        # start the mask low (~0.18) rather than at 0.5: real images are then
        # near their target from the first step, and the fake-image gradient
        # raises only the strongest patch responses, which localizes
        nn.init.constant_(self.head.bias, -1.5)

    def forward(self, patch_map: torch.Tensor) -> torch.Tensor:
        """(B, rows, cols) -> mask (B, rows*p, cols*p) in [0, 1]."""
        squeeze = patch_map.dim() == 2
        if squeeze:
            patch_map = patch_map.unsqueeze(0)
        x = patch_map.unsqueeze(1)  # (B, 1, rows, cols)
        for conv in self.stage_convs:
            x = F.gelu(conv(x))
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.sigmoid(self.head(x)).squeeze(1)
        return x.squeeze(0) if squeeze else x


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class SGPool(nn.Module):
    """Soft-gated pooling of a mask into one probability.

    gate = sigmoid((mask - theta) / temp); score = sum(gate * mask) /
    (sum(gate) + eps). Both theta and the (floored, softplus-reparameterized)
    temperature are learnable.
    """

    def __init__(self, theta_init: float = 0.5, temp_init: float = 0.1):
        super().__init__()
        if temp_init <= SG_TEMP_FLOOR:
            raise ConfigError(f"temperature init must exceed {SG_TEMP_FLOOR}")
        self.theta = nn.Parameter(torch.tensor(float(theta_init)))
        self.raw_temp = nn.Parameter(
            torch.tensor(_softplus_inverse(temp_init - SG_TEMP_FLOOR))
        )

    @property
    def temperature(self) -> torch.Tensor:
        return SG_TEMP_FLOOR + F.softplus(self.raw_temp)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        """(B, H, W) mask in [0, 1] -> (B,) image score."""
        squeeze = mask.dim() == 2
        if squeeze:
            mask = mask.unsqueeze(0)
        temp = self.temperature.to(mask.dtype)
        gate = torch.sigmoid((mask - self.theta.to(mask.dtype)) / temp)
        num = (gate * mask).flatten(1).sum(dim=-1)
        den = gate.flatten(1).sum(dim=-1) + SG_EPS
        out = num / den
        return out.squeeze(0) if squeeze else out


def export_mask_png(mask: torch.Tensor, image_path: str | Path, out_dir: str | Path) -> Path:
    """Write an 8-bit grayscale <stem>_mask.png; returns the written path."""
    mask = mask.detach().cpu()
    if mask.dim() != 2:
        raise InputError(f"expected a single (H, W) mask, got shape {tuple(mask.shape)}")
    arr = np.rint(mask.numpy() * 255.0).clip(0, 255).astype(np.uint8)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"{Path(image_path).stem}_mask.png"
    Image.fromarray(arr, mode="L").save(out_path)
    return out_path
