"""Full weakly supervised forgery localizer.

Frozen encoder -> LGS adapter -> text-guided reasoning -> dual heads.
Only the adapter, prompt context, reasoning block, coarse classifier,
mask decoder, and SG pooling parameters train; the backbone (including
the class-token table) stays frozen and is excluded from optimization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import build_encoder, patch_grid
from .config import Config
from .heads import CoarseHead, MaskDecoder, SGPool, similarity_map
from .lgs_adapter import LGSAdapter
from .prompting import PromptBuilder
from .reasoning import ReasoningModule


@dataclass
class ModelOutput:
    coarse_prob: torch.Tensor  # (B,)
    fine_prob: torch.Tensor  # (B,)
    mask: torch.Tensor  # (B, H, W) in [0, 1]
    patch_map: torch.Tensor  # (B, rows, cols) pre-decoder similarity
    patch_probs: torch.Tensor  # (B, n) coarse per-patch probabilities
    enhanced: torch.Tensor  # (B, n, d) text-enhanced patch features
    text_raw: torch.Tensor  # (2, d)
    text_tamper: torch.Tensor  # (B, 2, d)
    grid: tuple


class ForgeryLocalizer(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = build_encoder(cfg.encoder)
        dim = self.backbone.dim
        self.adapter = LGSAdapter(dim, cfg.adapter)
        self.prompt = PromptBuilder(self.backbone, cfg.prompt)
        self.reasoning = ReasoningModule(dim, cfg.reasoning)
        self.coarse_head = CoarseHead(dim, cfg.head.k_ratio)
        self.decoder = MaskDecoder(cfg.encoder.patch_size, cfg.head.decoder_channels)
        self.sg_pool = SGPool(cfg.head.sg_theta_init, cfg.head.sg_temp_init)

    @property
    def patch_size(self) -> int:
        return self.backbone.patch_size

    @property
    def dim(self) -> int:
        return self.backbone.dim

    def forward(self, images: torch.Tensor) -> ModelOutput:
        if images.dim() == 3:  # single image -> batch of one
            images = images.unsqueeze(0)
        grid = patch_grid(images.shape[-1], self.patch_size)
        raw = self.backbone.encode_image(images)
        spatial = self.adapter(raw, grid)
        text_raw = self.prompt()
        enhanced, text_tamper = self.reasoning(spatial, text_raw)
        coarse_prob, patch_probs = self.coarse_head(enhanced)
        patch_map = similarity_map(enhanced, text_tamper, grid)
        mask = self.decoder(patch_map)
        fine_prob = self.sg_pool(mask)
        return ModelOutput(coarse_prob, fine_prob, mask, patch_map, patch_probs,
                           enhanced, text_raw, text_tamper, grid)

    def trainable_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named optimizer groups; the frozen backbone is not among them."""
        return {
            "adapter": list(self.adapter.parameters()),
            "prompt": [self.prompt.context],
            "reasoning": list(self.reasoning.parameters()),
            "coarse": list(self.coarse_head.parameters()),
            "decoder": list(self.decoder.parameters()),
            "sg": [self.sg_pool.theta, self.sg_pool.raw_temp],
        }

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = []
        for group in self.trainable_groups().values():
            params.extend(group)
        return params

    def frozen_checksum(self) -> str:
        return self.backbone.parameter_checksum()


def build_model(cfg: Config, seed: int | None = None) -> ForgeryLocalizer:
    """Construct a model with seeded trainable-parameter initialization."""
    if seed is None:
        seed = cfg.train.seed
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ForgeryLocalizer(cfg)
    return model
