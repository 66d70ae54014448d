"""Learnable prompt construction for the frozen text encoder.

A single shared set of learnable context tokens surrounds a frozen class
token ("real" or "fake") placed exactly at the center of the sequence;
the encoder's native positional table is added before encoding. Only the
context tokens train -- the class-token table and the encoder stay frozen.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import CLASS_NAMES, tokenize_label
from .config import PromptConfig
from .errors import ConfigError


class PromptBuilder(nn.Module):
    def __init__(self, encoder: nn.Module, cfg: PromptConfig):
        super().__init__()
        cfg.validate()
        self.context_length = cfg.context_length
        self.encoder = [encoder]  # hide from module tree; encoder owned by the model
        token_dim = encoder.token_dim
        self.context = nn.Parameter(torch.randn(cfg.context_length, token_dim) * 0.02)
        self.register_buffer(
            "positional", encoder.positional_embedding(cfg.context_length + 1)
        )

    def _encoder(self):
        return self.encoder[0]

    def build_prompt(self, cls: str) -> torch.Tensor:
        """Token sequence (l + 1, token_dim) with the class token centered."""
        if self.context_length % 2:
            raise ConfigError("context length must be even")
        token_id = tokenize_label(cls)
        class_tok = self._encoder().class_token_embedding(token_id)
        half = self.context_length // 2
        ctx = self.context.to(class_tok.dtype)
        seq = torch.cat([ctx[:half], class_tok.unsqueeze(0), ctx[half:]], dim=0)
        return seq + self.positional.to(seq.dtype)

    def forward(self) -> torch.Tensor:
        """Per-class text embeddings, shape (2, dim), rows [real, fake]."""
        prompts = torch.stack([self.build_prompt(cls) for cls in CLASS_NAMES])
        return self._encoder().encode_tokens(prompts)

    text_features = forward
