"""Frozen image/text encoder backends.

The stub backend is a seeded, deterministic stand-in for a pre-trained
vision-language encoder: a fixed random patch projection followed by two
frozen self-attention blocks. It exercises the same interfaces (patch
tokens in, class-text embeddings out) at desk scale, so everything
downstream trains and tests without external weights.

Encoder parameters never receive gradients; gradients still flow
*through* the text path into upstream learnable token embeddings.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import ConfigError, InputError

LABEL_TOKENS = {"real": 0, "fake": 1}
CLASS_NAMES = ("real", "fake")


def tokenize_label(label: str) -> int:
    """Map a class string to its fixed token id. Case-sensitive."""
    try:
        return LABEL_TOKENS[label]
    except (KeyError, TypeError):
        raise InputError(f"unknown label {label!r}; expected one of {CLASS_NAMES}")


def patch_grid(side: int, patch_size: int) -> tuple[int, int]:
    if side % patch_size:
        raise ConfigError(f"image side {side} not divisible by patch size {patch_size}")
    g = side // patch_size
    return (g, g)


def as_grid(grid) -> tuple[int, int]:
    """Normalize an int (square side) or (rows, cols) pair to a tuple."""
    if isinstance(grid, int):
        return (grid, grid)
    rows, cols = grid
    return (int(rows), int(cols))


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic fixed sin/cos position table, shape (length, dim)."""
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    half = (dim + 1) // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1))
    angles = position * freq  # (length, half)
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(angles)[:, : table[:, 0::2].shape[1]]
    table[:, 1::2] = torch.cos(angles)[:, : table[:, 1::2].shape[1]]
    return table


def sinusoidal_grid_positions(grid: tuple[int, int], dim: int, dtype=torch.float32) -> torch.Tensor:
    """2D position table for a patch grid, shape (rows*cols, dim)."""
    rows, cols = grid
    half = dim // 2
    row_tab = sinusoidal_positions(rows, half, dtype)
    col_tab = sinusoidal_positions(cols, dim - half, dtype)
    out = torch.zeros(rows * cols, dim, dtype=dtype)
    for r in range(rows):
        out[r * cols : (r + 1) * cols, :half] = row_tab[r]
        out[r * cols : (r + 1) * cols, half:] = col_tab
    return out


def _seeded_uniform(shape, scale, gen):
    return (torch.rand(shape, generator=gen) * 2 - 1) * scale


class _FrozenBlock(nn.Module):
    """Pre-norm self-attention + FFN block with fixed random weights.

    The attention residual is damped (and disabled on the image path):
    random attention is near-uniform, so at any real strength it smears an
    image-wide average into every token, which both buries the per-patch
    signal and hands image-level shortcuts to the downstream heads. The FFN
    branch is per-token and kept stronger: it cannot mix across positions,
    it only enriches each token nonlinearly.
    """

    FFN_GAIN = 0.25

    def __init__(self, dim: int, heads: int, gen: torch.Generator,
                 attn_gain: float = 0.1):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"stub dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.attn_gain = attn_gain
        scale = 1.0 / math.sqrt(dim)
        self.qkv = nn.Parameter(_seeded_uniform((dim, 3 * dim), scale, gen))
        self.proj = nn.Parameter(_seeded_uniform((dim, dim), scale, gen))
        self.ffn_in = nn.Parameter(_seeded_uniform((dim, 2 * dim), scale, gen))
        self.ffn_out = nn.Parameter(_seeded_uniform((2 * dim, dim), scale, gen))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):  # x: (B, L, d)
        if self.attn_gain:
            h = self.norm1(x)
            q, k, v = torch.chunk(h @ self.qkv, 3, dim=-1)
            B, L, d = q.shape
            dh = d // self.heads
            q = q.view(B, L, self.heads, dh).transpose(1, 2)
            k = k.view(B, L, self.heads, dh).transpose(1, 2)
            v = v.view(B, L, self.heads, dh).transpose(1, 2)
            attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
            h = (attn @ v).transpose(1, 2).reshape(B, L, d) @ self.proj
            x = x + self.attn_gain * h
        x = x + self.FFN_GAIN * (F.gelu(self.norm2(x) @ self.ffn_in) @ self.ffn_out)
        return x


class StubEncoder(nn.Module):
    """Deterministic frozen encoder pair (image and text paths).

    Image path: 3x3 conv stem + p x p patch projection + 2D sin/cos
    positions + 2 frozen attention blocks -> (n, dim) patch features.
    Text path: embedded token sequence + 2 frozen attention blocks +
    mean pool + output projection -> (dim,) per sequence.
    """

    STEM_CHANNELS = 8

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        if cfg.backend != "stub":
            raise ConfigError(f"StubEncoder built with backend={cfg.backend!r}")
        self.patch_size = cfg.patch_size
        self.dim = cfg.dim
        self.token_dim = cfg.dim
        self.seed = cfg.seed
        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.dim
        # 3x3 high-pass conv stem + GELU ahead of patchify: rectified local
        # responses survive patch averaging, so the tokens carry texture
        # energy and not only patch colour (a bare linear projection washes
        # fine detail out by sqrt(#pixels)). Kernels are zero-sum per input
        # channel -- flat colour reads as 0 -- and scaled so pixel-scale
        # texture lands in the curved part of the GELU, where it rectifies
        # into a positive patch mean.
        stem = _seeded_uniform((self.STEM_CHANNELS, 3, 3, 3), 1.0, gen)
        stem = stem - stem.mean(dim=(2, 3), keepdim=True)
        per_channel = stem.flatten(1).norm(dim=1).view(-1, 1, 1, 1)
        self.stem_kernel = nn.Parameter(16.0 * stem / per_channel)
        in_dim = (3 + self.STEM_CHANNELS) * cfg.patch_size * cfg.patch_size
        self.patch_proj = nn.Parameter(_seeded_uniform((in_dim, d), 1.0 / math.sqrt(in_dim), gen))
        # image path: attention off (see _FrozenBlock) -- patch tokens stay
        # strictly local; text path: sequences are a handful of tokens and
        # the class/context interaction is the point, so attention stays on
        self.image_blocks = nn.ModuleList(
            [_FrozenBlock(d, 4, gen, attn_gain=0.0) for _ in range(2)])
        self.text_blocks = nn.ModuleList(
            [_FrozenBlock(d, 4, gen, attn_gain=0.25) for _ in range(2)])
        self.text_out = nn.Parameter(_seeded_uniform((d, d), 1.0 / math.sqrt(d), gen))
        self.class_embed = nn.Parameter(_seeded_uniform((len(CLASS_NAMES), d), 1.0, gen))
        self.requires_grad_(False)
        self.eval()

    # -- image path ---------------------------------------------------------

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) in [0, 1] -> patch features (B, n, dim)."""
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise InputError(f"expected (B, 3, S, S) image tensor, got {tuple(images.shape)}")
        B, _, H, W = images.shape
        if H != W:
            raise InputError(f"expected square images, got {H}x{W}")
        if not torch.isfinite(images).all():
            raise InputError("image contains non-finite values")
        if images.min() < 0 or images.max() > 1:
            raise InputError("image values must lie in [0, 1]")
        grid = patch_grid(H, self.patch_size)
        p = self.patch_size
        local = F.gelu(F.conv2d(images, self.stem_kernel.to(images.dtype), padding=1))
        # 0.3: keeps the texture channels from drowning out plain colour in
        # the patch projection (8 rectified channels vs 3 image channels)
        x = torch.cat([images, 0.3 * local], dim=1)  # (B, 3 + stem, S, S)
        c = x.shape[1]
        x = x.unfold(2, p, p).unfold(3, p, p)  # (B, c, g, g, p, p)
        x = x.permute(0, 2, 3, 1, 4, 5).reshape(B, grid[0] * grid[1], c * p * p)
        x = x @ self.patch_proj.to(x.dtype)
        x = x + sinusoidal_grid_positions(grid, self.dim, x.dtype).to(x.device)
        for block in self.image_blocks:
            x = block(x)
        return x.squeeze(0) if squeeze else x

    # -- text path ----------------------------------------------------------

    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Embedded token sequence (L, d) or (B, L, d) -> (d,) / (B, d).

        Weights are frozen but the op is differentiable in ``tokens``.
        """
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if tokens.dim() != 3 or tokens.shape[1] == 0:
            raise InputError(f"expected non-empty token sequence, got {tuple(tokens.shape)}")
        if tokens.shape[-1] != self.token_dim:
            raise ConfigError(
                f"token dim {tokens.shape[-1]} does not match encoder dim {self.token_dim}"
            )
        x = tokens
        for block in self.text_blocks:
            x = block(x)
        out = x.mean(dim=1) @ self.text_out.to(x.dtype)
        return out.squeeze(0) if squeeze else out

    def class_token_embedding(self, token) -> torch.Tensor:
        """Embedding for a class, given either its label string or token id."""
        token_id = tokenize_label(token) if isinstance(token, str) else token
        if not 0 <= token_id < self.class_embed.shape[0]:
            raise InputError(f"token id {token_id} out of range")
        return self.class_embed[token_id]

    def positional_embedding(self, length: int) -> torch.Tensor:
        return sinusoidal_positions(length, self.token_dim)

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def resample_token_grid(tokens: torch.Tensor, target_grid) -> torch.Tensor:
    """Bilinearly resample (B, n0, d) square-grid tokens to a new grid."""
    if isinstance(target_grid, int):
        target_grid = (target_grid, target_grid)
    squeeze = tokens.dim() == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    B, n0, d = tokens.shape
    g0 = int(round(math.sqrt(n0)))
    if g0 * g0 != n0:
        raise InputError(f"token count {n0} is not a square grid")
    x = tokens.transpose(1, 2).reshape(B, d, g0, g0)
    x = F.interpolate(x, size=target_grid, mode="bilinear", align_corners=False)
    out = x.reshape(B, d, target_grid[0] * target_grid[1]).transpose(1, 2)
    return out.squeeze(0) if squeeze else out


class PretrainedEncoder(nn.Module):
    """Plugin wrapper around externally trained encoder weights.

    The checkpoint must hold a pickled ``nn.Module`` exposing the same
    protocol as :class:`StubEncoder` (``encode_image``, ``encode_tokens``,
    ``class_token_embedding``, ``positional_embedding``, ``dim``,
    ``token_dim``). Its native feature width replaces ``cfg.dim``; its
    patch-token grid is bilinearly resampled to the grid implied by
    ``cfg.patch_size``.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        if not cfg.checkpoint:
            raise ConfigError("pretrained backend requires encoder.checkpoint path")
        path = Path(cfg.checkpoint)
        if not path.exists():
            raise ConfigError(f"encoder checkpoint not found: {path}")
        # trusted local file; pickled module, not a bare state dict
        inner = torch.load(path, map_location="cpu", weights_only=False)
        for attr in ("encode_image", "encode_tokens", "class_token_embedding",
                     "positional_embedding", "dim", "token_dim"):
            if not hasattr(inner, attr):
                raise ConfigError(f"encoder checkpoint lacks required attribute {attr!r}")
        self.inner = inner
        self.inner.requires_grad_(False)
        self.inner.eval()
        self.patch_size = cfg.patch_size
        self.dim = int(inner.dim)  # native width wins; cfg.dim ignored
        self.token_dim = int(inner.token_dim)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        grid = patch_grid(images.shape[-1], self.patch_size)
        tokens = self.inner.encode_image(images)
        out = resample_token_grid(tokens, grid)
        return out.squeeze(0) if squeeze else out

    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.inner.encode_tokens(tokens)

    def class_token_embedding(self, token_id: int) -> torch.Tensor:
        return self.inner.class_token_embedding(token_id)

    def positional_embedding(self, length: int) -> torch.Tensor:
        return self.inner.positional_embedding(length)

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.inner.named_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.backend == "stub":
        return StubEncoder(cfg)
    if cfg.backend == "pretrained":
        return PretrainedEncoder(cfg)
    raise ConfigError(f"unknown encoder backend {cfg.backend!r}")
