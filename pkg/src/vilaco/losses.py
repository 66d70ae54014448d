"""Training objectives.

Image-level BCE for both heads, an InfoNCE-style contrastive patch
consistency (CPC) term over mask-derived pseudo-labels, and the weighted
total. CPC pseudo-labels come from average-pooling the predicted mask to
the patch grid: responses strictly above tau_fg are tampered, strictly
below tau_bg authentic, anything between is left out. For every sampled
ordered same-type pair, the anchor's softmax denominator holds its
positive plus all opposite-type patches; features are L2-normalized so
only cosine geometry matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import CPCConfig
from .errors import InputError

PROB_EPS = 1e-7


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy with probability clamping."""
    pred = torch.as_tensor(pred).clamp(PROB_EPS, 1.0 - PROB_EPS)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    return -(target * pred.log() + (1.0 - target) * (1.0 - pred).log())


@dataclass
class PatchPseudoLabels:
    tampered_idx: torch.Tensor  # long indices into the flattened patch grid
    authentic_idx: torch.Tensor
    responses: torch.Tensor  # (n,) mean mask value per patch footprint


def pseudo_label_patches(mask: torch.Tensor, patch_size: int,
                         cfg: CPCConfig) -> PatchPseudoLabels:
    """Assign tampered/authentic bins from a predicted (H, W) mask."""
    if mask.dim() != 2:
        raise InputError(f"expected (H, W) mask, got shape {tuple(mask.shape)}")
    if mask.shape[0] % patch_size or mask.shape[1] % patch_size:
        raise InputError(
            f"mask shape {tuple(mask.shape)} not divisible by patch size {patch_size}"
        )
    responses = F.avg_pool2d(mask.unsqueeze(0).unsqueeze(0), patch_size).reshape(-1)
    tampered = (responses > cfg.tau_fg).nonzero(as_tuple=True)[0]
    authentic = (responses < cfg.tau_bg).nonzero(as_tuple=True)[0]
    return PatchPseudoLabels(tampered, authentic, responses)


@dataclass
class CPCResult:
    loss: torch.Tensor
    pairs_used: int
    degenerate: bool  # too few patches in either bin; loss forced to 0


def _decode_ordered_pairs(pair_ids: torch.Tensor, members: torch.Tensor):
    """Map flat ids over ordered pairs (i != j) of `members` to index pairs."""
    m = members.shape[0]
    a = pair_ids // (m - 1)
    r = pair_ids % (m - 1)
    b = torch.where(r >= a, r + 1, r)
    return members[a], members[b]


def cpc_loss(features: torch.Tensor, labels: PatchPseudoLabels, cfg: CPCConfig,
             generator: torch.Generator | None = None) -> CPCResult:
    """Symmetric InfoNCE over pseudo-labeled patch features.

    features: (n, d). Needs >= 2 patches in both bins, else returns a
    zero loss flagged degenerate. At most cfg.max_pairs ordered pairs are
    scored, sampled without replacement using `generator`.
    """
    tam, auth = labels.tampered_idx, labels.authentic_idx
    zero = features.sum() * 0.0  # keeps the graph connected for autograd
    if tam.numel() < 2 or auth.numel() < 2:
        return CPCResult(zero, 0, True)

    unit = F.normalize(features, dim=-1, eps=1e-12)
    sims = (unit @ unit.transpose(-2, -1)) / cfg.gamma

    n_tam_pairs = tam.numel() * (tam.numel() - 1)
    n_auth_pairs = auth.numel() * (auth.numel() - 1)
    total = n_tam_pairs + n_auth_pairs
    if total > cfg.max_pairs:
        if generator is None:
            generator = torch.Generator()
        chosen = torch.randperm(total, generator=generator)[: cfg.max_pairs]
    else:
        chosen = torch.arange(total)

    terms = []
    for same, other, lo, hi in (
        (tam, auth, 0, n_tam_pairs),
        (auth, tam, n_tam_pairs, total),
    ):
        ids = chosen[(chosen >= lo) & (chosen < hi)] - lo
        if ids.numel() == 0:
            continue
        anchors, positives = _decode_ordered_pairs(ids, same)
        pos_logit = sims[anchors, positives].unsqueeze(1)  # (P, 1)
        neg_logits = sims[anchors][:, other]  # (P, |other|)
        logits = torch.cat([pos_logit, neg_logits], dim=1)
        terms.append(torch.logsumexp(logits, dim=1) - pos_logit.squeeze(1))
    loss = torch.cat(terms).mean()
    return CPCResult(loss, int(chosen.numel()), False)


def total_loss(l_coarse: torch.Tensor, l_fine: torch.Tensor, l_cpc: torch.Tensor,
               lam: float) -> torch.Tensor:
    """Weighted sum of the three batch-averaged terms."""
    if not 0 <= lam < 1:
        raise InputError(f"consistency weight must lie in [0, 1), got {lam}")
    return l_coarse + l_fine + lam * l_cpc
