"""Training loop: weakly supervised optimization with a warmup-gated
consistency term and bit-exact checkpoint/resume.

All stochasticity (shuffle order, augmentation, contrastive pair sampling)
flows through explicit torch.Generator objects whose states are stored in
every checkpoint, so resuming from epoch k reproduces the uninterrupted run
byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import Config, config_from_dict, config_to_dict
from .data import TrainSample, iter_batches
from .errors import CheckpointError, InputError, NumericalError
from .losses import bce, cpc_loss, pseudo_label_patches, total_loss
from .model import ForgeryLocalizer, build_model

CHECKPOINT_VERSION = 1


def lambda_ccs(t: float, warmup: int, total: int) -> float:
    """Consistency-loss weight at epoch t: zero through the warmup, then a
    saturating ramp 1 - exp(-(t - warmup) / (total - warmup))."""
    if t < 0:
        raise InputError(f"epoch must be non-negative, got {t}")
    if total <= warmup:
        raise InputError(f"total epochs {total} must exceed warmup {warmup}")
    if t < warmup:
        return 0.0
    return 1.0 - math.exp(-(t - warmup) / (total - warmup))


# warm-start calibration constants: patch-score quantiles picking the two
# decision thresholds (image head wants high precision against the authentic
# tail; the mask threshold targets the expected tampered-patch mass under a
# half-fake corpus with mid-range region areas), and the logit scale that
# maps one score standard deviation to ~4 logits
WARM_Q_AUTHENTIC = 0.99
WARM_Q_MASK = 0.9125
WARM_LOGIT_SCALE = 4.0


def warm_start(model: ForgeryLocalizer, samples: list[TrainSample],
               batch: int = 8) -> bool:
    """Calibrate the trainable heads from image-level label statistics.

    Multiple-instance training from a cold start has to discover which
    patches carry the tamper signal before any head can localize, and the
    top-K / soft-gated pooling objectives give almost no gradient until it
    does. This closes that gap with a closed-form initialization computed
    from one pass over the training set (image labels only, no masks):

    1. a Fisher discriminant over patch features (class-mean difference
       whitened by the pooled patch covariance) seeds the coarse per-patch
       classifier;
    2. a rank-one imprint on the aggregator FFN output layer rotates the
       fake-minus-real text direction onto the same discriminant, so the
       similarity map starts out localized;
    3. the mask decoder is set to an exact signed pass-through
       (gelu(x) - gelu(-x) = x through every stage), painting that map as
       the initial mask.

    Training then refines a localized hypothesis instead of searching for
    one. Returns False (and leaves the model untouched) when the corpus
    lacks one of the two classes.
    """
    labels = torch.tensor([float(s.label) for s in samples])
    if not ((labels > 0.5).any() and (labels <= 0.5).any()):
        return False
    was_training = model.training
    model.eval()
    feats, ctxs = [], []
    with torch.no_grad():
        text_raw = model.prompt()
        for images, _ in iter_batches(samples, batch, shuffle=False):
            out = model(images)
            feats.append(out.enhanced)
            ctxs.append(model.reasoning.pool(out.enhanced))
        feats = torch.cat(feats)  # (N, n, d)
        ctx = torch.cat(ctxs)  # (N, d)
        d = feats.shape[-1]

        # Fisher discriminant in patch-feature space
        mu_fake = feats[labels > 0.5].mean(dim=(0, 1))
        mu_real = feats[labels <= 0.5].mean(dim=(0, 1))
        flat = feats.reshape(-1, d)
        cov = torch.cov(flat.T) + 1e-4 * torch.eye(d, dtype=flat.dtype)
        w = torch.linalg.solve(cov, mu_fake - mu_real)
        w = w / w.norm().clamp_min(1e-12)
        scores = flat @ w
        alpha = WARM_LOGIT_SCALE / scores.std().clamp_min(1e-6)
        c_image = torch.quantile(
            feats[labels <= 0.5].reshape(-1, d) @ w, WARM_Q_AUTHENTIC)
        c_mask = torch.quantile(scores, WARM_Q_MASK)

        head = model.coarse_head.classifier
        head.weight.copy_((alpha * w).unsqueeze(0))
        head.bias.copy_((-alpha * c_image).reshape(1))

        # steer the text contrast onto the discriminant: with
        # W2 = (dt* - dt) outer dbar / |dbar|^2 the FFN difference between
        # the two class rows becomes dt* - dt, so fake-minus-real ~= dt*
        ffn = model.reasoning.aggregator.ffn
        t_real, t_fake = text_raw[0], text_raw[1]
        hidden = lambda t: torch.nn.functional.gelu(ffn[0](ctx + t))  # noqa: E731
        dbar = (hidden(t_fake) - hidden(t_real)).mean(dim=0)
        denom = dbar.dot(dbar)
        if denom > 1e-12:
            dt_star = math.sqrt(d) * w
            ffn[-1].weight.copy_(
                torch.outer(dt_star - (t_fake - t_real), dbar / denom))
            ffn[-1].bias.zero_()

        # decoder as signed pass-through; needs a channel pair to carry
        # gelu(x) and gelu(-x) through the nonlinearity
        dec = model.decoder
        if all(conv.weight.shape[0] >= 2 for conv in dec.stage_convs):
            for i, conv in enumerate(dec.stage_convs):
                conv.weight.zero_()
                conv.bias.zero_()
                conv.weight[0, 0, 1, 1] = 1.0
                if i == 0:
                    conv.weight[1, 0, 1, 1] = -1.0
                else:
                    conv.weight[0, 1, 1, 1] = -1.0
                    conv.weight[1, 0, 1, 1] = -1.0
                    conv.weight[1, 1, 1, 1] = 1.0
            dec.head.weight.zero_()
            dec.head.weight[0, 0, 0, 0] = alpha
            if dec.stage_convs:
                dec.head.weight[0, 1, 0, 0] = -alpha
            dec.head.bias.fill_(float(-alpha * c_mask))
    if was_training:
        model.train()
    return True


@dataclass
class EpochStats:
    epoch: int
    lam: float
    coarse: float
    fine: float
    cpc: float
    total: float
    degenerate_batches: int = 0

    def log_line(self) -> str:
        return ("epoch=%04d lambda=%.12e coarse=%.12e fine=%.12e "
                "cpc=%.12e total=%.12e" %
                (self.epoch, self.lam, self.coarse, self.fine, self.cpc,
                 self.total))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)


class Trainer:
    def __init__(self, model: ForgeryLocalizer, cfg: Config):
        self.model = model
        self.cfg = cfg
        tc = cfg.train
        self.optimizer = torch.optim.AdamW(
            model.trainable_parameters(), lr=tc.lr, betas=(0.9, 0.999),
            weight_decay=tc.weight_decay)
        self.data_gen = torch.Generator().manual_seed(tc.seed)
        self.cpc_gen = torch.Generator().manual_seed(tc.seed + 1)
        self.epoch = 0

    # -- single epoch ---------------------------------------------------------

    def _batch_losses(self, images, labels, lam):
        out = self.model(images)
        tc, device = self.cfg.train, images.device
        zero = torch.zeros((), device=device)

        l_coarse = bce(out.coarse_prob, labels).mean() if tc.use_coarse_loss else zero
        l_fine = bce(out.fine_prob, labels).mean() if tc.use_fine_loss else zero

        l_cpc = zero
        degenerate = 0
        fake_idx = (labels > 0.5).nonzero(as_tuple=True)[0]
        if tc.use_cpc_loss and lam > 0 and fake_idx.numel() > 0:
            terms = []
            for i in fake_idx.tolist():
                pseudo = pseudo_label_patches(
                    out.mask[i].detach(), self.model.patch_size, self.cfg.cpc)
                result = cpc_loss(out.enhanced[i], pseudo, self.cfg.cpc,
                                  generator=self.cpc_gen)
                if result.degenerate:
                    degenerate += 1
                terms.append(result.loss)
            l_cpc = torch.stack(terms).mean()

        total = total_loss(l_coarse, l_fine, l_cpc, lam)
        return total, l_coarse, l_fine, l_cpc, degenerate

    def train_epoch(self, samples: list[TrainSample]) -> EpochStats:
        if samples and not isinstance(samples[0], TrainSample):
            raise InputError("trainer accepts TrainSample lists only")
        tc = self.cfg.train
        lam = lambda_ccs(self.epoch, tc.warmup, tc.epochs)
        self.model.train()

        sums = {"coarse": 0.0, "fine": 0.0, "cpc": 0.0, "total": 0.0}
        seen = 0
        degenerate = 0
        batches = iter_batches(samples, tc.batch, shuffle=not tc.deterministic,
                               generator=self.data_gen,
                               augment_samples=tc.augment)
        for batch_idx, (images, labels) in enumerate(batches):
            total, lc, lf, lcpc, deg = self._batch_losses(images, labels, lam)
            values = {"coarse": lc, "fine": lf, "cpc": lcpc, "total": total}
            bad = {k: float(v.detach()) for k, v in values.items()
                   if not torch.isfinite(v.detach())}
            if bad:
                raise NumericalError(
                    f"non-finite loss at epoch {self.epoch} batch {batch_idx}",
                    diagnostics={"epoch": self.epoch, "batch": batch_idx,
                                 "components": bad})
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()

            n = images.shape[0]
            seen += n
            degenerate += deg
            for k, v in values.items():
                sums[k] += float(v.detach()) * n

        stats = EpochStats(self.epoch, lam,
                           sums["coarse"] / seen, sums["fine"] / seen,
                           sums["cpc"] / seen, sums["total"] / seen,
                           degenerate)
        self.epoch += 1
        return stats

    def fit(self, samples, epochs: int | None = None,
            log_path: str | Path | None = None,
            checkpoint_dir: str | Path | None = None) -> TrainResult:
        tc = self.cfg.train
        target = tc.epochs if epochs is None else epochs
        result = TrainResult()
        if self.epoch == 0:
            warm_start(self.model, samples)
        log_fh = open(log_path, "a") if log_path else None
        try:
            while self.epoch < target:
                stats = self.train_epoch(samples)
                result.history.append(stats)
                line = stats.log_line()
                result.log_lines.append(line)
                if log_fh:
                    log_fh.write(line + "\n")
                    log_fh.flush()
                if checkpoint_dir and (
                        self.epoch % tc.checkpoint_every == 0
                        or self.epoch == target):
                    self.save(Path(checkpoint_dir) / f"epoch_{self.epoch:04d}.pt")
                if checkpoint_dir:
                    self.save(Path(checkpoint_dir) / "last.pt")
        finally:
            if log_fh:
                log_fh.close()
        return result

    # -- checkpointing --------------------------------------------------------

    def save(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "meta": {
                "dim": self.model.dim,
                "patch_size": self.model.patch_size,
                "epoch": self.epoch,
                "backend": self.cfg.encoder.backend,
            },
            "config": config_to_dict(self.cfg),
            "model_state": self.model.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "rng": {
                "data": self.data_gen.get_state(),
                "cpc": self.cpc_gen.get_state(),
                "torch": torch.get_rng_state(),
            },
        }
        torch.save(payload, path)

    def load(self, path: str | Path):
        payload = load_checkpoint_payload(path)
        meta = payload["meta"]
        if meta["dim"] != self.model.dim or meta["patch_size"] != self.model.patch_size:
            raise CheckpointError(
                f"checkpoint geometry (dim={meta['dim']}, patch={meta['patch_size']}) "
                f"does not match model (dim={self.model.dim}, "
                f"patch={self.model.patch_size})")
        self.model.load_state_dict(payload["model_state"])
        self.optimizer.load_state_dict(payload["optimizer_state"])
        self.data_gen.set_state(payload["rng"]["data"])
        self.cpc_gen.set_state(payload["rng"]["cpc"])
        torch.set_rng_state(payload["rng"]["torch"])
        self.epoch = meta["epoch"]


def load_checkpoint_payload(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # unreadable / truncated file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload['format_version']} "
            f"(expected {CHECKPOINT_VERSION})")
    for key in ("meta", "config", "model_state", "optimizer_state", "rng"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} is missing '{key}'")
    return payload


def restore_trainer(path: str | Path) -> Trainer:
    """Rebuild model + trainer entirely from a checkpoint."""
    payload = load_checkpoint_payload(path)
    cfg = config_from_dict(payload["config"])
    model = build_model(cfg)
    trainer = Trainer(model, cfg)
    trainer.load(path)
    return trainer
