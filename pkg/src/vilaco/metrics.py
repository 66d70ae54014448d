"""Evaluation metrics: pixel F1, image F1, their harmonic combination, and
IoU, plus the dataset-level evaluate() driver.

Conventions (fixed, not tunable): predictions binarize at 0.5; a prediction
with zero true positives but a nonzero union of positives scores F1 = 0; an
image whose ground truth and prediction are both empty is a vacuous match
and is excluded from pixel-F1 averaging (which runs over fake images only).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import EvalSample
from .errors import InputError


def _binarize(t: torch.Tensor) -> torch.Tensor:
    return (t > 0.5).to(torch.float64)


def _confusion(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = _binarize(pred)
    t = _binarize(target)
    tp = float((p * t).sum())
    fp = float((p * (1 - t)).sum())
    fn = float(((1 - p) * t).sum())
    return tp, fp, fn


def f1_from_counts(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0  # vacuously perfect: nothing predicted, nothing to find
    return 2 * tp / denom


def pixel_f1(pred_mask: torch.Tensor, true_mask: torch.Tensor) -> float:
    """F1 between binarized masks for a single image."""
    return f1_from_counts(*_confusion(pred_mask, true_mask))


def iou(pred_mask: torch.Tensor, true_mask: torch.Tensor) -> float:
    tp, fp, fn = _confusion(pred_mask, true_mask)
    union = tp + fp + fn
    if union == 0:
        return 1.0
    return tp / union


def image_f1(pairs) -> float:
    """Dataset-level F1 over (predicted_prob, label) pairs; fake positive."""
    tp = fp = fn = 0
    for prob, label in pairs:
        pred = float(prob) > 0.5
        truth = int(label) == 1
        if pred and truth:
            tp += 1
        elif pred and not truth:
            fp += 1
        elif not pred and truth:
            fn += 1
    return f1_from_counts(tp, fp, fn)


def combined_f1(p_f1: float, i_f1: float) -> float:
    """Harmonic mean; zero if either component is zero."""
    for v, name in ((p_f1, "pixel F1"), (i_f1, "image F1")):
        if not 0.0 <= v <= 1.0:
            raise InputError(f"{name} must lie in [0, 1], got {v}")
    if p_f1 == 0.0 or i_f1 == 0.0:
        return 0.0
    return 2 * p_f1 * i_f1 / (p_f1 + i_f1)


# -- dataset evaluation -------------------------------------------------------


@dataclass
class ImageRecord:
    image_id: str
    label: int
    coarse_prob: float
    fine_prob: float
    pixel_f1: float | None  # None for real images
    iou: float | None


@dataclass
class EvalReport:
    pixel_f1: float
    image_f1: float
    combined_f1: float
    mean_iou_fake: float
    num_images: int
    num_fake: int
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pixel_f1": self.pixel_f1,
            "image_f1": self.image_f1,
            "combined_f1": self.combined_f1,
            "mean_iou_fake": self.mean_iou_fake,
            "num_images": self.num_images,
            "num_fake": self.num_fake,
            "per_image": [vars(r) for r in self.per_image],
        }

    def save_json(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def table(self) -> str:
        rows = [("metric", "value"),
                ("pixel F1 (fake imgs)", f"{self.pixel_f1:.4f}"),
                ("image F1", f"{self.image_f1:.4f}"),
                ("combined F1", f"{self.combined_f1:.4f}"),
                ("mean IoU (fake imgs)", f"{self.mean_iou_fake:.4f}"),
                ("images", str(self.num_images)),
                ("fake images", str(self.num_fake))]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value}" for name, value in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


@torch.no_grad()
def evaluate(model, samples: list[EvalSample], batch_size: int = 8) -> EvalReport:
    if not samples:
        raise InputError("evaluate() needs at least one sample")
    model.eval()
    records = []
    image_pairs = []
    pf1s, ious = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = torch.stack([s.image for s in chunk])
        out = model(images)
        for j, sample in enumerate(chunk):
            coarse = float(out.coarse_prob[j])
            fine = float(out.fine_prob[j])
            image_pairs.append((coarse, sample.label))
            pf = ji = None
            if sample.label == 1:
                pred = out.mask[j]
                true = sample.mask.to(pred.dtype)
                tp, fp, fn = _confusion(pred, true)
                if 2 * tp + fp + fn > 0:  # skip vacuous (both-empty) images
                    pf = f1_from_counts(tp, fp, fn)
                    pf1s.append(pf)
                ji = iou(pred, true)
                ious.append(ji)
            records.append(ImageRecord(sample.image_id, sample.label,
                                       coarse, fine, pf, ji))
    p = sum(pf1s) / len(pf1s) if pf1s else 0.0
    i = image_f1(image_pairs)
    mean_iou = sum(ious) / len(ious) if ious else 0.0
    return EvalReport(p, i, combined_f1(p, i), mean_iou,
                      len(samples), len(ious), records)
