"""Synthetic forgery corpus and dataset loading.

generate_corpus writes procedurally textured 256x256 PNGs, tampers a
controlled fraction of them (splice from a donor, in-image copy-move, or
local blur), saves the exact edit footprint as the ground-truth mask, and
records everything in manifest.tsv. Loading is split-aware: the training
split yields TrainSample (image + label only; there is no mask field to
leak), the eval split yields EvalSample with masks attached.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFilter

from .config import IMAGE_SIZE, GenSpec
from .errors import DataError, InputError


@dataclass
class TrainSample:
    """Weak-supervision view of one image: no mask, by construction."""

    image: torch.Tensor  # (3, H, W) float in [0, 1]
    label: int  # 0 real, 1 fake
    image_id: str = ""


@dataclass
class EvalSample:
    image: torch.Tensor
    label: int
    mask: torch.Tensor  # (H, W) float {0, 1}
    image_id: str = ""


# -- procedural image synthesis ----------------------------------------------


def _random_polygon_mask(rng: np.random.Generator, size: int, radius: float,
                         center=None) -> np.ndarray:
    k = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0, 2 * np.pi, k))
    radii = radius * rng.uniform(0.6, 1.3, k)
    if center is None:
        margin = radius * 1.1
        center = rng.uniform(margin, size - margin, 2)
    xs = center[0] + radii * np.cos(angles)
    ys = center[1] + radii * np.sin(angles)
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon(list(zip(xs.tolist(), ys.tolist())), fill=255)
    return np.asarray(canvas) > 0


def _region_mask(rng: np.random.Generator, size: int, area_range) -> np.ndarray:
    """Polygonal region whose pixel area fraction lands inside area_range."""
    lo, hi = area_range
    for _ in range(200):
        target = rng.uniform(lo, hi)
        radius = np.sqrt(target / np.pi) * size
        mask = _random_polygon_mask(rng, size, radius)
        if lo <= mask.mean() <= hi:
            return mask
    raise DataError(f"could not sample a region with area in {area_range}")


# Palette design. Authentic content is drawn from a muted, nearly
# channel-correlated family, so every tamper op leaves a photometric trace
# that a small model can pick up from a handful of images: spliced material
# comes from a saturated donor palette, copy-moved material is re-lit
# (illumination mismatch), and inpainted material loses its texture noise
# under a wide blur.


def _muted_color(rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.2, 0.75)
    return np.clip(base + rng.uniform(-0.06, 0.06, 3), 0, 1)


def _vivid_color(rng: np.random.Generator) -> np.ndarray:
    # warm band only, so donor material shares one photometric signature
    hue = rng.uniform(-0.06, 0.10) % 1.0
    rgb = colorsys.hsv_to_rgb(hue, rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0))
    return np.asarray(rgb)


def _base_image(rng: np.random.Generator, size: int,
                color_fn=_muted_color, noise: float = 0.05) -> np.ndarray:
    c0, c1 = color_fn(rng), color_fn(rng)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    t = xx * np.cos(angle) + yy * np.sin(angle)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[None, None, :] + t[..., None] * (c1 - c0)[None, None, :]
    for _ in range(int(rng.integers(5, 10))):
        color = color_fn(rng)
        blob = _random_polygon_mask(rng, size, rng.uniform(0.05, 0.18) * size)
        img[blob] = 0.75 * color + 0.25 * img[blob]
    img += rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1)


def _apply_splice(img, rng, size, area_range):
    # donor material is rendered clean (vivid palette, hardly any grain), so
    # the pasted region differs from the host in colour and in texture
    donor = _base_image(rng, size, color_fn=_vivid_color, noise=0.01)
    region = _region_mask(rng, size, area_range)
    out = img.copy()
    out[region] = donor[region]
    return out, region


def _apply_copy_move(img, rng, size, area_range):
    for _ in range(50):
        region = _region_mask(rng, size, area_range)
        rows = np.any(region, axis=1).nonzero()[0]
        cols = np.any(region, axis=0).nonzero()[0]
        r0, r1, c0, c1 = rows[0], rows[-1], cols[0], cols[-1]
        dy = int(rng.integers(-r0, size - 1 - r1 + 1))
        dx = int(rng.integers(-c0, size - 1 - c1 + 1))
        if abs(dy) + abs(dx) >= size // 6:
            break
    shifted = np.roll(region, (dy, dx), axis=(0, 1))
    out = img.copy()
    # The duplicated patch never matches the lighting of its new spot: the
    # re-light both brightens it and compresses its contrast, the washed-out
    # look of a pasted-over area.
    moved = np.roll(img, (dy, dx), axis=(0, 1))[shifted]
    out[shifted] = np.clip(0.4 * moved + 0.55, 0, 1)
    return out, shifted


def _apply_inpaint_blur(img, rng, size, area_range):
    # Wide-radius blur: besides erasing texture, it drags surrounding
    # content deep into the region, so most of the footprint shifts in
    # colour rather than only losing high-frequency detail.
    region = _region_mask(rng, size, area_range)
    pil = Image.fromarray((img * 255).round().astype(np.uint8))
    blurred = np.asarray(pil.filter(ImageFilter.GaussianBlur(18))).astype(np.float64) / 255.0
    out = img.copy()
    out[region] = blurred[region]
    return out, region


_TAMPER_OPS = {
    "splice": _apply_splice,
    "copy_move": _apply_copy_move,
    "inpaint_blur": _apply_inpaint_blur,
}


def _save_png(arr: np.ndarray, path: Path):
    if arr.ndim == 3:
        Image.fromarray((arr * 255).round().astype(np.uint8), "RGB").save(path)
    else:
        Image.fromarray(np.where(arr, 255, 0).astype(np.uint8), "L").save(path)


def generate_corpus(spec: GenSpec, out_dir: str | Path) -> Path:
    """Write images, masks, and manifest.tsv; returns the manifest path."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out_dir} is not writable: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    size = IMAGE_SIZE
    n_fake = int(round(spec.fake_ratio * spec.count))
    labels = np.array([1] * n_fake + [0] * (spec.count - n_fake))
    rng.shuffle(labels)

    rows = []
    for i, label in enumerate(labels):
        img = _base_image(rng, size)
        name = f"img_{i:05d}.png"
        mask_name = ""
        if label:
            kind = spec.tamper_kinds[int(rng.integers(0, len(spec.tamper_kinds)))]
            img, region = _TAMPER_OPS[kind](img, rng, size, spec.area_range)
            mask_name = f"mask_{i:05d}.png"
            _save_png(region, out_dir / mask_name)
        _save_png(img, out_dir / name)
        rows.append((name, int(label), mask_name))

    manifest = out_dir / "manifest.tsv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["path", "label", "mask_path"])
        writer.writerows(rows)
    return manifest


# -- loading ------------------------------------------------------------------


def _load_image(path: Path) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if img.size != (IMAGE_SIZE, IMAGE_SIZE):
        img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _load_mask(path: Path) -> torch.Tensor:
    img = Image.open(path).convert("L")
    if img.size != (IMAGE_SIZE, IMAGE_SIZE):
        img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.NEAREST)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr > 0.5).float()


def _read_manifest(root: str | Path):
    root = Path(root)
    manifest = root if root.is_file() else root / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest found at {manifest}")
    base = manifest.parent
    entries = []
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["path", "label", "mask_path"]:
            raise DataError(f"unexpected manifest header {header} in {manifest}")
        for row in reader:
            if len(row) != 3:
                raise DataError(f"malformed manifest row {row} in {manifest}")
            entries.append((base / row[0], int(row[1]), row[2]))
    if not entries:
        raise DataError(f"manifest {manifest} lists no samples")
    return entries


def load_dataset(root: str | Path, split: str):
    """Load every sample of a corpus.

    split="train" returns TrainSample objects (masks stripped);
    split="eval" returns EvalSample objects (zero masks for real images).
    """
    if split not in ("train", "eval"):
        raise InputError(f"split must be 'train' or 'eval', got {split!r}")
    entries = _read_manifest(root)
    samples = []
    for path, label, mask_rel in entries:
        if not path.exists():
            raise DataError(f"image listed in manifest is missing: {path}")
        image = _load_image(path)
        stem = path.stem
        if split == "train":
            samples.append(TrainSample(image, label, stem))
            continue
        if label == 1:
            if not mask_rel:
                raise DataError(f"fake eval sample {path.name} has no mask_path")
            mask_path = path.parent / mask_rel
            if not mask_path.exists():
                raise DataError(f"mask for {path.name} is missing: {mask_path}")
            mask = _load_mask(mask_path)
        else:
            mask = torch.zeros(IMAGE_SIZE, IMAGE_SIZE)
        samples.append(EvalSample(image, label, mask, stem))
    return samples


# -- augmentation and batching -----------------------------------------------


def augment(sample: TrainSample, generator: torch.Generator) -> TrainSample:
    """Random horizontal flip + random resized crop; label untouched."""
    image = sample.image
    if torch.rand((), generator=generator) < 0.5:
        image = torch.flip(image, dims=[-1])
    size = image.shape[-1]
    scale = 0.8 + 0.2 * torch.rand((), generator=generator).item()
    side = max(1, round(size * scale ** 0.5))
    top = int(torch.randint(0, size - side + 1, (), generator=generator))
    left = int(torch.randint(0, size - side + 1, (), generator=generator))
    crop = image[:, top : top + side, left : left + side]
    image = F.interpolate(crop.unsqueeze(0), size=(size, size), mode="bilinear",
                          align_corners=False).squeeze(0).clamp(0, 1)
    return TrainSample(image, sample.label, sample.image_id)


def iter_batches(samples, batch_size: int, shuffle: bool = False,
                 generator: torch.Generator | None = None,
                 augment_samples: bool = False):
    """Yield (images (B, 3, H, W), labels (B,)) batches."""
    order = list(range(len(samples)))
    if shuffle:
        if generator is None:
            raise InputError("shuffle requires a generator")
        order = torch.randperm(len(samples), generator=generator).tolist()
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        if augment_samples:
            chunk = [augment(s, generator) for s in chunk]
        images = torch.stack([s.image for s in chunk])
        labels = torch.tensor([s.label for s in chunk], dtype=torch.float32)
        yield images, labels
