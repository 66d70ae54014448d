import hashlib
from pathlib import Path

import pytest
import torch

from vilaco.config import GenSpec
from vilaco.data import (EvalSample, TrainSample, augment, generate_corpus,
                         iter_batches, load_dataset)
from vilaco.errors import DataError


def corpus_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(GenSpec(count=8, fake_ratio=0.5, seed=11), root)
    return root


def test_generate_is_byte_identical(tmp_path):
    spec = GenSpec(count=4, seed=42)
    a, b = tmp_path / "a", tmp_path / "b"
    generate_corpus(spec, a)
    generate_corpus(spec, b)
    assert corpus_digest(a) == corpus_digest(b)


def test_generate_respects_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_corpus(GenSpec(count=4, seed=1), a)
    generate_corpus(GenSpec(count=4, seed=2), b)
    assert corpus_digest(a) != corpus_digest(b)


def test_manifest_and_counts(small_corpus):
    lines = (small_corpus / "manifest.tsv").read_text().strip().split("\n")
    assert lines[0] == "path\tlabel\tmask_path"
    assert len(lines) == 9
    labels = [int(l.split("\t")[1]) for l in lines[1:]]
    assert sum(labels) == 4


def test_mask_area_fractions_in_range(small_corpus):
    samples = load_dataset(small_corpus, "eval")
    for s in samples:
        if s.label == 1:
            frac = float(s.mask.mean())
            assert 0.05 <= frac <= 0.3


def test_train_split_has_no_mask(small_corpus):
    samples = load_dataset(small_corpus, "train")
    assert all(isinstance(s, TrainSample) for s in samples)
    assert all(not hasattr(s, "mask") for s in samples)
    assert "mask" not in TrainSample.__dataclass_fields__


def test_eval_split_shapes(small_corpus):
    samples = load_dataset(small_corpus, "eval")
    assert all(isinstance(s, EvalSample) for s in samples)
    for s in samples:
        assert s.image.shape == (3, 256, 256)
        assert s.mask.shape == (256, 256)
        assert set(s.mask.unique().tolist()) <= {0.0, 1.0}
        if s.label == 0:
            assert float(s.mask.sum()) == 0.0


def test_fake_without_mask_is_rejected(small_corpus, tmp_path):
    manifest = tmp_path / "manifest.tsv"
    rows = (small_corpus / "manifest.tsv").read_text().strip("\n").split("\n")
    broken = [rows[0]]
    for row in rows[1:]:
        path, label, mask = row.split("\t")
        broken.append(f"{small_corpus / path}\t{label}\t")
    manifest.write_text("\n".join(broken) + "\n")
    with pytest.raises(DataError, match="mask"):
        load_dataset(manifest, "eval")
    # train split doesn't need masks at all
    assert len(load_dataset(manifest, "train")) == 8


def test_missing_image_is_reported(tmp_path):
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text("path\tlabel\tmask_path\nghost.png\t0\t\n")
    with pytest.raises(DataError, match="ghost.png"):
        load_dataset(manifest, "train")


def test_bad_header_is_reported(tmp_path):
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text("a\tb\nc\t0\n")
    with pytest.raises(DataError, match="header"):
        load_dataset(manifest, "train")


def test_augment_preserves_shape_label_and_range():
    g = torch.Generator().manual_seed(0)
    sample = TrainSample(torch.rand(3, 64, 64), 1, "x")
    out = augment(sample, g)
    assert out.image.shape == (3, 64, 64)
    assert out.label == 1
    assert 0.0 <= float(out.image.min()) and float(out.image.max()) <= 1.0


def test_augment_is_seed_deterministic():
    sample = TrainSample(torch.rand(3, 64, 64), 0, "x")
    a = augment(sample, torch.Generator().manual_seed(5)).image
    b = augment(sample, torch.Generator().manual_seed(5)).image
    assert torch.equal(a, b)


def test_iter_batches_serial_and_shuffled(small_corpus):
    samples = load_dataset(small_corpus, "train")
    serial = list(iter_batches(samples, 3))
    assert [img.shape[0] for img, _ in serial] == [3, 3, 2]
    assert torch.equal(serial[0][0][0], samples[0].image)

    g = torch.Generator().manual_seed(1)
    shuffled = list(iter_batches(samples, 3, shuffle=True, generator=g))
    flat = torch.cat([img for img, _ in shuffled])
    assert flat.shape[0] == 8
    assert not all(torch.equal(flat[i], samples[i].image) for i in range(8))
