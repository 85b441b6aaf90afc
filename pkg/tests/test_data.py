import numpy as np
import pytest
import torch
from PIL import Image

from atme.data import (AugmentPolicy, Direction, ImagePair, MalformedSampleError, PairedImageDataset, augment,
                       iterate_batches, load_dataset, make_toy_dataset, normalize, split_ab, _hflip)


def composite(width=512, height=256, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def test_split_ab_directions():
    img = composite()
    ab = split_ab(img, "AtoB")
    assert ab.source.shape == (3, 256, 256)
    assert torch.equal(ab.source, normalize(img[:, :256]).permute(2, 0, 1))
    assert torch.equal(ab.target, normalize(img[:, 256:]).permute(2, 0, 1))
    ba = split_ab(img, Direction.BtoA)
    assert torch.equal(ba.source, ab.target) and torch.equal(ba.target, ab.source)


def test_split_ab_odd_width_names_file():
    with pytest.raises(MalformedSampleError, match="bad.png"):
        split_ab(composite(513), sample_id="bad.png")


def test_normalize_endpoints():
    v = normalize(np.array([0, 255], dtype=np.uint8))
    assert v.tolist() == [-1.0, 1.0]
    assert float(normalize(np.array([127.5]))[0]) == 0.0


def test_pair_shape_invariant():
    with pytest.raises(ValueError):
        ImagePair("x", torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


def pair(seed=0, size=64):
    return split_ab(composite(2 * size, size, seed), sample_id=f"p{seed}")


def test_augment_disabled_is_identity():
    p = pair()
    assert augment(p, AugmentPolicy(72, 64, enabled=False), 0) is p


def test_augment_deterministic_and_in_range():
    p = pair()
    pol = AugmentPolicy(72, 64, 0.5)
    a, b = augment(p, pol, 5), augment(p, pol, 5)
    assert torch.equal(a.source, b.source) and torch.equal(a.target, b.target)
    assert a.source.shape == (3, 64, 64)
    assert float(a.source.abs().max()) <= 1.0


def test_hflip_involution():
    x = torch.randn(3, 5, 7)
    assert torch.equal(_hflip(_hflip(x)), x)


def test_augment_uses_one_draw_for_source_and_target():
    # identical source and target must stay identical under augmentation
    img = composite(128, 64)
    img[:, 64:] = img[:, :64]
    p = split_ab(img)
    for seed in range(10):
        out = augment(p, AugmentPolicy(80, 64, 0.5), seed)
        assert torch.equal(out.source, out.target)


def test_crop_then_split_equals_split_then_crop():
    p = pair(3, 64)
    pol = AugmentPolicy(64, 48, 0.0)
    out = augment(p, pol, 11)
    rng = np.random.default_rng(11)
    top, left = rng.integers(0, 17, size=2)
    assert torch.equal(out.source, p.source[:, top:top + 48, left:left + 48])
    assert torch.equal(out.target, p.target[:, top:top + 48, left:left + 48])


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy(jitter_resize=200, crop_size=256)
    with pytest.raises(ValueError):
        AugmentPolicy(hflip_prob=1.5)
    assert AugmentPolicy.for_crop(256).jitter_resize == 286


def test_load_dataset_batches_and_ids(tmp_path):
    make_toy_dataset(tmp_path, 10, size=16)
    sizes = [len(b) for b in load_dataset(tmp_path, batch_size=4)]
    assert sizes == [4, 4, 2]
    ids1 = set(PairedImageDataset(tmp_path).sample_ids)
    ids2 = set(PairedImageDataset(tmp_path).sample_ids)
    assert ids1 == ids2 and "train/00000.png" in ids1 and len(ids1) == 10


def test_load_dataset_empty_dir(tmp_path):
    (tmp_path / "train").mkdir()
    with pytest.raises(FileNotFoundError, match="no samples"):
        PairedImageDataset(tmp_path)


def test_unreadable_files_skipped(tmp_path):
    make_toy_dataset(tmp_path, 3, size=16)
    (tmp_path / "train" / "broken.png").write_bytes(b"not an image")
    ds = PairedImageDataset(tmp_path)
    assert len(ds) == 3 and ds.skipped == 1


def test_grayscale_and_rgba_converted_to_rgb(tmp_path):
    (tmp_path / "train").mkdir()
    Image.fromarray(np.zeros((8, 16), dtype=np.uint8)).save(tmp_path / "train" / "g.png")
    Image.fromarray(np.zeros((8, 16, 4), dtype=np.uint8)).save(tmp_path / "train" / "r.png")
    ds = PairedImageDataset(tmp_path)
    assert all(p.source.shape == (3, 8, 8) for p in ds.pairs)


def test_two_epochs_without_augmentation_identical(tmp_path):
    make_toy_dataset(tmp_path, 6, size=16)
    pairs = PairedImageDataset(tmp_path).pairs
    a = list(iterate_batches(pairs, 4, shuffle=False))
    b = list(iterate_batches(pairs, 4, shuffle=False))
    assert all(torch.equal(x.source, y.source) and x.sample_ids == y.sample_ids for x, y in zip(a, b))


def test_shuffle_depends_on_seed_and_epoch(tmp_path):
    make_toy_dataset(tmp_path, 12, size=16)
    pairs = PairedImageDataset(tmp_path).pairs
    order = lambda **kw: [s for b in iterate_batches(pairs, 5, **kw) for s in b.sample_ids]
    assert order(epoch=1, seed=0) == order(epoch=1, seed=0)
    assert order(epoch=1, seed=0) != order(epoch=2, seed=0)
    assert sorted(order(epoch=3, seed=1)) == sorted(p.sample_id for p in pairs)


def test_emitted_values_in_range(tmp_path):
    make_toy_dataset(tmp_path, 4, size=16)
    pol = AugmentPolicy(20, 16, 0.5)
    for b in iterate_batches(PairedImageDataset(tmp_path).pairs, 2, policy=pol, epoch=1):
        assert float(b.source.abs().max()) <= 1 and float(b.target.abs().max()) <= 1
