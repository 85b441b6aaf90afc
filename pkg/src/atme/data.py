"""Paired AB image loading, augmentation and batching."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class MalformedSampleError(ValueError):
    pass


class Direction(str, Enum):
    AtoB = "AtoB"
    BtoA = "BtoA"


@dataclass(frozen=True)
class ImagePair:
    sample_id: str
    source: torch.Tensor
    target: torch.Tensor
    direction: Direction = Direction.AtoB

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ValueError(
                f"{self.sample_id}: source {tuple(self.source.shape)} and target "
                f"{tuple(self.target.shape)} differ in shape"
            )


@dataclass(frozen=True)
class AugmentPolicy:
    jitter_resize: int = 286
    crop_size: int = 256
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.crop_size > self.jitter_resize:
            raise ValueError(
                f"crop_size ({self.crop_size}) must not exceed jitter_resize ({self.jitter_resize})"
            )
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")

    @classmethod
    def for_crop(cls, crop_size: int, **kw) -> "AugmentPolicy":
        return cls(jitter_resize=crop_size + 30, crop_size=crop_size, **kw)


def normalize(image) -> torch.Tensor:
    """uint8 values in [0, 255] to floats in [-1, 1]."""
    t = torch.from_numpy(np.array(image, dtype=np.float32))
    return t / 127.5 - 1.0


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize` for a C x H x W tensor, returned as H x W x C."""
    arr = ((image.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def split_ab(image, direction: Direction | str = Direction.AtoB,
             sample_id: str = "<memory>") -> ImagePair:
    """Split a side-by-side composite (left half A, right half B) into a pair.

    ``image`` is an H x W x C uint8 array or PIL image; the result is
    normalized to [-1, 1] and laid out C x H x W.
    """
    direction = Direction(direction)
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    width = arr.shape[1]
    if width % 2:
        raise MalformedSampleError(f"{sample_id}: composite width {width} is odd")
    half = width // 2
    a = normalize(arr[:, :half]).permute(2, 0, 1).contiguous()
    b = normalize(arr[:, half:]).permute(2, 0, 1).contiguous()
    if direction is Direction.AtoB:
        return ImagePair(sample_id, a, b, direction)
    return ImagePair(sample_id, b, a, direction)


def _hflip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=(-1,))


def augment(pair: ImagePair, policy: AugmentPolicy, seed: int) -> ImagePair:
    """Resize to ``jitter_resize``, random-crop to ``crop_size``, maybe flip.

    One random draw drives both images, so source and target stay aligned.
    """
    if not policy.enabled:
        return pair
    rng = np.random.default_rng(seed)
    stacked = torch.cat([pair.source, pair.target], dim=0)[None]
    if stacked.shape[-1] != policy.jitter_resize or stacked.shape[-2] != policy.jitter_resize:
        stacked = F.interpolate(stacked, size=(policy.jitter_resize,) * 2, mode="bicubic",
                                align_corners=False).clamp(-1, 1)
    span = policy.jitter_resize - policy.crop_size
    top, left = (int(v) for v in rng.integers(0, span + 1, size=2))
    stacked = stacked[..., top:top + policy.crop_size, left:left + policy.crop_size]
    if rng.random() < policy.hflip_prob:
        stacked = _hflip(stacked)
    c = pair.source.shape[0]
    src, tgt = stacked[0, :c].contiguous(), stacked[0, c:].contiguous()
    return replace(pair, source=src, target=tgt)


def resize_pair(pair: ImagePair, size: int) -> ImagePair:
    if pair.source.shape[-1] == size and pair.source.shape[-2] == size:
        return pair
    stacked = torch.cat([pair.source, pair.target], dim=0)[None]
    stacked = F.interpolate(stacked, size=(size, size), mode="bicubic", align_corners=False).clamp(-1, 1)
    c = pair.source.shape[0]
    return replace(pair, source=stacked[0, :c].contiguous(), target=stacked[0, c:].contiguous())


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


class PairedImageDataset:
    """Composite AB images under ``<root>/<split>/``, held in memory.

    ``sample_id`` is the path relative to ``root``. Unreadable files are
    skipped with a warning and counted in ``skipped``.
    """

    def __init__(self, root: str | Path, split: str = "train", direction: Direction | str = Direction.AtoB,
                 size: Optional[int] = None):
        self.root = Path(root)
        self.split = split
        self.direction = Direction(direction)
        folder = self.root / split
        files = sorted(p for p in folder.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if folder.is_dir() else []
        if not files:
            raise FileNotFoundError(f"no samples found in {folder}")
        self.skipped = 0
        self.pairs: list[ImagePair] = []
        for path in files:
            sid = path.relative_to(self.root).as_posix()
            try:
                arr = read_rgb(path)
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                self.skipped += 1
                continue
            pair = split_ab(arr, self.direction, sid)
            if size is not None:
                pair = resize_pair(pair, size)
            self.pairs.append(pair)
        if not self.pairs:
            raise FileNotFoundError(f"no readable samples in {folder}")

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, idx: int) -> ImagePair:
        return self.pairs[idx]

    @property
    def sample_ids(self) -> list[str]:
        return [p.sample_id for p in self.pairs]


@dataclass(frozen=True)
class Batch:
    sample_ids: tuple[str, ...]
    source: torch.Tensor
    target: torch.Tensor

    def __len__(self) -> int:
        return len(self.sample_ids)


def collate(pairs: Sequence[ImagePair]) -> Batch:
    return Batch(tuple(p.sample_id for p in pairs),
                 torch.stack([p.source for p in pairs]),
                 torch.stack([p.target for p in pairs]))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(seed) * 100_003 + int(epoch)


def sample_seed(seed: int, epoch: int, sample_id: str) -> int:
    return (epoch_seed(seed, epoch) * 7919 + zlib.crc32(sample_id.encode("utf-8"))) % (2 ** 32)


def iterate_batches(pairs: Sequence[ImagePair], batch_size: int, *, epoch: int = 0, seed: int = 0,
                    shuffle: bool = True, policy: Optional[AugmentPolicy] = None) -> Iterator[Batch]:
    """Yield batches for one epoch; order and augmentation depend only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(pairs))
    if shuffle:
        order = np.random.default_rng(epoch_seed(seed, epoch)).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        if policy is not None and policy.enabled:
            chunk = [augment(p, policy, sample_seed(seed, epoch, p.sample_id)) for p in chunk]
        yield collate(chunk)


def load_dataset(root_dir: str | Path, split: str = "train", direction: Direction | str = Direction.AtoB,
                 policy: Optional[AugmentPolicy] = None, batch_size: int = 1, *, seed: int = 0,
                 epoch: int = 0, shuffle: bool = False) -> Iterator[Batch]:
    dataset = PairedImageDataset(root_dir, split, direction)
    return iterate_batches(dataset.pairs, batch_size, epoch=epoch, seed=seed, shuffle=shuffle, policy=policy)


def _toy_pair(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    bg = rng.uniform(0, 90, size=3)
    photo = np.broadcast_to(bg, (size, size, 3)).copy()
    label = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        r = rng.uniform(0.1 * size, 0.25 * size)
        kind = rng.integers(0, 2)
        if kind == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        photo[mask] = rng.uniform(120, 255, size=3)
        label |= mask
    sil = np.where(label[..., None], 255.0, 0.0).repeat(3, axis=2)
    return photo.round().astype(np.uint8), sil.astype(np.uint8)


def make_toy_dataset(root: str | Path, n_pairs: int = 500, size: int = 64, seed: int = 0,
                     split: str = "train") -> Path:
    """Write ``n_pairs`` colored-shape | silhouette composites as PNGs and return the split dir."""
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_pairs):
        photo, sil = _toy_pair(rng, size)
        Image.fromarray(np.concatenate([photo, sil], axis=1)).save(out / f"{i:05d}.png")
    return out
