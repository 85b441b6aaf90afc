"""Kernel Inception Distance with pluggable feature extractors."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F

WEIGHTS_ENV = "ATME_WEIGHTS_DIR"
INCEPTION_ASSET = "inception_v3_google-0cc3c7bd.pth"
INCEPTION_SHA256_PREFIX = "0cc3c7bd"


class MissingAssetError(FileNotFoundError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be an n x d matrix, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite entries")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class KidResult:
    mean: float
    std: float
    subset_size: int
    n_subsets: int
    scaled_by_100: bool

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "subset_size": self.subset_size,
                "n_subsets": self.n_subsets, "scaled_by_100": self.scaled_by_100}


class Extractor(Protocol):
    extractor_id: str

    def __call__(self, images: torch.Tensor) -> np.ndarray: ...


class RandomProjectionExtractor:
    """Fixed seeded Gaussian projection of images average-pooled to ``resolution``."""

    def __init__(self, dim: int = 64, resolution: int = 16, channels: int = 3, seed: int = 0):
        self.dim, self.resolution, self.channels, self.seed = dim, resolution, channels, seed
        gen = np.random.default_rng(seed)
        n_in = channels * resolution * resolution
        self.matrix = gen.standard_normal((n_in, dim)) / np.sqrt(n_in)
        self.extractor_id = f"random-proj-{dim}-r{resolution}-s{seed}"

    def prepare(self, images: torch.Tensor) -> np.ndarray:
        x = torch.as_tensor(images, dtype=torch.float64)
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            x = F.adaptive_avg_pool2d(x, self.resolution)
        return x.reshape(x.shape[0], -1).numpy()

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        return self.prepare(images) @ self.matrix


class InceptionExtractor:
    """2048-d pool features of a pretrained Inception-v3.

    Weights are read from ``$ATME_WEIGHTS_DIR/inception_v3_google-0cc3c7bd.pth``
    and never downloaded.
    """

    extractor_id = "inception-v3-pool3"

    def __init__(self, weights_dir: Optional[str | Path] = None, batch_size: int = 32):
        weights_dir = weights_dir or os.environ.get(WEIGHTS_ENV)
        path = Path(weights_dir) / INCEPTION_ASSET if weights_dir else None
        if path is None or not path.is_file():
            raise MissingAssetError(
                f"Inception-v3 weights asset {INCEPTION_ASSET!r} not found"
                + (f" in {weights_dir}" if weights_dir else f"; set {WEIGHTS_ENV}")
            )
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if not digest.startswith(INCEPTION_SHA256_PREFIX):
            raise MissingAssetError(f"checksum mismatch for {path}: sha256 {digest[:8]}...")
        from torchvision.models import inception_v3

        model = inception_v3(weights=None, aux_logits=True, init_weights=False)
        model.load_state_dict(torch.load(path, map_location="cpu"))
        model.fc = torch.nn.Identity()
        self.model = model.eval()
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        mean = torch.tensor([0.485, 0.456, 0.406])[:, None, None]
        std = torch.tensor([0.229, 0.224, 0.225])[:, None, None]
        out = []
        for chunk in torch.as_tensor(images, dtype=torch.float32).split(self.batch_size):
            x = F.interpolate(chunk, size=(299, 299), mode="bilinear", align_corners=False)
            x = ((x + 1) / 2 - mean) / std
            out.append(self.model(x).double().numpy())
        return np.concatenate(out)


def make_extractor(name: str, **kw) -> Extractor:
    if name == "inception":
        return InceptionExtractor(**kw)
    if name == "random-proj":
        return RandomProjectionExtractor(**kw)
    raise ValueError(f"unknown extractor {name!r}; choose 'inception' or 'random-proj'")


def extract_features(images, extractor: Extractor) -> FeatureSet:
    images = torch.as_tensor(images)
    if images.ndim != 4:
        raise ValueError(f"images must be N x C x H x W, got {tuple(images.shape)}")
    return FeatureSet(extractor(images), extractor.extractor_id)


def poly_kernel(x, y, d: int = 3) -> float:
    """``(x.y / dim + 1) ** d``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float((x @ y / x.shape[-1] + 1.0) ** d)


def _gram(a: np.ndarray, b: np.ndarray, degree: int) -> np.ndarray:
    return (a @ b.T / a.shape[1] + 1.0) ** degree


def _features(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


def mmd2_unbiased(X, Y, degree: int = 3) -> float:
    """Unbiased squared MMD under the cubic polynomial kernel."""
    x, y = _features(X), _features(Y)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError(f"need at least 2 samples per set, got {m} and {n}")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    kxx, kyy, kxy = _gram(x, x, degree), _gram(y, y, degree), _gram(x, y, degree)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def _canonical(f: np.ndarray) -> np.ndarray:
    # subset draws index a canonical row order, so results ignore input ordering
    return f[np.lexsort(f.T[::-1])]


def kid(real, fake, subset_size: Optional[int] = None, n_subsets: int = 50, seed: int = 0,
        scaled_by_100: bool = True) -> KidResult:
    x, y = _canonical(_features(real)), _canonical(_features(fake))
    limit = min(len(x), len(y))
    if subset_size is None:
        subset_size = min(100, limit)
    if subset_size > limit:
        raise ValueError(f"subset_size {subset_size} exceeds smallest set size {limit}")
    if subset_size < 2:
        raise ValueError("subset_size must be >= 2")
    rng = np.random.default_rng(seed)
    values = np.empty(n_subsets)
    for i in range(n_subsets):
        xi = x[rng.choice(len(x), subset_size, replace=False)]
        yi = y[rng.choice(len(y), subset_size, replace=False)]
        values[i] = mmd2_unbiased(xi, yi)
    scale = 100.0 if scaled_by_100 else 1.0
    return KidResult(float(values.mean() * scale), float(values.std() * scale), subset_size, n_subsets,
                     scaled_by_100)
