"""scikit-learn style front end: ``ATMETranslator().fit(A, B).predict(A_new)``."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import config as cfgmod
from .data import ImagePair
from .engine import Trainer, infer
from .monitor import distance_to_equilibrium


def check_images(X, name: str = "X", channels: Optional[int] = 3) -> torch.Tensor:
    """Validate an image batch and return it as float32 N x C x H x W in [-1, 1].

    uint8 input is mapped from [0, 255]; floating input must already lie in
    [-1, 1]. N x H x W x C arrays (channels last) are transposed when the
    last axis matches ``channels`` and the second does not.
    """
    if isinstance(X, torch.Tensor):
        arr = X.detach().cpu().numpy()
    else:
        arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must be a 4-d image batch, got shape {arr.shape}")
    if channels is not None and arr.shape[1] != channels and arr.shape[-1] == channels:
        arr = arr.transpose(0, 3, 1, 2)
    if channels is not None and arr.shape[1] != channels:
        raise ValueError(f"{name} must have {channels} channels, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 127.5 - 1.0
    elif np.issubdtype(arr.dtype, np.floating):
        if not np.isfinite(arr).all():
            raise ValueError(f"{name} contains non-finite values")
        if arr.min() < -1.0 or arr.max() > 1.0:
            raise ValueError(f"{name} values must lie in [-1, 1] (or be uint8)")
    else:
        raise ValueError(f"{name} has unsupported dtype {arr.dtype}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def check_paired(X, y) -> tuple[torch.Tensor, torch.Tensor]:
    X, y = check_images(X, "X"), check_images(y, "y")
    if X.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {tuple(X.shape)} vs {tuple(y.shape)}")
    return X, y


class ATMETranslator(BaseEstimator):
    """Paired image-to-image translator.

    Parameters mirror the dotted config keys (``gen.embed_dim`` becomes
    ``embed_dim`` and so on). ``preset`` picks the defaults that any
    parameter left as ``None`` falls back to.
    """

    def __init__(self, preset: str = "desk", embed_dim: Optional[int] = None,
                 resolutions: Optional[Sequence[int]] = None, attention_levels: Optional[Sequence[int]] = None,
                 time_embed_dim: Optional[int] = None, disc_base_channels: Optional[int] = None,
                 disc_n_layers: Optional[int] = None, bridge_hidden_channels: Optional[int] = None,
                 lambda_l1: Optional[float] = None, adversarial_mode: Optional[str] = None,
                 epochs_const: Optional[int] = None, epochs_decay: Optional[int] = None,
                 lr0: Optional[float] = None, batch_size: Optional[int] = None,
                 jitter_resize: Optional[int] = None, hflip_prob: Optional[float] = None,
                 augment: Optional[bool] = None, random_state: int = 0):
        self.preset = preset
        self.embed_dim = embed_dim
        self.resolutions = resolutions
        self.attention_levels = attention_levels
        self.time_embed_dim = time_embed_dim
        self.disc_base_channels = disc_base_channels
        self.disc_n_layers = disc_n_layers
        self.bridge_hidden_channels = bridge_hidden_channels
        self.lambda_l1 = lambda_l1
        self.adversarial_mode = adversarial_mode
        self.epochs_const = epochs_const
        self.epochs_decay = epochs_decay
        self.lr0 = lr0
        self.batch_size = batch_size
        self.jitter_resize = jitter_resize
        self.hflip_prob = hflip_prob
        self.augment = augment
        self.random_state = random_state

    _KEYS = {
        "embed_dim": "gen.embed_dim", "resolutions": "gen.resolutions",
        "attention_levels": "gen.attention_levels", "time_embed_dim": "gen.time_embed_dim",
        "disc_base_channels": "disc.base_channels", "disc_n_layers": "disc.n_layers",
        "bridge_hidden_channels": "bridge.hidden_channels", "lambda_l1": "loss.lambda_l1",
        "adversarial_mode": "loss.adversarial_mode", "epochs_const": "train.epochs_const",
        "epochs_decay": "train.epochs_decay", "lr0": "train.lr0", "batch_size": "data.batch_size",
        "jitter_resize": "data.jitter_resize", "hflip_prob": "data.hflip_prob", "augment": "data.augment",
    }

    def to_config(self, image_size: int) -> dict:
        values = {"preset": self.preset, "data.crop_size": image_size,
                  "train.seed": self.random_state, "data.seed": self.random_state}
        for attr, key in self._KEYS.items():
            v = getattr(self, attr)
            if v is not None:
                values[key] = list(v) if isinstance(v, (tuple, list)) else v
        if self.jitter_resize is None:
            base = cfgmod.preset(self.preset)
            values["data.jitter_resize"] = max(image_size, image_size + base["data.jitter_resize"]
                                               - base["data.crop_size"])
        return cfgmod.resolve(values)

    def fit(self, X, y, sample_ids: Optional[Sequence[str]] = None, until_epoch: Optional[int] = None):
        """Train on source images ``X`` and targets ``y`` (both N x C x H x W)."""
        X, y = check_paired(X, y)
        if X.shape[-1] != X.shape[-2]:
            raise ValueError("only square images are supported")
        if sample_ids is None:
            sample_ids = [f"{i:06d}" for i in range(len(X))]
        if len(sample_ids) != len(X):
            raise ValueError("sample_ids must match the number of images")
        pairs = [ImagePair(str(s), a, b) for s, a, b in zip(sample_ids, X, y)]
        self.config_ = self.to_config(int(X.shape[-1]))
        self.trainer_ = Trainer(self.config_, pairs)
        self.trainer_.train(until_epoch=until_epoch)
        self.history_ = list(self.trainer_.history)
        self.n_epochs_ = self.trainer_.epoch
        return self

    def predict(self, X, seed: int = 0) -> np.ndarray:
        """Translate ``X`` with one generator pass per image; returns floats in [-1, 1]."""
        check_is_fitted(self, "trainer_")
        X = check_images(X, "X")
        model = self.trainer_.model
        return infer(model, X, seed=seed).numpy()

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def score(self, X, y) -> float:
        """Negative mean absolute error of the translation."""
        X, y = check_paired(X, y)
        return -float(np.abs(self.predict(X) - y.numpy()).mean())

    def distance_to_equilibrium(self, tail: int = 10) -> float:
        check_is_fitted(self, "history_")
        return distance_to_equilibrium(self.history_, min(tail, len(self.history_)),
                                       self.config_["monitor.smooth_window"])
