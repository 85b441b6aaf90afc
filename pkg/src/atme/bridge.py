"""Coupling from the discriminator's decision maps back into generator inputs.

A per-sample store remembers the discriminator's last decision map; a
learnable transform lifts it to an image-space noise map that corrupts the
generator input and fixes its pseudo-time.
"""

from __future__ import annotations

import math
import threading
import zlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

INFERENCE_SIGMA = 0.001
PROB_EPS = 1e-6


class StoreLoadError(RuntimeError):
    pass


@dataclass
class WTransformConfig:
    hidden_channels: int = 16
    output_scale: float = 1e-2
    # None: enough x2 stages to reach at least the image size, then exact resize
    upsample_stages: Optional[int] = None

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise ValueError(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if self.output_scale <= 0:
            raise ValueError(f"output_scale must be positive, got {self.output_scale}")


def stages_needed(map_size: int, image_size: int) -> int:
    return max(0, math.ceil(math.log2(image_size / map_size)))


class WTransform(nn.Module):
    """Learnable lift of a (B, 1, Nh, Nw) decision map to a (B, 1, H, W) noise map.

    Every stage is nearest x2 upsampling, a 3x3 convolution with replicate
    padding and SiLU, followed by a bilinear resize to the exact image size
    and a pointwise linear layer. Each piece maps constant fields to constant
    fields, so a uniform decision map yields a spatially constant noise map.
    """

    def __init__(self, map_size: tuple[int, int], image_size: tuple[int, int],
                 config: Optional[WTransformConfig] = None):
        super().__init__()
        self.config = cfg = config or WTransformConfig()
        self.map_size = tuple(map_size)
        self.image_size = tuple(image_size)
        n = cfg.upsample_stages
        if n is None:
            n = stages_needed(min(self.map_size), min(self.image_size))
        layers: list[nn.Module] = []
        ch = 1
        for _ in range(max(n, 1)):
            layers.append(nn.Conv2d(ch, cfg.hidden_channels, 3, padding=1, padding_mode="replicate"))
            ch = cfg.hidden_channels
        self.convs = nn.ModuleList(layers)
        self.n_stages = n
        self.out = nn.Conv2d(ch, 1, 1)
        nn.init.normal_(self.out.weight, std=cfg.output_scale / math.sqrt(ch))
        nn.init.zeros_(self.out.bias)

    def forward(self, d_prev: torch.Tensor) -> torch.Tensor:
        if d_prev.ndim == 3:
            d_prev = d_prev[:, None]
        if d_prev.ndim != 4 or d_prev.shape[1] != 1 or tuple(d_prev.shape[-2:]) != self.map_size:
            raise ValueError(
                f"expected decision maps of shape (B, 1, {self.map_size[0]}, {self.map_size[1]}), "
                f"got {tuple(d_prev.shape)}"
            )
        h = d_prev.detach()
        for idx, conv in enumerate(self.convs):
            if idx < self.n_stages:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.silu(conv(h))
        if tuple(h.shape[-2:]) != self.image_size:
            h = F.interpolate(h, size=self.image_size, mode="bilinear", align_corners=False)
        return self.out(h)

    def zero_and_freeze(self) -> None:
        for p in self.parameters():
            nn.init.zeros_(p)
            p.requires_grad_(False)


def corrupt_input(x0: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``x0 + x0 * w``, with ``w`` broadcast over channels."""
    try:
        torch.broadcast_shapes(x0.shape, w.shape)
    except RuntimeError as exc:
        raise ValueError(f"cannot broadcast noise map {tuple(w.shape)} onto {tuple(x0.shape)}") from exc
    return x0 + x0 * w


def estimate_time(w: torch.Tensor) -> torch.Tensor:
    """Per-sample mean of the noise map; a 0-d tensor if ``w`` has no batch dim."""
    if w.ndim <= 3:
        return w.mean()
    return w.flatten(1).mean(dim=1)


def _id_seed(seed: int, key: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(key.encode("utf-8"))) % (2 ** 63)


def sample_inference_state(shape: tuple[int, int], seed: int, sigma: float = INFERENCE_SIGMA,
                           dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Decision map with i.i.d. Normal(1/2, sigma^2) entries clamped into (0, 1)."""
    gen = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    d = 0.5 + sigma * torch.randn(tuple(shape), generator=gen, dtype=torch.float64)
    return d.clamp(PROB_EPS, 1 - PROB_EPS).to(dtype)


class DecisionStateStore:
    """Map ``sample_id -> decision-map probabilities`` from the previous visit.

    Unseen ids receive a cold-start map drawn like the inference state,
    seeded by ``(seed, sample_id)`` so it does not depend on visit order.
    """

    def __init__(self, map_shape: tuple[int, int], seed: int = 0, sigma: float = INFERENCE_SIGMA):
        self.map_shape = tuple(map_shape)
        self.seed = int(seed)
        self.sigma = float(sigma)
        self.epoch_tag = 0
        self._entries: dict[str, torch.Tensor] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._entries

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def cold_start(self, sample_id: str) -> torch.Tensor:
        return sample_inference_state(self.map_shape, _id_seed(self.seed, sample_id), self.sigma)

    def get(self, sample_id: str) -> torch.Tensor:
        with self._lock:
            d = self._entries.get(sample_id)
        return d.clone() if d is not None else self.cold_start(sample_id)

    def get_batch(self, sample_ids: Iterable[str]) -> torch.Tensor:
        return torch.stack([self.get(s) for s in sample_ids])[:, None]

    def put(self, sample_id: str, d_fake_probs: torch.Tensor) -> None:
        d = d_fake_probs.detach().to(torch.float32).reshape(self.map_shape).clone()
        d = d.clamp(PROB_EPS, 1 - PROB_EPS)
        with self._lock:
            self._entries[sample_id] = d

    def put_batch(self, sample_ids: Iterable[str], d_fake_probs: torch.Tensor) -> None:
        for sid, d in zip(sample_ids, d_fake_probs):
            self.put(sid, d)

    def state_dict(self) -> dict:
        with self._lock:
            ids = sorted(self._entries)
            return {
                "map_shape": list(self.map_shape),
                "seed": self.seed,
                "sigma": self.sigma,
                "epoch_tag": self.epoch_tag,
                "ids": ids,
                "values": torch.stack([self._entries[i].flatten() for i in ids])
                if ids else torch.zeros(0, math.prod(self.map_shape)),
            }

    @classmethod
    def from_state_dict(cls, state: Mapping) -> "DecisionStateStore":
        try:
            store = cls(tuple(state["map_shape"]), state["seed"], state["sigma"])
            store.epoch_tag = int(state["epoch_tag"])
            values = state["values"]
            ids = list(state["ids"])
            if values.shape != (len(ids), math.prod(store.map_shape)):
                raise ValueError(f"values shape {tuple(values.shape)} inconsistent with {len(ids)} ids")
            if len(ids) and not bool(((values > 0) & (values < 1)).all()):
                raise ValueError("stored probabilities outside (0, 1)")
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise StoreLoadError(f"corrupted decision-state store: {exc}") from exc
        for sid, row in zip(ids, values):
            store._entries[sid] = row.reshape(store.map_shape).clone()
        return store
