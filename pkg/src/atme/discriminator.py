"""Markovian patch discriminator and its receptive-field geometry."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import torch
import torch.nn as nn


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64
    n_layers: int = 3
    input_channels: int = 6

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")

    def conv_geometry(self) -> list[tuple[int, int, int]]:
        """(kernel, stride, padding) of every convolution, input to output."""
        layers = [(4, 2, 1)] * self.n_layers
        return layers + [(4, 1, 1), (4, 1, 1)]


@dataclass
class DecisionMap:
    logits: torch.Tensor
    probabilities: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.probabilities = torch.sigmoid(self.logits)

    @property
    def patch_count(self) -> int:
        return self.logits.shape[-1] * self.logits.shape[-2]


class FreezableInstanceNorm(nn.Module):
    """Instance norm whose statistics can be pinned to a reference input.

    Per-instance statistics couple every output position to the whole image;
    pinning them exposes the purely convolutional dependency structure.
    """

    def __init__(self, num_features: int, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self._frozen = False
        self._stats: Optional[tuple[torch.Tensor, torch.Tensor]] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self._frozen and self._stats is not None:
            mean, var = self._stats
        else:
            mean = x.mean(dim=(2, 3), keepdim=True)
            var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
            if self._frozen:
                self._stats = (mean.detach(), var.detach())
                mean, var = self._stats
        return (x - mean) / torch.sqrt(var + self.eps)


def _n_layer_stack(cfg: DiscriminatorConfig) -> nn.Sequential:
    geom = cfg.conv_geometry()
    ch_in = cfg.input_channels
    layers: list[nn.Module] = []
    mult = 1
    for idx, (k, s, p) in enumerate(geom[:-1]):
        mult = min(2 ** idx, 8)
        out = cfg.base_channels * mult
        layers.append(nn.Conv2d(ch_in, out, k, s, p, bias=idx == 0))
        if idx > 0:
            layers.append(FreezableInstanceNorm(out))
        layers.append(nn.LeakyReLU(0.2))
        ch_in = out
    k, s, p = geom[-1]
    layers.append(nn.Conv2d(ch_in, 1, k, s, p))
    return nn.Sequential(*layers)


class PatchDiscriminator(nn.Module):
    """pix2pix C64-C128-C256-C512 patch discriminator over (source, candidate) pairs."""

    def __init__(self, config: Optional[DiscriminatorConfig] = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        self.model = _n_layer_stack(self.config)

    def logits(self, source: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if source.shape[0] != candidate.shape[0] or source.shape[-2:] != candidate.shape[-2:]:
            raise ValueError(
                f"source {tuple(source.shape)} and candidate {tuple(candidate.shape)} must share batch and spatial dims"
            )
        x = torch.cat([source, candidate], dim=1)
        if x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} stacked channels, got {x.shape[1]}")
        return self.model(x)

    def forward(self, source: torch.Tensor, candidate: torch.Tensor) -> DecisionMap:
        return DecisionMap(self.logits(source, candidate))

    def output_size(self, size: int) -> int:
        return output_size(self.config, size)

    @contextmanager
    def frozen_norm_stats(self) -> Iterator[None]:
        norms = [m for m in self.modules() if isinstance(m, FreezableInstanceNorm)]
        for m in norms:
            m._frozen, m._stats = True, None
        try:
            yield
        finally:
            for m in norms:
                m._frozen, m._stats = False, None


def output_size(config: DiscriminatorConfig, size: int) -> int:
    for k, s, p in config.conv_geometry():
        size = (size + 2 * p - k) // s + 1
        if size < 1:
            raise ValueError("input too small for discriminator depth")
    return size


def conv_receptive_field(layers: Sequence[tuple[int, int]]) -> int:
    """Receptive field of one output entry of a stack of (kernel, stride) layers."""
    rf = 1
    for k, s in reversed(list(layers)):
        rf = (rf - 1) * s + k
    return rf


def receptive_field(config: Optional[DiscriminatorConfig] = None) -> int:
    config = config or DiscriminatorConfig()
    return conv_receptive_field([(k, s) for k, s, _ in config.conv_geometry()])


def receptive_box(config: DiscriminatorConfig, index: int) -> tuple[int, int]:
    """Inclusive input-coordinate span (before clipping to the image) seen by output ``index``."""
    lo = hi = index
    for k, s, p in reversed(config.conv_geometry()):
        lo = lo * s - p
        hi = hi * s - p + k - 1
    return lo, hi


@dataclass
class ProbeReport:
    checked: int
    violations: list[tuple[int, int]]
    empty_fields: list[tuple[int, int]]
    input_size: int

    @property
    def ok(self) -> bool:
        return not self.violations


def patch_independence_probe(model: PatchDiscriminator, inputs: tuple[torch.Tensor, torch.Tensor],
                             positions: Optional[Sequence[tuple[int, int]]] = None) -> ProbeReport:
    """Check that every logit has zero input gradient outside its receptive box.

    ``inputs`` is a single (source, candidate) pair with batch size 1.
    Normalization statistics are pinned to the probed input.
    """
    source, candidate = (t.detach().clone().requires_grad_(True) for t in inputs)
    if source.shape[0] != 1:
        raise ValueError("probe expects batch size 1")
    size_h, size_w = source.shape[-2:]
    with model.frozen_norm_stats():
        logits = model.logits(source, candidate)[0, 0]
        nh, nw = logits.shape
        if positions is None:
            positions = [(i, j) for i in range(nh) for j in range(nw)]
        violations, empty = [], []
        for i, j in positions:
            gs, gc = torch.autograd.grad(logits[i, j], (source, candidate), retain_graph=True)
            mag = (gs.abs() + gc.abs()).sum(dim=(0, 1))
            r0, r1 = receptive_box(model.config, i)
            c0, c1 = receptive_box(model.config, j)
            inside = torch.zeros(size_h, size_w, dtype=torch.bool)
            inside[max(r0, 0):min(r1, size_h - 1) + 1, max(c0, 0):min(c1, size_w - 1) + 1] = True
            if bool((mag[~inside] != 0).any()):
                violations.append((i, j))
            if not bool((mag[inside] != 0).any()):
                empty.append((i, j))
    return ProbeReport(len(positions), violations, empty, int(size_h))
