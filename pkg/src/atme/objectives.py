"""Adversarial, reconstruction and entropy objectives.

Probabilities are the public currency of these functions; the training loop
uses the ``*_from_logits`` variants, which evaluate the same quantities in
log-space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

EPS = 1e-7
LOG4 = math.log(4.0)
LOG2 = math.log(2.0)

ADVERSARIAL_MODES = ("nonsaturating", "minimax")


@dataclass
class LossConfig:
    lambda_l1: float = 100.0
    adversarial_mode: str = "nonsaturating"
    eps: float = EPS

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.adversarial_mode not in ADVERSARIAL_MODES:
            raise ValueError(
                f"adversarial_mode must be one of {ADVERSARIAL_MODES}, got {self.adversarial_mode!r}"
            )


@dataclass
class LossBreakdown:
    """Loss terms of one step. Tensor fields keep their graph; use ``to_dict`` for logging."""

    gan_value: Optional[torch.Tensor] = None
    l1_value: Optional[torch.Tensor] = None
    d_loss: Optional[torch.Tensor] = None
    g_loss: Optional[torch.Tensor] = None
    adv_value: Optional[torch.Tensor] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for name in ("gan_value", "l1_value", "d_loss", "g_loss", "adv_value"):
            v = getattr(self, name)
            if v is not None:
                out[name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        out.update(self.extra)
        return out


def _clamped(p: torch.Tensor, eps: float) -> torch.Tensor:
    if bool(((p <= 0) | (p >= 1)).any()):
        warnings.warn("probabilities at 0 or 1 clamped before taking logs", RuntimeWarning)
    return p.clamp(eps, 1 - eps)


def gan_objective(d_real: torch.Tensor, d_fake: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Patch-averaged ``log D(real) + log(1 - D(fake))``.

    Both arguments are decision-map probabilities with equal patch counts;
    the mean runs over patches and over the batch.
    """
    if d_real.shape != d_fake.shape:
        raise ValueError(f"decision maps differ in shape: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    d_real = _clamped(d_real, eps)
    d_fake = _clamped(d_fake, eps)
    return (torch.log(d_real) + torch.log1p(-d_fake)).mean()


def gan_objective_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    if real_logits.shape != fake_logits.shape:
        raise ValueError(
            f"decision maps differ in shape: {tuple(real_logits.shape)} vs {tuple(fake_logits.shape)}"
        )
    return (F.logsigmoid(real_logits) + F.logsigmoid(-fake_logits)).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return -gan_objective(d_real, d_fake, eps)


def discriminator_loss_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    # per-patch BCE: real labelled 1, fake labelled 0
    real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return real + fake


def _adversarial_term_from_logits(fake_logits: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "nonsaturating":
        return -F.logsigmoid(fake_logits).mean()
    if mode == "minimax":
        return F.logsigmoid(-fake_logits).mean()
    raise ValueError(f"unknown adversarial_mode {mode!r}")


def l1_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    return (y_hat - y).abs().mean()


def generator_loss(d_fake: torch.Tensor, y_hat: torch.Tensor, y: torch.Tensor,
                   cfg: Optional[LossConfig] = None) -> LossBreakdown:
    """Adversarial term on fake probabilities plus ``lambda_l1 * mean|y_hat - y|``."""
    cfg = cfg or LossConfig()
    logits = torch.logit(_clamped(d_fake, cfg.eps))
    return generator_loss_from_logits(logits, y_hat, y, cfg)


def generator_loss_from_logits(fake_logits: torch.Tensor, y_hat: torch.Tensor, y: torch.Tensor,
                               cfg: Optional[LossConfig] = None) -> LossBreakdown:
    cfg = cfg or LossConfig()
    if cfg.lambda_l1 < 0:
        raise ValueError(f"lambda_l1 must be >= 0, got {cfg.lambda_l1}")
    adv = _adversarial_term_from_logits(fake_logits, cfg.adversarial_mode)
    l1 = l1_loss(y_hat, y)
    return LossBreakdown(l1_value=l1, adv_value=adv, g_loss=adv + cfg.lambda_l1 * l1)


def theoretical_optimum() -> float:
    """Value of the patch objective at the maximum-entropy equilibrium, ``-log 4``."""
    return -LOG4


def binary_entropy(p: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    p = p.clamp(eps, 1 - eps)
    return -(p * torch.log(p) + (1 - p) * torch.log1p(-p))


def mean_patch_entropy(d_probs: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Average binary entropy over decision-map entries; ``log 2`` iff every entry is 1/2."""
    return binary_entropy(d_probs, eps).mean()
