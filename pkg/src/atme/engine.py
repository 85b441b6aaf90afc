"""Epoch loop, optimizer schedule, checkpointing and single-pass inference."""

from __future__ import annotations

import io
import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import torch
import torch.nn as nn

from . import config as cfgmod
from .bridge import (DecisionStateStore, WTransform, WTransformConfig, corrupt_input, estimate_time,
                     sample_inference_state, StoreLoadError)
from .data import ImagePair, augment, collate, iterate_batches, resize_pair, sample_seed
from .discriminator import PatchDiscriminator, output_size
from .generator import UNetGenerator
from .monitor import EpochRecord, brownian_diagnostics, emit_history, records_from_dicts, records_to_dicts
from .objectives import (LossBreakdown, binary_entropy, discriminator_loss_from_logits,
                         gan_objective_from_logits, generator_loss_from_logits)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "atme-checkpoint-v1"


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_const: int = 100
    epochs_decay: int = 100
    lr0: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.epochs_const < 1 or self.epochs_decay < 0:
            raise ValueError("epochs_const must be >= 1 and epochs_decay >= 0")
        if self.lr0 <= 0 or self.batch_size < 1:
            raise ValueError("lr0 and batch_size must be positive")

    @property
    def total_epochs(self) -> int:
        return self.epochs_const + self.epochs_decay

    @classmethod
    def from_flat(cls, cfg: Mapping) -> "TrainConfig":
        return cls(cfg["train.epochs_const"], cfg["train.epochs_decay"], cfg["train.lr0"],
                   cfg["train.adam_beta1"], cfg["train.adam_beta2"], cfg["data.batch_size"], cfg["train.seed"])


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr0`` for the first ``epochs_const`` epochs, then linear to zero."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.total_epochs}")
    if epoch <= cfg.epochs_const:
        return cfg.lr0
    return cfg.lr0 * (cfg.total_epochs - epoch) / cfg.epochs_decay


class ATME(nn.Module):
    """Generator, discriminator and decision-map transform for one image size."""

    def __init__(self, cfg: Mapping):
        super().__init__()
        size = cfg["data.crop_size"]
        self.image_size = size
        self.generator = UNetGenerator(cfgmod.generator_config(cfg))
        self.discriminator = PatchDiscriminator(cfgmod.discriminator_config(cfg))
        n = output_size(self.discriminator.config, size)
        self.map_shape = (n, n)
        self.w_transform = WTransform(self.map_shape, (size, size),
                                      WTransformConfig(cfg["bridge.hidden_channels"], cfg["bridge.output_scale"]))

    def translate(self, x0: torch.Tensor, d_prev: torch.Tensor):
        """Corrupt ``x0`` by the lifted decision maps and run the generator once."""
        w = self.w_transform(d_prev)
        x_t = corrupt_input(x0, w)
        t_tilde = estimate_time(w)
        return self.generator(x_t, t_tilde), w, x_t, t_tilde


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Owns models, optimizers, the decision-state store and the monitor history.

    ``cfg`` is a resolved flat config (see :mod:`atme.config`); ``pairs`` are
    the training samples at their native resolution.
    """

    def __init__(self, cfg: Mapping, pairs: Sequence[ImagePair]):
        if not pairs:
            raise ValueError("no training pairs")
        self.cfg = dict(cfg)
        self.train_cfg = TrainConfig.from_flat(self.cfg)
        self.loss_cfg = cfgmod.loss_config(self.cfg)
        self.policy = cfgmod.augment_policy(self.cfg)
        size = self.cfg["data.crop_size"]
        self.pairs = [p if self.policy.enabled else resize_pair(p, size) for p in pairs]
        ids = [p.sample_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")
        by_id = sorted(self.pairs, key=lambda p: p.sample_id)[:self.cfg["monitor.eval_size"]]
        # one fixed augmented view per sample: the monitor should see the distribution D is trained on
        # (epoch 0 is never a training epoch, so these views are not reused by the data stream)
        self.eval_pairs = [augment(p, self.policy, sample_seed(self.cfg["data.seed"], 0, p.sample_id))
                           if self.policy.enabled else p for p in by_id]
        self.probe_pairs = self.eval_pairs[:self.cfg["monitor.probe_size"]]

        torch.manual_seed(self.train_cfg.seed)
        self.model = ATME(self.cfg)
        tc = self.train_cfg
        betas = (tc.adam_beta1, tc.adam_beta2)
        self.opt_g = torch.optim.Adam(list(self.model.generator.parameters())
                                      + list(self.model.w_transform.parameters()), lr=tc.lr0, betas=betas)
        self.opt_d = torch.optim.Adam(self.model.discriminator.parameters(), lr=tc.lr0, betas=betas)
        self.store = DecisionStateStore(self.model.map_shape, tc.seed, self.cfg["bridge.inference_sigma"])
        self.epoch = 0
        self.history: list[EpochRecord] = []
        self.w_snapshots: deque = deque(maxlen=self.cfg["monitor.dw_window"])
        self.step_hook: Optional[Callable] = None

    # -- one step ---------------------------------------------------------

    def train_step(self, batch) -> LossBreakdown:
        ids = list(batch.sample_ids)
        x0, y = batch.source, batch.target
        m = self.model
        d_prev = self.store.get_batch(ids)
        y_hat, w, x_t, t_tilde = m.translate(x0, d_prev)

        _set_requires_grad(m.discriminator, True)
        self.opt_d.zero_grad(set_to_none=True)
        real_logits = m.discriminator.logits(x0, y)
        fake_logits = m.discriminator.logits(x0, y_hat.detach())
        d_loss = discriminator_loss_from_logits(real_logits, fake_logits)
        gan_value = gan_objective_from_logits(real_logits.detach(), fake_logits.detach())
        self._check_finite(d_loss=d_loss)
        d_loss.backward()
        self.opt_d.step()

        _set_requires_grad(m.discriminator, False)
        self.opt_g.zero_grad(set_to_none=True)
        fresh_logits = m.discriminator.logits(x0, y_hat)
        out = generator_loss_from_logits(fresh_logits, y_hat, y, self.loss_cfg)
        self._check_finite(g_loss=out.g_loss, l1=out.l1_value)
        out.g_loss.backward()
        self.opt_g.step()
        _set_requires_grad(m.discriminator, True)

        self.store.put_batch(ids, torch.sigmoid(fresh_logits.detach())[:, 0])
        out.gan_value = gan_value
        out.d_loss = d_loss.detach()
        out.g_loss = out.g_loss.detach()
        out.extra = {"t_tilde_mean": float(t_tilde.detach().mean()),
                     "x_t_equals_x0": bool(torch.equal(x_t, x0))}
        if self.step_hook is not None:
            self.step_hook(self, batch, d_prev, out)
        return out

    def _check_finite(self, **terms) -> None:
        bad = {k: float(v.detach()) for k, v in terms.items() if not bool(torch.isfinite(v).all())}
        if bad:
            raise NonFiniteLossError(f"non-finite loss at epoch {self.epoch + 1}: {bad}")

    # -- epochs -----------------------------------------------------------

    def run_epoch(self) -> EpochRecord:
        epoch = self.epoch + 1
        lr = lr_at_epoch(epoch, self.train_cfg)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        for batch in iterate_batches(self.pairs, self.train_cfg.batch_size, epoch=epoch,
                                     seed=self.cfg["data.seed"], shuffle=True, policy=self.policy):
            self.train_step(batch)
        self.epoch = epoch
        self.store.epoch_tag = epoch
        record = self.evaluate()
        self.history.append(record)
        log.info("epoch %d  -L_GAN %.4f  entropy %.4f  t~ %.4g", epoch, record.neg_gan_loss,
                 record.mean_entropy, record.t_tilde_mean)
        return record

    @torch.no_grad()
    def evaluate(self) -> EpochRecord:
        """Fixed-sample pass: -L_GAN, mean patch entropy and pseudo-time stats."""
        m = self.model
        log_sum, n_patches, ent_sum, n_ent = 0.0, 0, 0.0, 0
        times = []
        bs = self.train_cfg.batch_size
        for start in range(0, len(self.eval_pairs), bs):
            batch = collate(self.eval_pairs[start:start + bs])
            d_prev = self.store.get_batch(batch.sample_ids)
            y_hat, _, _, t_tilde = m.translate(batch.source, d_prev)
            real = m.discriminator.logits(batch.source, batch.target).double()
            fake = m.discriminator.logits(batch.source, y_hat).double()
            log_sum += float((torch.nn.functional.logsigmoid(real)
                              + torch.nn.functional.logsigmoid(-fake)).sum())
            n_patches += real.numel()
            probs = torch.sigmoid(torch.cat([real, fake]))
            ent_sum += float(binary_entropy(probs).sum())
            n_ent += probs.numel()
            times.append(t_tilde.double())
        t_all = torch.cat(times)
        snap = m.w_transform(self.store.get_batch([p.sample_id for p in self.probe_pairs]))
        self.w_snapshots.append(snap.to(torch.float32).clone())
        autocorr = kurt = math.nan
        if len(self.w_snapshots) >= 3:
            rep = brownian_diagnostics(torch.stack(list(self.w_snapshots)).double().numpy())
            autocorr, kurt = rep.lag1_autocorr, rep.excess_kurtosis
        return EpochRecord(
            epoch=self.epoch,
            neg_gan_loss=-log_sum / n_patches,
            mean_entropy=ent_sum / n_ent,
            t_tilde_mean=float(t_all.mean()),
            t_tilde_std=float(t_all.std(unbiased=False)),
            dW_lag1_autocorr=autocorr,
            dW_excess_kurtosis=kurt,
        )

    def train(self, until_epoch: Optional[int] = None, out_dir: Optional[str | Path] = None,
              checkpoint_every: Optional[int] = None) -> list[EpochRecord]:
        """Run epochs up to ``until_epoch`` (default: the full schedule)."""
        until = until_epoch or self.train_cfg.total_epochs
        every = checkpoint_every or self.cfg["train.checkpoint_every"]
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        while self.epoch < until:
            self.run_epoch()
            if out is not None:
                emit_history(self.history, out / "history.csv", self.cfg["monitor.smooth_window"])
                if self.epoch % every == 0 or self.epoch == until:
                    self.save_checkpoint(out / f"checkpoint_{self.epoch:04d}.pt")
                    self.save_checkpoint(out / "checkpoint_last.pt")
        if out is not None:
            emit_history(self.history, out / "history.csv", self.cfg["monitor.smooth_window"])
        return self.history

    # -- checkpoints ------------------------------------------------------

    def state(self) -> dict:
        meta = {
            "epoch": self.epoch,
            "config": self.cfg,
            "history": records_to_dicts(self.history),
        }
        tensors = {}
        for prefix, module in (("gen", self.model.generator), ("disc", self.model.discriminator),
                               ("bridge", self.model.w_transform)):
            for name, t in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = t.detach().clone()
        snaps = torch.stack(list(self.w_snapshots)) if self.w_snapshots else torch.zeros(0)
        return {
            "format": CHECKPOINT_FORMAT,
            "meta": json.dumps(meta, sort_keys=True),
            "tensors": tensors,
            "optim_g": self.opt_g.state_dict(),
            "optim_d": self.opt_d.state_dict(),
            "store": self.store.state_dict(),
            "w_snapshots": snaps,
            "rng": {"torch": torch.get_rng_state()},
        }

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        buf = io.BytesIO()
        torch.save(self.state(), buf)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)
        return path

    @classmethod
    def from_checkpoint(cls, path: str | Path, pairs: Sequence[ImagePair],
                        cfg: Optional[Mapping] = None) -> "Trainer":
        """Restore a trainer; ``cfg`` replaces the stored config (e.g. a longer schedule)."""
        state = read_checkpoint(path)
        meta = json.loads(state["meta"])
        trainer = cls(cfgmod.resolve(meta["config"] if cfg is None else cfg), pairs)
        load_weights(trainer.model, state["tensors"])
        trainer.epoch = int(meta["epoch"])
        trainer.opt_g.load_state_dict(state["optim_g"])
        trainer.opt_d.load_state_dict(state["optim_d"])
        trainer.store = DecisionStateStore.from_state_dict(state["store"])
        trainer.history = records_from_dicts(meta["history"])
        for s in state["w_snapshots"]:
            trainer.w_snapshots.append(s.clone())
        torch.set_rng_state(state["rng"]["torch"])
        return trainer


def load_weights(model: ATME, tensors: Mapping[str, torch.Tensor]) -> None:
    try:
        for prefix, module in (("gen", model.generator), ("disc", model.discriminator),
                               ("bridge", model.w_transform)):
            sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            module.load_state_dict(sub)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not match config: {exc}") from exc


def load_model(path: str | Path) -> tuple[ATME, dict]:
    """Models and resolved config from a checkpoint, for inference."""
    state = read_checkpoint(path)
    cfg = cfgmod.resolve(json.loads(state["meta"])["config"])
    model = ATME(cfg)
    load_weights(model, state["tensors"])
    return model.eval(), cfg


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an ATME checkpoint")
    try:
        DecisionStateStore.from_state_dict(state["store"])
    except (StoreLoadError, KeyError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return state


@torch.no_grad()
def infer(model: ATME, source: torch.Tensor, seed: int = 0,
          sigma: Optional[float] = None) -> torch.Tensor:
    """Translate a batch (or one C x H x W image) with one generator pass.

    The previous decision map of image ``i`` is drawn as the maximum-entropy
    state with seed ``seed + i``.
    """
    single = source.ndim == 3
    x0 = source[None] if single else source
    size = model.image_size
    if tuple(x0.shape[-2:]) != (size, size):
        raise ValueError(f"input resolution {tuple(x0.shape[-2:])} incompatible with model size {size}x{size}")
    kwargs = {} if sigma is None else {"sigma": sigma}
    d = torch.stack([sample_inference_state(model.map_shape, seed + i, **kwargs) for i in range(len(x0))])
    y_hat, *_ = model.translate(x0, d[:, None].to(x0.dtype))
    return y_hat[0] if single else y_hat
