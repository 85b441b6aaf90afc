"""Per-epoch convergence records, smoothing and noise-increment diagnostics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .objectives import LOG2, LOG4

CSV_COLUMNS = ("epoch", "neg_gan_loss", "smoothed", "mean_entropy", "t_tilde_mean", "t_tilde_std",
               "dw_autocorr", "dw_kurtosis", "log4_reference")


@dataclass
class EpochRecord:
    epoch: int
    neg_gan_loss: float
    mean_entropy: float
    t_tilde_mean: float
    t_tilde_std: float
    dW_lag1_autocorr: float = math.nan
    dW_excess_kurtosis: float = math.nan

    def __post_init__(self):
        if not -1e-9 <= self.mean_entropy <= LOG2 + 1e-9:
            raise ValueError(f"mean_entropy {self.mean_entropy} outside [0, log 2]")


def smooth(series: Sequence[float], window: int = 5) -> list[float]:
    """Centered moving average; windows shrink at the boundaries."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    values = np.asarray(series, dtype=np.float64)
    n = len(values)
    if n == 0:
        return []
    if window > n:
        warnings.warn(f"smoothing window {window} exceeds series length {n}; using the full mean",
                      RuntimeWarning)
        return [float(values.mean())] * n
    if window == 1:
        return [float(v) for v in values]
    left, right = (window - 1) // 2, window // 2
    out = []
    for i in range(n):
        lo, hi = max(0, i - left), min(n, i + right + 1)
        out.append(float(values[lo:hi].mean()))
    return out


def distance_to_equilibrium(records: Sequence[EpochRecord], tail: int, window: int = 5,
                            from_start: bool = False) -> float:
    """|mean smoothed -L_GAN over the last (or first) ``tail`` epochs - log 4|."""
    if not records:
        raise ValueError("empty history")
    if not 1 <= tail <= len(records):
        raise ValueError(f"tail {tail} must lie in 1..{len(records)}")
    sm = smooth([r.neg_gan_loss for r in records], min(window, len(records)))
    part = sm[:tail] if from_start else sm[-tail:]
    return abs(float(np.mean(part)) - LOG4)


@dataclass
class BrownianReport:
    n_increments: int
    n_pairs: int
    lag1_autocorr: float
    skewness: float
    excess_kurtosis: float
    degenerate: bool


def brownian_diagnostics(w_history: Sequence, window: Optional[int] = None) -> BrownianReport:
    """Moment diagnostics of epoch-to-epoch increments of noise-map snapshots.

    ``w_history`` stacks snapshots along the first axis (one per epoch); the
    first ``window`` snapshots are used when given. Increments of every
    pixel are pooled and centred on their common mean; the lag-1
    autocorrelation pairs increments at consecutive epochs of the same pixel.
    Zero increment variance is reported as ``degenerate`` with NaN statistics.
    """
    w = np.asarray(w_history, dtype=np.float64)
    if window is not None:
        w = w[:window]
    if w.shape[0] < 3:
        raise ValueError(f"need at least 3 snapshots, got {w.shape[0]}")
    inc = np.diff(w.reshape(w.shape[0], -1), axis=0)
    centred = inc - inc.mean()
    denom = float((centred ** 2).sum())
    n_pairs = centred[:-1].size
    if denom <= 1e-24 * max(1, centred.size):
        return BrownianReport(inc.size, n_pairs, math.nan, math.nan, math.nan, True)
    num = float((centred[:-1] * centred[1:]).sum())
    flat = inc.ravel()
    return BrownianReport(
        n_increments=inc.size,
        n_pairs=n_pairs,
        lag1_autocorr=num / denom,
        skewness=float(stats.skew(flat)),
        excess_kurtosis=float(stats.kurtosis(flat, fisher=True)),
        degenerate=False,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_history(records: Sequence[EpochRecord], path: str | Path, window: int = 5) -> Path:
    path = Path(path)
    sm = smooth([r.neg_gan_loss for r in records], min(window, max(1, len(records)))) if records else []
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r, s in zip(records, sm):
            writer.writerow([r.epoch, _fmt(r.neg_gan_loss), _fmt(s), _fmt(r.mean_entropy), _fmt(r.t_tilde_mean),
                             _fmt(r.t_tilde_std), _fmt(r.dW_lag1_autocorr), _fmt(r.dW_excess_kurtosis),
                             _fmt(LOG4)])
    return path


def read_history(path: str | Path) -> list[EpochRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected history header {reader.fieldnames}")
        return [
            EpochRecord(
                epoch=int(row["epoch"]),
                neg_gan_loss=float(row["neg_gan_loss"]),
                mean_entropy=float(row["mean_entropy"]),
                t_tilde_mean=float(row["t_tilde_mean"]),
                t_tilde_std=float(row["t_tilde_std"]),
                dW_lag1_autocorr=float(row["dw_autocorr"]),
                dW_excess_kurtosis=float(row["dw_kurtosis"]),
            )
            for row in reader
        ]


def records_to_dicts(records: Sequence[EpochRecord]) -> list[dict]:
    return [asdict(r) for r in records]


def records_from_dicts(rows: Sequence[dict]) -> list[EpochRecord]:
    names = {f.name for f in fields(EpochRecord)}
    return [EpochRecord(**{k: v for k, v in row.items() if k in names}) for row in rows]


def plot_history(records: Sequence[EpochRecord], path: str | Path, window: int = 5) -> Path:
    if not records:
        raise ValueError("empty history")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in records]
    raw = [r.neg_gan_loss for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, raw, alpha=0.35, label="-L_GAN")
    ax.plot(epochs, smooth(raw, min(window, len(raw))), label="smoothed")
    ax.axhline(LOG4, color="k", linestyle="--", label="log 4")
    ax.set_xlabel("epoch")
    ax.set_ylabel("-L_GAN")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
