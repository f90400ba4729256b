"""PSNR / SSIM and eval-split sweeps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 8


@dataclass(frozen=True)
class MetricRow:
    task: str
    psnr: float
    ssim: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ContractError("MetricRow needs n >= 1")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ContractError("peak must be > 0")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` tiles and channels.

    Accepts [H, W], [C, H, W] or [N, C, H, W]; trailing rows/columns that do
    not fill a whole tile are ignored.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: {a.shape} vs {b.shape}")
    H, W = a.shape[-2:]
    if H < window or W < window:
        raise ContractError(f"image {H}x{W} smaller than the {window}x{window} window")
    nh, nw = H // window, W // window
    lead = a.shape[:-2]

    def tiles(x):
        x = x[..., :nh * window, :nw * window]
        return x.reshape(lead + (nh, window, nw, window))

    ta, tb = tiles(a), tiles(b)
    ax = (-3, -1)
    mu_a, mu_b = ta.mean(axis=ax), tb.mean(axis=ax)
    va = ta.var(axis=ax)
    vb = tb.var(axis=ax)
    cov = ((ta - np.expand_dims(mu_a, ax)) * (tb - np.expand_dims(mu_b, ax))).mean(axis=ax)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


def restore(predict: Callable, degraded: np.ndarray, t_mat: int) -> np.ndarray:
    """restored = y - predicted residual, computed in network space, clipped to [0, 1]."""
    from .degrade import from_net, to_net

    y = to_net(degraded)
    res = predict(y, np.full(y.shape[0], t_mat))
    return np.clip(from_net(y - res), 0.0, 1.0)


def evaluate(predict: Callable, pairs, t_mat: int, task: str = "", batch: int = 16) -> MetricRow:
    """Mean per-image PSNR / SSIM of restored vs clean over ``pairs``.

    ``predict(x, t)`` maps a network-space batch to the predicted residual.
    """
    n = len(pairs)
    if n == 0:
        raise ContractError("evaluate needs a non-empty split")
    ps, ss = [], []
    for i in range(0, n, batch):
        clean = pairs.clean[i:i + batch]
        out = restore(predict, pairs.degraded[i:i + batch], t_mat)
        for c, o in zip(clean, out):
            ps.append(psnr(o, c))
            ss.append(ssim(o, c))
    return MetricRow(task, float(np.mean(ps)), float(np.mean(ss)), n)


def baseline(pairs, task: str = "") -> MetricRow:
    """Degraded-vs-clean metrics (the identity restorer)."""
    ps = [psnr(d, c) for c, d in zip(pairs.clean, pairs.degraded)]
    ss = [ssim(d, c) for c, d in zip(pairs.clean, pairs.degraded)]
    return MetricRow(task, float(np.mean(ps)), float(np.mean(ss)), len(pairs))
