"""Reconstruction and codebook metrics."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor

from .errors import ValidationError
from .lfq import QuantizedField, utilization
from .objectives import ssim as _ssim

PSNR_CAP = 99.0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(np.asarray(x))


def psnr(x, x_hat) -> float:
    """``10 log10(1 / MSE)`` for signals in [0, 1], capped at 99 dB."""
    x, x_hat = _as_tensor(x).double(), _as_tensor(x_hat).double()
    if x.shape != x_hat.shape:
        raise ValidationError(f"psnr: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = float(((x - x_hat) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def ssim(x, x_hat) -> float:
    x, x_hat = _as_tensor(x).double(), _as_tensor(x_hat).double()
    if x.shape != x_hat.shape:
        raise ValidationError(f"ssim: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    with torch.no_grad():
        return float(_ssim(x, x_hat))


def level_utilization(q_levels: list[QuantizedField], K: int) -> list[float]:
    return [utilization(q.indices, K) for q in q_levels]


def perplexity(nll: float) -> float:
    return math.exp(nll)
