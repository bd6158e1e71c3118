"""Lookup-free binary quantization over the shared {-1, +1}^b codebook.

Fields are channel-first: ``(B, b, T, H, W)``; bit ``i`` of a code sits in
channel ``i`` and is the most significant bit for ``i == 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ValidationError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class CodebookConfig:
    bits: int = 10
    temperature: float = 1.0
    clamp: float = 1.0  # straight-through passes gradient where |z| <= clamp

    def __post_init__(self):
        if self.bits < 1:
            raise ValidationError("codebook needs at least one bit")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")

    @property
    def size(self) -> int:
        return 2**self.bits


@dataclass
class QuantizedField:
    z: Tensor               # pre-activation
    code: Tensor            # forward values in {-1, +1}; carries the straight-through gradient
    bit_probs: Tensor | None
    indices: Tensor         # (B, T, H, W) int64
    aux_loss: Tensor | None = None  # baseline quantizers only

    @property
    def bits(self) -> int:
        return self.code.shape[1]

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.code.shape[2:])

    @property
    def hard_code(self) -> Tensor:
        return self.code.detach()


class _SignSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, clamp):
        ctx.save_for_backward(z)
        ctx.clamp = clamp
        return torch.where(z >= 0, torch.ones_like(z), -torch.ones_like(z))

    @staticmethod
    def backward(ctx, grad):
        (z,) = ctx.saved_tensors
        return grad * (z.abs() <= ctx.clamp).to(grad.dtype), None


def sign_ste(z: Tensor, clamp: float = 1.0) -> Tensor:
    """sign(z) with sign(0) = +1; backward passes the gradient where |z| <= clamp."""
    return _SignSTE.apply(z, clamp)


def code_to_index(code: Tensor, dim: int = 1) -> Tensor:
    if not torch.all((code == 1) | (code == -1)):
        raise ValidationError("code entries must be -1 or +1")
    b = code.shape[dim]
    weights = (2 ** torch.arange(b - 1, -1, -1, dtype=torch.int64))
    shape = [1] * code.dim()
    shape[dim] = b
    return ((code > 0).to(torch.int64) * weights.view(shape)).sum(dim)


def index_to_code(index: Tensor, bits: int, dim: int = 1) -> Tensor:
    index = torch.as_tensor(index, dtype=torch.int64)
    if torch.any(index < 0) or torch.any(index >= 2**bits):
        raise ValidationError("index out of codebook range")
    shifts = torch.arange(bits - 1, -1, -1, dtype=torch.int64)
    bits_t = (index.unsqueeze(-1) >> shifts) & 1
    code = bits_t.to(torch.float32) * 2 - 1
    return code.movedim(-1, dim) if dim != -1 else code


def quantize_sign(z: Tensor, config: CodebookConfig, surrogate: bool = False) -> QuantizedField:
    """Quantize a ``(B, b, ...)`` pre-activation.

    With ``surrogate=True`` the forward value is ``hardtanh(z)`` instead of the
    hard code; its exact derivative is the straight-through rule, which lets a
    finite-difference oracle verify the backward pass end to end.
    """
    if z.shape[1] != config.bits:
        raise ValidationError(f"expected {config.bits} channels, got {z.shape[1]}")
    code = F.hardtanh(z, -config.clamp, config.clamp) if surrogate else sign_ste(z, config.clamp)
    with torch.no_grad():
        hard = torch.where(z >= 0, 1.0, -1.0).to(z.dtype)
        indices = code_to_index(hard)
    probs = torch.sigmoid(z / config.temperature)
    return QuantizedField(z=z, code=code, bit_probs=probs, indices=indices)


def _clamp_p(p: Tensor) -> Tensor:
    return p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)


def factorized_entropy(bit_probs: Tensor, dim: int = 1) -> Tensor:
    """Entropy in nats of independent Bernoulli bits, summed over ``dim``."""
    p = _clamp_p(bit_probs)
    return -(p * p.log() + (1 - p) * (1 - p).log()).sum(dim)


def bernoulli_kl(p: Tensor, q: Tensor, dim: int = 1) -> Tensor:
    """KL(p || q) between factorized Bernoulli vectors, summed over ``dim``."""
    p, q = _clamp_p(p), _clamp_p(q)
    return (p * (p.log() - q.log()) + (1 - p) * ((1 - p).log() - (1 - q).log())).sum(dim)


def utilization(indices, K: int) -> float:
    idx = torch.as_tensor(indices).reshape(-1)
    if idx.numel() == 0:
        return 0.0
    if torch.any(idx < 0) or torch.any(idx >= K):
        raise ValidationError("index out of range")
    return torch.unique(idx).numel() / K


def max_entropy(bits: int) -> float:
    return bits * math.log(2)
