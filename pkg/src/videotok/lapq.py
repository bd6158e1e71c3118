"""Language-aligned pyramidal quantization.

Each level fuses three sources into a ``b``-channel pre-activation and quantizes
it with the shared lookup-free codebook:

* a lateral 1x1x1 projection of the encoder feature map,
* a carry projection of the previous level's (soft, signed) bit probabilities,
  resampled onto this level's grid,
* multi-head cross-attention from visual positions (queries) to the caption's
  word vectors (keys/values).
"""

from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ValidationError
from .lfq import PROB_CLAMP, CodebookConfig, QuantizedField, code_to_index, quantize_sign


def _ratio(src: int, dst: int) -> tuple[str, int]:
    if src == dst:
        return "same", 1
    big, small = max(src, dst), min(src, dst)
    r = big // small
    if big % small or r & (r - 1):
        raise ValidationError(f"grid ratio {src}->{dst} is not a power of two")
    return ("down" if src > dst else "up"), r


def align_tensor(x: Tensor, grid: tuple[int, int, int]) -> Tensor:
    """Average-pool (down) or nearest-replicate (up) the trailing 3 dims onto ``grid``."""
    for axis, target in zip((2, 3, 4), grid):
        kind, r = _ratio(x.shape[axis], target)
        if kind == "down":
            shape = list(x.shape)
            shape[axis:axis + 1] = [target, r]
            x = x.reshape(shape).mean(axis + 1)
        elif kind == "up":
            x = x.repeat_interleave(r, dim=axis)
    return x


def align_grids(q: QuantizedField, grid: tuple[int, int, int]) -> QuantizedField:
    if q.bit_probs is None:
        raise ValidationError("grid alignment needs bit probabilities")
    probs = align_tensor(q.bit_probs, grid)
    hard = torch.where(probs >= 0.5, 1.0, -1.0).to(probs.dtype)
    return QuantizedField(z=align_tensor(q.z, grid), code=hard, bit_probs=probs, indices=code_to_index(hard))


class TextBitPrior(nn.Module):
    """Frozen projection of a text embedding to per-bit Bernoulli probabilities."""

    def __init__(self, text_dim: int, bits: int, scale: float = 2.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(bits, text_dim) * scale, requires_grad=False)

    def forward(self, e_t: Tensor) -> Tensor:
        logits = e_t @ self.weight.t()
        return torch.sigmoid(logits).clamp(PROB_CLAMP, 1 - PROB_CLAMP).detach()

    def to_text_space(self, signed_code: Tensor) -> Tensor:
        """Transpose map, bit space -> text space, along the last dim."""
        return signed_code @ self.weight


class QuantBlock(nn.Module):
    def __init__(self, feat_channels: int, bits: int, text_dim: int, attn_dim: int = 32, heads: int = 2,
                 carry: bool = True):
        super().__init__()
        if attn_dim % heads:
            raise ValidationError("attention width must divide evenly into heads")
        self.bits, self.heads, self.attn_dim = bits, heads, attn_dim
        self.lateral = nn.Conv3d(feat_channels, bits, 1, bias=False)
        self.carry = nn.Conv3d(bits, bits, 1, bias=False) if carry else None
        self.query = nn.Conv3d(feat_channels, attn_dim, 1, bias=False)
        self.key = nn.Linear(text_dim, attn_dim, bias=False)
        self.value = nn.Linear(text_dim, attn_dim, bias=False)
        self.fuse = nn.Linear(attn_dim, bits, bias=False)

    def attend(self, feat: Tensor, words: Tensor, word_mask: Tensor | None) -> Tensor:
        """Cross-attention output projected to ``bits`` channels, ``(B, bits, T, H, W)``."""
        b, _, t, h, w = feat.shape
        nh, dh = self.heads, self.attn_dim // self.heads
        q = self.query(feat).reshape(b, nh, dh, t * h * w).transpose(2, 3)      # B, nh, N, dh
        k = self.key(words).reshape(b, -1, nh, dh).transpose(1, 2)              # B, nh, n, dh
        v = self.value(words).reshape(b, -1, nh, dh).transpose(1, 2)
        scores = q @ k.transpose(2, 3) / math.sqrt(dh)                          # B, nh, N, n
        if word_mask is not None:
            scores = scores.masked_fill(~word_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(-1)
        o = (attn @ v).transpose(1, 2).reshape(b, t * h * w, self.attn_dim)
        return self.fuse(o).transpose(1, 2).reshape(b, self.bits, t, h, w)

    def forward(self, q_prev: QuantizedField | None, feat: Tensor, words: Tensor | None,
                word_mask: Tensor | None, quantizer: Callable[[Tensor], QuantizedField]) -> QuantizedField:
        z = self.lateral(feat)
        if q_prev is not None:
            if self.carry is None:
                raise ValidationError("level has no carry path but received a previous level")
            if q_prev.bit_probs is not None:
                prev = 2 * align_tensor(q_prev.bit_probs, feat.shape[2:]) - 1
            else:
                prev = align_tensor(q_prev.code, feat.shape[2:])
            if prev.shape[1] != self.bits:
                raise ValidationError("carry channel mismatch")
            z = z + self.carry(prev)
        if words is not None:
            z = z + self.attend(feat, words, word_mask)
        return quantizer(z)


class LaPQ(nn.Module):
    def __init__(self, feat_channels: list[int], codebook: CodebookConfig, text_dim: int,
                 attn_dim: int = 32, heads: int = 2, text_conditioning: bool = True, prior_scale: float = 2.0):
        super().__init__()
        self.codebook = codebook
        self.text_conditioning = text_conditioning
        self.blocks = nn.ModuleList(
            QuantBlock(c, codebook.bits, text_dim, attn_dim, heads, carry=(i > 0))
            for i, c in enumerate(feat_channels)
        )
        self.text_prior = TextBitPrior(text_dim, codebook.bits, prior_scale)
        self.table_quantizers: nn.ModuleList | None = None  # per-level baseline override
        self.surrogate = False

    def quantizer_for(self, level: int) -> Callable[[Tensor], QuantizedField]:
        if self.table_quantizers is not None:
            return self.table_quantizers[level]
        return lambda z: quantize_sign(z, self.codebook, surrogate=self.surrogate)

    def forward(self, pyramid: list[Tensor], words: Tensor | None, word_mask: Tensor | None = None,
                states: list[QuantBlock] | None = None) -> list[QuantizedField]:
        blocks = list(states) if states is not None else list(self.blocks)
        if len(blocks) != len(pyramid):
            raise ValidationError(f"{len(blocks)} block states for {len(pyramid)} pyramid levels")
        if not self.text_conditioning:
            words = None
        out: list[QuantizedField] = []
        prev = None
        for level, (block, feat) in enumerate(zip(blocks, pyramid)):
            prev = block(prev, feat, words, word_mask, self.quantizer_for(level))
            out.append(prev)
        return out


def text_bit_prior(e_t: Tensor, prior: TextBitPrior) -> Tensor:
    return prior(e_t)
