"""Table-based quantizers for the quantizer ablation: VQ, grouped VQ, residual VQ."""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .lfq import QuantizedField


def _nearest(x: Tensor, table: Tensor) -> Tensor:
    # x: (N, d), table: (M, d); ties go to the lowest index
    d = (x * x).sum(1, keepdim=True) - 2 * x @ table.t() + (table * table).sum(1)[None]
    return d.argmin(1)


def _flatten(z: Tensor) -> tuple[Tensor, tuple]:
    b, c, t, h, w = z.shape
    return z.permute(0, 2, 3, 4, 1).reshape(-1, c), (b, c, t, h, w)


def _unflatten(x: Tensor, shape: tuple) -> Tensor:
    b, c, t, h, w = shape
    return x.reshape(b, t, h, w, c).permute(0, 4, 1, 2, 3)


class VectorQuantizer(nn.Module):
    """Nearest-neighbour codebook with straight-through gradient and commitment."""

    def __init__(self, dim: int, entries: int = 64, beta: float = 0.25):
        super().__init__()
        self.entries, self.beta = entries, beta
        self.table = nn.Parameter(torch.randn(entries, dim) * 0.5)

    def lookup(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (selected entries, indices, codebook + commitment loss)."""
        idx = _nearest(x.detach(), self.table.detach())
        e = self.table[idx]
        loss = ((x.detach() - e) ** 2).sum(1).mean() + self.beta * ((x - e.detach()) ** 2).sum(1).mean()
        return e, idx, loss

    def forward(self, z: Tensor) -> QuantizedField:
        x, shape = _flatten(z)
        e, idx, loss = self.lookup(x)
        q = x + (e - x).detach()
        b, _, t, h, w = shape
        return QuantizedField(z=z, code=_unflatten(q, shape), bit_probs=None,
                              indices=idx.reshape(b, t, h, w), aux_loss=loss)


class GroupedVQ(nn.Module):
    """Channels split into groups, each quantized against its own table."""

    def __init__(self, dim: int, groups: int = 2, entries: int = 32, beta: float = 0.25):
        super().__init__()
        sizes = [dim // groups + (1 if i < dim % groups else 0) for i in range(groups)]
        self.sizes, self.entries = sizes, entries
        self.quantizers = nn.ModuleList(VectorQuantizer(s, entries, beta) for s in sizes)

    def forward(self, z: Tensor) -> QuantizedField:
        x, shape = _flatten(z)
        parts, idx, loss = [], torch.zeros(x.shape[0], dtype=torch.int64), 0
        for vq, chunk in zip(self.quantizers, x.split(self.sizes, dim=1)):
            e, i, l = vq.lookup(chunk)
            parts.append(chunk + (e - chunk).detach())
            idx = idx * self.entries + i
            loss = loss + l
        b, _, t, h, w = shape
        return QuantizedField(z=z, code=_unflatten(torch.cat(parts, 1), shape), bit_probs=None,
                              indices=idx.reshape(b, t, h, w), aux_loss=loss)


class ResidualVQ(nn.Module):
    """Each stage quantizes the residual left by the previous stages."""

    def __init__(self, dim: int, stages: int = 2, entries: int = 32, beta: float = 0.25):
        super().__init__()
        self.entries = entries
        self.quantizers = nn.ModuleList(VectorQuantizer(dim, entries, beta) for _ in range(stages))

    def forward(self, z: Tensor) -> QuantizedField:
        x, shape = _flatten(z)
        residual, total = x, torch.zeros_like(x)
        idx, loss = torch.zeros(x.shape[0], dtype=torch.int64), 0
        for vq in self.quantizers:
            e, i, l = vq.lookup(residual)
            total = total + e.detach()
            residual = residual - e.detach()
            idx = idx * self.entries + i
            loss = loss + l
        b, _, t, h, w = shape
        q = x + (total - x).detach()
        return QuantizedField(z=z, code=_unflatten(q, shape), bit_probs=None,
                              indices=idx.reshape(b, t, h, w), aux_loss=loss)
