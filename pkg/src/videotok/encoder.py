"""Feature pyramid encoder with low-rank adapters, frozen reference encoder, and
the multi-level decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ValidationError


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 4
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 48, 64)
    temporal_halving: tuple[int, ...] = (2, 4)  # 1-based stages that halve T
    adapter_rank: int = 16
    adapter_alpha: float = 32.0
    decoder_width: int = 32
    decoder_levels: str = "all"  # "all" or "last"

    def channels(self) -> list[int]:
        if len(self.stage_channels) < self.levels:
            extra = [self.stage_channels[-1]] * (self.levels - len(self.stage_channels))
            return list(self.stage_channels) + extra
        return list(self.stage_channels[: self.levels])

    def temporal_strides(self) -> list[int]:
        return [2 if (l + 1) in self.temporal_halving else 1 for l in range(self.levels)]

    def temporal_factor(self) -> int:
        f = 1
        for s in self.temporal_strides():
            f *= s
        return f

    def grids(self, t: int, h: int, w: int) -> list[tuple[int, int, int]]:
        out = []
        for l, ts in enumerate(self.temporal_strides()):
            t, h, w = t // ts, h // 2, w // 2
            out.append((t, h, w))
        return out

    def validate_input(self, t: int, h: int, w: int) -> None:
        step = 2**self.levels
        if h % step or w % step:
            raise ValidationError(f"spatial dims {h}x{w} not divisible by 2^{self.levels}")
        if t % self.temporal_factor():
            raise ValidationError(f"T={t} not divisible by temporal factor {self.temporal_factor()}")


class LowRankAdapter(nn.Module):
    """Delta ``(alpha / rank) * B @ A`` on a ``d_out x d_in`` weight; B starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int = 16, alpha: float = 32.0):
        super().__init__()
        self.rank, self.alpha = rank, alpha
        self.A = nn.Parameter(torch.randn(rank, d_in) / d_in**0.5)
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> Tensor:
        return self.scale * (self.B @ self.A)


def apply_adapter(w_base: Tensor, adapter: LowRankAdapter, x: Tensor) -> Tensor:
    """``y = W x + (alpha/r) B (A x)`` for column vectors ``x`` (last dim = batch ok)."""
    if adapter.A.shape[0] != adapter.B.shape[1] or adapter.A.shape[0] != adapter.rank:
        raise ValidationError("adapter rank mismatch")
    if adapter.A.shape[1] != w_base.shape[1] or adapter.B.shape[0] != w_base.shape[0]:
        raise ValidationError("adapter shape does not match base weight")
    return w_base @ x + adapter.scale * (adapter.B @ (adapter.A @ x))


class AdaptedConv3d(nn.Module):
    """Frozen 3x3x3 convolution plus a trainable low-rank weight delta."""

    def __init__(self, c_in: int, c_out: int, stride: tuple[int, int, int], rank: int, alpha: float,
                 adapter: bool = True):
        super().__init__()
        self.stride = stride
        fan_in = c_in * 27
        w = torch.randn(c_out, c_in, 3, 3, 3) * (1.5 / fan_in) ** 0.5
        self.weight = nn.Parameter(w, requires_grad=False)
        self.adapter = LowRankAdapter(fan_in, c_out, rank, alpha) if adapter else None

    def effective_weight(self) -> Tensor:
        if self.adapter is None:
            return self.weight
        return self.weight + self.adapter.delta().view_as(self.weight)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.effective_weight(), stride=self.stride, padding=1)


class Encoder(nn.Module):
    def __init__(self, config: PyramidConfig, adapters: bool = True):
        super().__init__()
        self.config = config
        chans = [config.in_channels] + config.channels()
        self.stages = nn.ModuleList(
            AdaptedConv3d(chans[i], chans[i + 1], (ts, 2, 2), config.adapter_rank, config.adapter_alpha, adapters)
            for i, ts in enumerate(config.temporal_strides())
        )

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.dim() != 5:
            raise ValidationError("expected (B, C, T, H, W) input")
        self.config.validate_input(*x.shape[2:])
        feats = []
        for stage in self.stages:
            x = torch.tanh(stage(x))
            feats.append(x)
        return feats


class ReferenceEncoder(Encoder):
    """Frozen encoder with its own seed; its output matches the last pyramid level's layout."""

    def __init__(self, config: PyramidConfig, seed: int):
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            super().__init__(config, adapters=False)
        finally:
            torch.random.set_rng_state(gen_state)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: Tensor) -> Tensor:
        with torch.no_grad():
            return super().forward(x)[-1]


class Decoder(nn.Module):
    """Top-down fusion: each level's code is projected, the running map is
    upsampled onto the next finer grid and summed with it, then refined."""

    def __init__(self, config: PyramidConfig, bits: int):
        super().__init__()
        self.config = config
        d = config.decoder_width
        self.proj = nn.ModuleList(nn.Conv3d(bits, d, 1, bias=False) for _ in range(config.levels))
        self.refine = nn.ModuleList(nn.Conv3d(d, d, 3, padding=1) for _ in range(config.levels))
        self.head = nn.Conv3d(d, d, 3, padding=1)
        self.out = nn.Conv3d(d, config.in_channels, 3, padding=1)
        for m in [*self.refine, self.head, self.out]:
            nn.init.zeros_(m.bias)

    def forward(self, codes: list[Tensor], out_size: tuple[int, int, int] | None = None) -> Tensor:
        if len(codes) != self.config.levels:
            raise ValidationError(f"decoder expects {self.config.levels} levels, got {len(codes)}")
        use_all = self.config.decoder_levels == "all"
        h = None
        for l in reversed(range(self.config.levels)):
            grid = codes[l].shape[2:]
            if h is not None:
                h = F.interpolate(h, size=grid, mode="trilinear", align_corners=False)
            if use_all or l == self.config.levels - 1:
                p = self.proj[l](codes[l])
                h = p if h is None else h + p
            h = torch.tanh(self.refine[l](h))
        t1, h1, w1 = codes[0].shape[2:]
        if out_size is None:
            out_size = (t1 * self.config.temporal_strides()[0], h1 * 2, w1 * 2)
        h = F.interpolate(h, size=out_size, mode="trilinear", align_corners=False)
        h = torch.tanh(self.head(h))
        return self.out(h)
