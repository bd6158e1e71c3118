"""Run configuration, batching, and the assembled tokenizer."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .baselines import GroupedVQ, ResidualVQ, VectorQuantizer
from .encoder import Decoder, Encoder, PyramidConfig, ReferenceEncoder
from .errors import ValidationError
from .fixtures import TEXT_DIM, CaptionedClip, embed_text, mask_video
from .lapq import LaPQ
from .lfq import CodebookConfig, QuantizedField, quantize_sign
from .objectives import (
    ARHead, LossBreakdown, LossWeights, PerceptualProxy, build_sequence, ar_nll, codebook_loss,
    drift_loss, recon_loss,
)

QUANTIZERS = ("vq", "gvq", "rvq", "lfq", "lapq")


@dataclass
class RunConfig:
    seed: int = 0
    levels: int = 4
    bits: int = 10
    temperature: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    adapter_rank: int = 16
    adapter_alpha: float = 32.0
    lr: float = 1e-3
    lr_schedule: str = "cosine"     # "cosine" (decay to 0 over the run) or "constant"
    weight_decay: float = 1e-4
    steps: int = 500
    batch_size: int = 2
    n_clips: int = 32
    frames: int = 4
    height: int = 32
    width: int = 32
    max_objects: int = 2
    data_seed: int = 1
    mask_ratio: float = 0.3
    spatial_budget: float = 0.5
    quantizer: str = "lapq"
    text_dim: int = TEXT_DIM
    attn_dim: int = 32
    heads: int = 2
    stage_channels: tuple[int, ...] = (16, 32, 48, 64)
    decoder_width: int = 32
    decoder_levels: str = "all"
    ar_width: int = 64
    ar_layers: int = 2
    ar_heads: int = 2
    ar_through_codes: bool = True
    codewords: int = 256
    prior_scale: float = 2.0
    diversity: bool = False
    stage_boundaries: tuple[int, ...] = ()  # curriculum hooks; empty = single stage

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.stage_channels = tuple(self.stage_channels)
        self.stage_boundaries = tuple(self.stage_boundaries)
        if self.quantizer not in QUANTIZERS:
            raise ValidationError(f"quantizer must be one of {QUANTIZERS}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError("lr_schedule must be 'cosine' or 'constant'")
        if self.levels < 1:
            raise ValidationError("levels must be >= 1")
        if self.decoder_levels not in ("all", "last"):
            raise ValidationError("decoder_levels must be 'all' or 'last'")

    @property
    def effective_levels(self) -> int:
        return 1 if self.quantizer == "lfq" else self.levels

    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(
            levels=self.effective_levels, stage_channels=self.stage_channels,
            adapter_rank=self.adapter_rank, adapter_alpha=self.adapter_alpha,
            decoder_width=self.decoder_width, decoder_levels=self.decoder_levels,
        )

    def codebook(self) -> CodebookConfig:
        return CodebookConfig(bits=self.bits, temperature=self.temperature)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_boundaries"] = list(self.stage_boundaries)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **kw})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class Batch:
    video: Tensor       # (B, 3, T, H, W) target
    masked: Tensor      # (B, 3, T, H, W) encoder input
    e_t: Tensor         # (B, d)
    words: Tensor       # (B, n, d)
    word_mask: Tensor   # (B, n) bool

    def to(self, dtype) -> "Batch":
        return Batch(self.video.to(dtype), self.masked.to(dtype), self.e_t.to(dtype),
                     self.words.to(dtype), self.word_mask)


def make_batch(clips: list[CaptionedClip], mask_ratio: float, mask_seed: int | None,
               spatial_budget: float = 0.5, text_dim: int = TEXT_DIM) -> Batch:
    """Stack clips; ``mask_seed=None`` disables masking (evaluation)."""
    videos, masked, vecs, words = [], [], [], []
    for i, clip in enumerate(clips):
        videos.append(clip.video)
        if mask_seed is None or mask_ratio == 0:
            masked.append(clip.video)
        else:
            masked.append(mask_video(clip.video, mask_ratio, mask_seed * 7919 + i, spatial_budget)[0])
        emb = embed_text(clip.caption, text_dim)
        vecs.append(emb.vector)
        words.append(emb.word_vectors)
    n = max(w.shape[0] for w in words)
    word_arr = np.zeros((len(clips), n, text_dim), dtype=np.float32)
    mask = np.zeros((len(clips), n), dtype=bool)
    for i, w in enumerate(words):
        word_arr[i, : w.shape[0]] = w
        mask[i, : w.shape[0]] = True
    return Batch(
        torch.from_numpy(np.stack(videos)), torch.from_numpy(np.stack(masked)),
        torch.from_numpy(np.stack(vecs)), torch.from_numpy(word_arr), torch.from_numpy(mask),
    )


@dataclass
class Outputs:
    pyramid: list[Tensor]
    q_levels: list[QuantizedField]
    x_hat: Tensor
    text_prior: Tensor
    reference: Tensor | None = None


class Tokenizer(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        pc = config.pyramid()
        cb = config.codebook()
        self.codebook = cb
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            self.encoder = Encoder(pc)
            self.lapq = LaPQ(pc.channels(), cb, config.text_dim, config.attn_dim, config.heads,
                             text_conditioning=config.quantizer != "lfq", prior_scale=config.prior_scale)
            if config.quantizer in ("vq", "gvq", "rvq"):
                make = {"vq": lambda: VectorQuantizer(cb.bits, 64),
                        "gvq": lambda: GroupedVQ(cb.bits, 2, 32),
                        "rvq": lambda: ResidualVQ(cb.bits, 2, 32)}[config.quantizer]
                self.lapq.table_quantizers = nn.ModuleList(make() for _ in range(pc.levels))
            self.decoder = Decoder(pc, cb.bits)
            max_len = self._max_tokens(config) + 64
            self.ar_head = ARHead(cb.size, cb.bits, config.text_dim, config.ar_width, config.ar_layers,
                                  config.ar_heads, max_len=max_len, through_codes=config.ar_through_codes)
        finally:
            torch.random.set_rng_state(gen_state)
        self.reference = ReferenceEncoder(pc, seed=config.seed + 10_007)
        self.perceptual = PerceptualProxy()
        self.collapse_to: list[Tensor] | None = None

    @staticmethod
    def _max_tokens(config: RunConfig) -> int:
        pc = config.pyramid()
        return sum(t * h * w for t, h, w in pc.grids(config.frames, config.height, config.width)) + pc.levels + 16

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}

    def quantize(self, pyramid: list[Tensor], batch: Batch) -> list[QuantizedField]:
        if self.collapse_to is None:
            return self.lapq(pyramid, batch.words, batch.word_mask)
        # Input-independent assignment: every level's pre-activation pinned to a constant.
        out = []
        for level, feat in enumerate(pyramid):
            b, _, t, h, w = feat.shape
            z = self.collapse_to[level].to(feat.dtype).view(1, -1, 1, 1, 1).expand(b, -1, t, h, w)
            out.append(self.lapq.quantizer_for(level)(z))
        return out

    @staticmethod
    def encoder_input(batch: Batch) -> Tensor:
        return 2 * batch.masked - 1       # encoders see [-1, 1]

    def forward(self, batch: Batch, with_reference: bool = True) -> Outputs:
        x_in = self.encoder_input(batch)
        pyramid = self.encoder(x_in)
        q_levels = self.quantize(pyramid, batch)
        x_hat = self.decoder([q.code for q in q_levels], out_size=tuple(batch.video.shape[2:]))
        prior = self.lapq.text_prior(batch.e_t)
        ref = self.reference(x_in) if with_reference else None
        return Outputs(pyramid, q_levels, x_hat, prior, ref)

    def losses(self, batch: Batch, codeword_seed: int = 0, out: Outputs | None = None,
               skip_unweighted: bool = False) -> LossBreakdown:
        """All loss terms; ``skip_unweighted`` leaves zero-weight families at 0 to save work."""
        out = out if out is not None else self(batch)
        l1, ssim_term, perc = recon_loss(batch.video, out.x_hat, self.perceptual)
        gen = torch.Generator().manual_seed(codeword_seed)
        terms = codebook_loss(out.q_levels, out.text_prior, codewords=self.config.codewords,
                              generator=gen, diversity=self.config.diversity)
        if not (skip_unweighted and self.config.weights.ar == 0):
            layout = build_sequence(out.q_levels, batch.words, batch.word_mask, self.codebook.size)
            ar = ar_nll(self.ar_head(layout), layout)
        else:
            ar = l1.new_zeros(())
        drift = (l1.new_zeros(()) if skip_unweighted and self.config.weights.drift == 0
                 else drift_loss(out.pyramid[-1], out.reference))
        return LossBreakdown(l1, ssim_term, perc, terms, ar, drift)

    def reconstruct(self, batch: Batch) -> Tensor:
        """Evaluation-mode reconstruction, clamped to [0, 1]."""
        with torch.no_grad():
            return self(batch, with_reference=False).x_hat.clamp(0, 1)


class _Objective(nn.Module):
    def __init__(self, model: Tokenizer, weights: LossWeights, codeword_seed: int):
        super().__init__()
        self.inner, self.weights, self.codeword_seed = model, weights, codeword_seed

    def forward(self, batch: Batch) -> Tensor:
        return self.inner.losses(batch, codeword_seed=self.codeword_seed).total(self.weights)


def objective_fn(model: Tokenizer, batch: Batch, weights: LossWeights | None = None, codeword_seed: int = 0):
    """Total objective as a pure function of ``{parameter name: tensor}``.

    The model (frozen parts included) and the batch are cast to the dtype of
    the incoming tensors, so one function serves the float32 analytic pass and
    the float64 finite-difference oracle.
    """
    weights = weights or model.config.weights
    copies: dict = {}

    def f(theta: dict[str, Tensor]) -> Tensor:
        dtype = next(iter(theta.values())).dtype
        if dtype not in copies:
            copies[dtype] = (_Objective(copy.deepcopy(model).to(dtype), weights, codeword_seed), batch.to(dtype))
        wrapped, b = copies[dtype]
        return torch.func.functional_call(wrapped, {f"inner.{k}": v for k, v in theta.items()}, (b,))

    return f
