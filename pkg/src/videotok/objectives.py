"""Loss terms: hierarchical codebook loss, reconstruction, autoregressive
alignment with its causal head, drift regularization, weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ValidationError
from .lapq import align_tensor
from .lfq import QuantizedField, bernoulli_kl, factorized_entropy

CODEBOOK_TERMS = ("commitment", "entropy", "hierarchical", "text_cond", "text_code")


@dataclass(frozen=True)
class LossWeights:
    recon: float = 2.5
    codebook: float = 2.5
    ar: float = 1.5
    drift: float = 0.6


@dataclass
class LossBreakdown:
    l1: Tensor
    ssim: Tensor
    perceptual: Tensor
    codebook_terms: dict[str, list[Tensor]]
    ar: Tensor
    drift: Tensor

    @property
    def recon(self) -> Tensor:
        return self.l1 + self.ssim + self.perceptual

    def codebook_term(self, name: str) -> Tensor:
        vals = self.codebook_terms.get(name, [])
        return torch.stack(vals).sum() if vals else self.l1.new_zeros(())

    @property
    def codebook(self) -> Tensor:
        return sum((self.codebook_term(n) for n in self.codebook_terms), self.l1.new_zeros(()))

    def total(self, weights: LossWeights) -> Tensor:
        return total_objective(self, weights)

    @torch.no_grad()
    def as_dict(self, weights: LossWeights | None = None) -> dict[str, float]:
        out = {
            "recon": float(self.recon), "l1": float(self.l1), "ssim": float(self.ssim),
            "perceptual": float(self.perceptual), "codebook": float(self.codebook),
        }
        for name in (*CODEBOOK_TERMS, *(k for k in self.codebook_terms if k not in CODEBOOK_TERMS)):
            out[name] = float(self.codebook_term(name))
        out["ar"] = float(self.ar)
        out["drift"] = float(self.drift)
        if weights is not None:
            out["total"] = float(self.total(weights))
        return out


def total_objective(breakdown, weights: LossWeights):
    return (weights.recon * breakdown.recon + weights.codebook * breakdown.codebook
            + weights.ar * breakdown.ar + weights.drift * breakdown.drift)


# -- codebook -----------------------------------------------------------------

def sample_codewords(n: int, bits: int, generator: torch.Generator) -> Tensor:
    return torch.randint(0, 2, (n, bits), generator=generator).to(torch.float32) * 2 - 1


def codebook_loss(q_levels: list[QuantizedField], text_prior: Tensor, *, codewords: int = 256,
                  sharpness: float = 1.0, generator: torch.Generator | None = None,
                  diversity: bool = False) -> dict[str, list[Tensor]]:
    """Per-level terms of the hierarchical semantic codebook loss.

    ``text_prior`` is ``(B, b)`` and is treated as a constant. Every term is a
    mean over grid positions (and batch), so levels of different size weigh the
    same before the sum over levels.
    """
    if not q_levels:
        raise ValidationError("need at least one level")
    text_prior = text_prior.detach()
    generator = generator if generator is not None else torch.Generator().manual_seed(0)
    terms: dict[str, list[Tensor]] = {n: [] for n in CODEBOOK_TERMS}
    if diversity:
        terms["diversity"] = []
    prev = None
    for q in q_levels:
        if q.bit_probs is None:
            # Table-based baselines report their own codebook + commitment loss.
            terms["commitment"].append(q.aux_loss if q.aux_loss is not None else q.z.new_zeros(()))
            prev = q
            continue
        z, p = q.z, q.bit_probs
        target = torch.where(z >= 0, 1.0, -1.0).to(z.dtype).detach()
        terms["commitment"].append(((z - target) ** 2).sum(1).mean())
        terms["entropy"].append(factorized_entropy(p).mean())
        if prev is not None and prev.bit_probs is not None:
            coarse = align_tensor(prev.bit_probs, p.shape[2:])
            terms["hierarchical"].append(bernoulli_kl(p, coarse).mean())
        prior = text_prior.to(p.dtype).view(*text_prior.shape, 1, 1, 1)
        terms["text_cond"].append(bernoulli_kl(p, prior.expand_as(p)).mean())
        c = sample_codewords(codewords, p.shape[1], generator).to(p.dtype)
        code_probs = torch.sigmoid(c * sharpness)                     # n, b
        kl = bernoulli_kl(code_probs[None], text_prior.to(p.dtype)[:, None], dim=-1)  # B, n
        terms["text_code"].append(kl.mean())
        if diversity:
            mean_p = p.mean(dim=(0, 2, 3, 4))
            terms["diversity"].append(p.shape[1] * math.log(2) - factorized_entropy(mean_p, dim=0))
        prev = q
    return terms


# -- reconstruction -----------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(x: Tensor, y: Tensor, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> Tensor:
    """Windowed SSIM over (N, 1, H, W) image stacks, valid-mode filtering."""
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValidationError(f"frames smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma, x.dtype)[None, None]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x**2
    syy = F.conv2d(y * y, w) - mu_y**2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def _frames(v: Tensor) -> Tensor:
    if v.dim() == 4:
        v = v.unsqueeze(0)
    b, c, t, h, w = v.shape
    return v.permute(0, 2, 1, 3, 4).reshape(b * t * c, 1, h, w)


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Mean SSIM over frames and channels of (B, C, T, H, W) or (C, T, H, W) videos."""
    if x.shape != y.shape:
        raise ValidationError("ssim: dimension mismatch")
    return ssim_map(_frames(x), _frames(y)).mean()


class PerceptualProxy(nn.Module):
    """Frozen two-layer random-filter feature distance (per-frame)."""

    def __init__(self, seed: int = 7919):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w1 = nn.Parameter(torch.randn(8, 3, 3, 3, generator=gen) / math.sqrt(27), requires_grad=False)
        self.w2 = nn.Parameter(torch.randn(16, 8, 3, 3, generator=gen) / math.sqrt(72), requires_grad=False)

    def features(self, v: Tensor) -> list[Tensor]:
        b, c, t, h, w = v.shape
        x = v.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        f1 = torch.tanh(F.conv2d(x, self.w1, padding=1))
        f2 = torch.tanh(F.conv2d(f1, self.w2, stride=2, padding=1))
        return [f1, f2]

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        return sum(((a - b) ** 2).mean() for a, b in zip(self.features(x), self.features(y)))


def recon_loss(x: Tensor, x_hat: Tensor, perceptual: PerceptualProxy) -> tuple[Tensor, Tensor, Tensor]:
    if x.shape != x_hat.shape:
        raise ValidationError(f"recon: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    l1 = (x - x_hat).abs().mean()
    ssim_term = 1 - ssim(x, x_hat)
    return l1, ssim_term, perceptual(x, x_hat)


# -- drift --------------------------------------------------------------------

def drift_loss(adapted: Tensor, reference: Tensor) -> Tensor:
    """Mean per-position KL(softmax_c(adapted) || softmax_c(reference)); reference is constant."""
    if adapted.shape != reference.shape:
        raise ValidationError(f"drift: {tuple(adapted.shape)} vs {tuple(reference.shape)}")
    log_p = adapted.log_softmax(1)
    log_q = reference.detach().log_softmax(1)
    return (log_p.exp() * (log_p - log_q)).sum(1).mean()


# -- autoregressive alignment -------------------------------------------------

TEXT, SOI, QSEP, VISUAL, PAD = 0, 1, 2, 3, 4


@dataclass
class SequenceLayout:
    """Token stream ``text ++ SOI ++ q1 ++ QSEP ++ q2 ... ++ qL`` (text left-padded)."""

    tokens: Tensor        # (B, S) int64; visual ids in [0, K), SOI = K, QSEP = K + 1, text/pad = 0
    kinds: Tensor         # (B, S) one of TEXT/SOI/QSEP/VISUAL/PAD
    codes: Tensor         # (B, S, b) straight-through codes at visual positions, else 0
    text: Tensor          # (B, S, d) word vectors at text positions, else 0
    vocab: int            # K

    @property
    def key_mask(self) -> Tensor:
        return self.kinds != PAD


def build_sequence(q_levels: list[QuantizedField], words: Tensor, word_mask: Tensor, vocab: int) -> SequenceLayout:
    b = words.shape[0]
    n = words.shape[1]
    bits = q_levels[0].code.shape[1]
    dtype = q_levels[0].code.dtype
    tok, kind, codes, text = [], [], [], []

    def special(kind_id: int, token: int):
        tok.append(torch.full((b, 1), token, dtype=torch.int64))
        kind.append(torch.full((b, 1), kind_id, dtype=torch.int64))
        codes.append(torch.zeros(b, 1, bits, dtype=dtype))
        text.append(torch.zeros(b, 1, words.shape[2], dtype=words.dtype))

    # Left-pad the text prefix so SOI sits at the same position for every row.
    order = torch.argsort((~word_mask).to(torch.int64) * -1, dim=1, stable=True)
    w_sorted = torch.gather(words, 1, order[..., None].expand_as(words))
    m_sorted = torch.gather(word_mask, 1, order)
    tok.append(torch.zeros(b, n, dtype=torch.int64))
    kind.append(torch.where(m_sorted, TEXT, PAD).to(torch.int64))
    codes.append(torch.zeros(b, n, bits, dtype=dtype))
    text.append(w_sorted * m_sorted[..., None].to(words.dtype))
    special(SOI, vocab)
    for l, q in enumerate(q_levels):
        if l:
            special(QSEP, vocab + 1)
        idx = q.indices.reshape(b, -1)
        tok.append(idx)
        kind.append(torch.full_like(idx, VISUAL))
        codes.append(q.code.flatten(2).transpose(1, 2))   # raster order t, y, x
        text.append(torch.zeros(b, idx.shape[1], words.shape[2], dtype=words.dtype))
    return SequenceLayout(torch.cat(tok, 1), torch.cat(kind, 1), torch.cat(codes, 1), torch.cat(text, 1), vocab)


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        b, s, w = x.shape
        q, k, v = self.qkv(self.ln1(x)).reshape(b, s, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        x = x + self.proj(a.transpose(1, 2).reshape(b, s, w))
        return x + self.mlp(self.ln2(x))


class ARHead(nn.Module):
    """Small causal transformer over the multi-level token stream.

    Visual positions are embedded as ``table[index] + W_code @ code`` so that the
    straight-through code carries gradient back into the quantizers.
    """

    def __init__(self, vocab: int, bits: int, text_dim: int, width: int = 64, layers: int = 2,
                 heads: int = 2, max_len: int = 4096, through_codes: bool = True):
        super().__init__()
        self.vocab, self.max_len, self.through_codes = vocab, max_len, through_codes
        self.table = nn.Embedding(vocab + 2, width)
        self.code_proj = nn.Linear(bits, width, bias=False)
        self.text_proj = nn.Linear(text_dim, width, bias=False)
        self.pos = nn.Embedding(max_len, width)
        nn.init.normal_(self.table.weight, std=0.02)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.blocks = nn.ModuleList(_Block(width, heads) for _ in range(layers))
        self.ln = nn.LayerNorm(width)
        self.out = nn.Linear(width, vocab + 2)

    @property
    def n_classes(self) -> int:
        return self.vocab + 2

    def forward(self, layout: SequenceLayout) -> Tensor:
        b, s = layout.tokens.shape
        if s > self.max_len:
            raise ValidationError(f"sequence length {s} exceeds {self.max_len}")
        if layout.tokens.max() >= self.n_classes or layout.tokens.min() < 0:
            raise ValidationError("token id outside embedding table")
        kinds = layout.kinds
        table_rows = (kinds == VISUAL) | (kinds == SOI) | (kinds == QSEP)
        codes = layout.codes if self.through_codes else layout.codes.detach()
        x = self.table(layout.tokens) * table_rows[..., None].to(codes.dtype)
        x = x + self.code_proj(codes) + self.text_proj(layout.text)
        x = x + self.pos.weight[:s]
        causal = torch.ones(s, s, dtype=torch.bool).tril()
        mask = causal[None] & layout.key_mask[:, None, :]
        mask = mask | torch.eye(s, dtype=torch.bool)[None]
        mask = mask[:, None]
        for blk in self.blocks:
            x = blk(x, mask)
        return self.out(self.ln(x))


def ar_nll(logits: Tensor, layout: SequenceLayout) -> Tensor:
    """Mean NLL of visual tokens, each predicted from the logits one position earlier."""
    target = layout.tokens[:, 1:]
    pred = logits[:, :-1]
    sel = layout.kinds[:, 1:] == VISUAL
    if target.max() >= logits.shape[-1]:
        raise ValidationError("token id outside output vocabulary")
    logp = pred.log_softmax(-1).gather(-1, target[..., None]).squeeze(-1)
    return -(logp[sel]).mean()


def ar_loss(layout: SequenceLayout, head) -> Tensor:
    return ar_nll(head(layout), layout)
