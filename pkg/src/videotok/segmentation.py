"""Zero-shot text-guided segmentation: token relevance volumes, upsampling, and
a truncated fully-connected 3D CRF refined with sequential damped mean field."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ValidationError
from .fixtures import TEXT_DIM, embed_text
from .lapq import TextBitPrior
from .lfq import QuantizedField


@dataclass(frozen=True)
class CRFParams:
    pairwise: float = 3.0        # lambda_p, weight of the appearance (bilateral) kernel
    theta_s: float = 2.0         # spatial bandwidth, pixels
    theta_t: float = 1.0         # temporal bandwidth, frames
    theta_a: float = 0.15        # appearance bandwidth, colour units
    smoothness: float = 1.0      # weight of the appearance-free kernel (scaled by lambda_p)
    theta_g: float = 1.0         # spatial bandwidth of the smoothness kernel
    iterations: int = 5
    damping: float = 0.5
    unary_scale: float = 5.0     # kappa: unary scores enter as kappa * S

    def __post_init__(self):
        if self.pairwise < 0 or self.smoothness < 0:
            raise ValidationError("pairwise weights must be non-negative")
        if min(self.theta_s, self.theta_t, self.theta_a, self.theta_g) <= 0:
            raise ValidationError("kernel bandwidths must be positive")
        if not 0 < self.damping <= 1:
            raise ValidationError("damping must lie in (0, 1]")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")


@dataclass
class SegmentationResult:
    labels: np.ndarray                      # (T, H, W) int64, 0 = background
    units: list[str]
    relevance: list[np.ndarray] = field(default_factory=list)   # upsampled, per unit

    def binary(self, unit: str) -> np.ndarray:
        return self.labels == (self.units.index(unit) + 1)

    def mapping(self) -> dict[str, int]:
        return {u: i + 1 for i, u in enumerate(self.units)}


# -- relevance ----------------------------------------------------------------

def relevance_map(q_l: QuantizedField, e_w: np.ndarray | Tensor, prior: TextBitPrior) -> np.ndarray:
    """Cosine similarity between a word vector and every token of a single-clip field.

    Tokens are the signed soft codes ``2p - 1`` mapped into text space by the
    transposed text-prior projection. Zero-norm tokens score 0.
    """
    field_ = q_l.bit_probs if q_l.bit_probs is not None else (q_l.hard_code + 1) / 2
    if field_.dim() == 5:
        if field_.shape[0] != 1:
            raise ValidationError("relevance_map takes a single clip")
        field_ = field_[0]
    with torch.no_grad():
        signed = (2 * field_.double() - 1).permute(1, 2, 3, 0)              # t, h, w, b
        tok = signed @ prior.weight.double()                                # t, h, w, d
        e = torch.as_tensor(np.asarray(e_w), dtype=torch.float64).reshape(-1)
        if e.shape[0] != tok.shape[-1]:
            raise ValidationError("word vector dimension does not match the token projection")
        num = tok @ e
        den = tok.norm(dim=-1) * e.norm()
        out = torch.where(den > 0, num / den.clamp_min(1e-300), torch.zeros_like(num))
    return out.clamp(-1, 1).numpy()


def upsample_scores(vol: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Trilinear upsampling with corner alignment (endpoints preserved)."""
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim != 3:
        raise ValidationError("expected a (T, H, W) volume")
    for s, d in zip(vol.shape, dims):
        if d % s:
            raise ValidationError(f"non-integer scale factor {d}/{s}")
    if tuple(vol.shape) == tuple(dims):
        return vol.copy()
    x = torch.from_numpy(vol)[None, None]
    return F.interpolate(x, size=tuple(dims), mode="trilinear", align_corners=True)[0, 0].numpy()


# -- CRF ------------------------------------------------------------------------

@dataclass
class _Neighbours:
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray


def pairwise_kernel(video: np.ndarray, params: CRFParams) -> _Neighbours:
    """Truncated Gaussian kernels (radius 3 theta) as a symmetric CSR neighbour list.

    ``k_ij = lambda_p * (exp(-ds/2ts^2 - dt/2tt^2 - da/2ta^2) + w_g * exp(-ds/2tg^2 - dt/2tt^2))``
    """
    c, t_n, h, w = video.shape
    n = t_n * h * w
    rs = int(math.ceil(3 * max(params.theta_s, params.theta_g)))
    rt = int(math.ceil(3 * params.theta_t))
    col = video.reshape(c, n).T.astype(np.float64)
    tt, yy, xx = np.meshgrid(np.arange(t_n), np.arange(h), np.arange(w), indexing="ij")
    tt, yy, xx = tt.ravel(), yy.ravel(), xx.ravel()
    rows, cols, vals = [], [], []
    if params.pairwise > 0:
        for dt in range(-rt, rt + 1):
            for dy in range(-rs, rs + 1):
                for dx in range(-rs, rs + 1):
                    if dt == dy == dx == 0:
                        continue
                    ok = ((tt + dt >= 0) & (tt + dt < t_n) & (yy + dy >= 0) & (yy + dy < h)
                          & (xx + dx >= 0) & (xx + dx < w))
                    i = np.nonzero(ok)[0]
                    j = i + dt * h * w + dy * w + dx
                    ds2 = dy * dy + dx * dx
                    temporal = dt * dt / (2 * params.theta_t**2)
                    da2 = ((col[i] - col[j]) ** 2).sum(1)
                    k = np.zeros(len(i))
                    if ds2 <= (3 * params.theta_s) ** 2:
                        k += np.exp(-ds2 / (2 * params.theta_s**2) - temporal - da2 / (2 * params.theta_a**2))
                    if params.smoothness > 0 and ds2 <= (3 * params.theta_g) ** 2:
                        k += params.smoothness * np.exp(-ds2 / (2 * params.theta_g**2) - temporal)
                    keep = k > 0
                    rows.append(i[keep])
                    cols.append(j[keep])
                    vals.append(params.pairwise * k[keep])
    if rows:
        r, cc, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        r = cc = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    order = np.lexsort((cc, r))
    r, cc, v = r[order], cc[order], v[order]
    indptr = np.searchsorted(r, np.arange(n + 1))
    return _Neighbours(indptr, cc.astype(np.int64), v)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def crf_mean_field(unaries: np.ndarray, video: np.ndarray, params: CRFParams,
                   trace: list | None = None) -> np.ndarray:
    """Potts CRF over labels ``0..U``, ``unaries`` shaped ``(U+1, T, H, W)`` (higher = more likely).

    Marginals start at the unary softmax; each sweep visits voxels in raster
    order and moves each one a fraction ``damping`` towards its exact
    coordinate-wise mean-field update. ``trace`` (if given) receives a copy of
    the marginals ``(N, U+1)`` before the first sweep and after every sweep.
    Returns the per-voxel argmax labels.
    """
    unaries = np.asarray(unaries, dtype=np.float64)
    if unaries.ndim != 4 or unaries.shape[0] < 1:
        raise ValidationError("crf_mean_field needs a non-empty (labels, T, H, W) unary stack")
    if unaries.shape[0] < 2:
        raise ValidationError("need background plus at least one foreground label")
    if tuple(video.shape[1:]) != tuple(unaries.shape[1:]):
        raise ValidationError("video and unary grids differ")
    n_lab = unaries.shape[0]
    dims = unaries.shape[1:]
    u = params.unary_scale * unaries.reshape(n_lab, -1).T                    # N, L
    q = _softmax(u)
    if trace is not None:
        trace.append(q.copy())
    if params.pairwise > 0 and params.iterations > 0:
        nb = pairwise_kernel(video, params)
        a = params.damping
        for _ in range(params.iterations):
            for i in range(q.shape[0]):
                lo, hi = nb.indptr[i], nb.indptr[i + 1]
                if lo == hi:
                    continue
                msg = nb.weights[lo:hi] @ q[nb.indices[lo:hi]]
                target = _softmax(u[i] + msg)
                q[i] = (1 - a) * q[i] + a * target
            if trace is not None:
                trace.append(q.copy())
    elif trace is not None:
        for _ in range(params.iterations):
            trace.append(q.copy())
    return q.argmax(1).reshape(dims)


def free_energy(q: np.ndarray, unaries: np.ndarray, video: np.ndarray, params: CRFParams) -> float:
    """Mean-field free energy of marginals ``q`` (N, L) under the truncated kernel."""
    u = params.unary_scale * np.asarray(unaries, dtype=np.float64).reshape(unaries.shape[0], -1).T
    nb = pairwise_kernel(video, params)
    rows = np.repeat(np.arange(q.shape[0]), np.diff(nb.indptr))
    pair = 0.5 * float((nb.weights * (1 - (q[rows] * q[nb.indices]).sum(1))).sum())
    qc = np.clip(q, 1e-300, 1)
    return float(-(q * u).sum() + pair + (q * np.log(qc)).sum())


# -- end-to-end ---------------------------------------------------------------

def unit_unaries(relevance: list[np.ndarray], threshold: float = 0.5) -> np.ndarray:
    """Stack per-unit relevance (min-max normalised to [0, 1]) under a background row.

    Background scores ``2 * threshold - max_u S_u``; at threshold 0.5 that is
    ``1 - max_u S_u`` and a unit wins exactly where it exceeds the threshold.
    """
    normed = []
    for r in relevance:
        lo, hi = float(r.min()), float(r.max())
        normed.append((r - lo) / (hi - lo) if hi > lo else np.zeros_like(r))
    stack = np.stack(normed)
    bg = 2 * threshold - stack.max(0)
    return np.concatenate([bg[None], stack])


def segment_all(video: np.ndarray, q_l: QuantizedField, units: list[str], prior: TextBitPrior,
                params: CRFParams | None = None, threshold: float = 0.5,
                text_dim: int = TEXT_DIM) -> SegmentationResult:
    """Joint multi-label segmentation of ``video`` (3, T, H, W) for every semantic unit."""
    params = params or CRFParams()
    video = np.asarray(video)
    dims = tuple(video.shape[1:])
    units = list(units)
    if not units:
        return SegmentationResult(np.zeros(dims, dtype=np.int64), [], [])
    if len(set(units)) != len(units):
        raise ValidationError("duplicate semantic units")
    rel = []
    for unit in units:
        e_w = embed_text([unit], text_dim).vector
        rel.append(upsample_scores(relevance_map(q_l, e_w, prior), dims))
    labels = crf_mean_field(unit_unaries(rel, threshold), video, params)
    return SegmentationResult(labels.astype(np.int64), units, rel)
