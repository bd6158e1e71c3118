"""Temporal action localization from level-1 tokens: frame descriptors,
windowed similarity trajectories, and threshold-run segment decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch

from .errors import ValidationError
from .fixtures import TEXT_DIM, embed_text
from .lapq import TextBitPrior
from .lfq import QuantizedField


@dataclass(frozen=True)
class Segment:
    start: int          # inclusive frame index
    end: int            # inclusive frame index
    mean_score: float
    query: int = 0

    def __post_init__(self):
        if self.start > self.end:
            raise ValidationError("segment start after end")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def as_dict(self) -> dict:
        return {"query": self.query, "start_frame": self.start, "end_frame": self.end,
                "mean_score": self.mean_score}


@dataclass
class ScoreTrajectory:
    frame_scores: np.ndarray
    window_scores: np.ndarray
    window: int = 25
    stride: int = 1

    @property
    def starts(self) -> np.ndarray:
        return np.arange(len(self.window_scores)) * self.stride


def frame_descriptors(q_1: QuantizedField) -> np.ndarray:
    """Per-frame ``(T, b)`` descriptors: spatial mean of the signed soft code, L2-normalised.

    A frame whose mean is exactly zero keeps a zero descriptor.
    """
    p = q_1.bit_probs if q_1.bit_probs is not None else (q_1.hard_code + 1) / 2
    if p.dim() == 5:
        if p.shape[0] != 1:
            raise ValidationError("frame_descriptors takes a single clip")
        p = p[0]
    with torch.no_grad():
        v = (2 * p.double() - 1).mean(dim=(2, 3)).T.numpy()               # T, b
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


def query_vector(caption: list[str], prior: TextBitPrior, text_dim: int = TEXT_DIM) -> np.ndarray:
    """A text query mapped into descriptor space: normalised ``2 sigma(P e) - 1``."""
    e = torch.from_numpy(embed_text(caption, text_dim).vector)[None]
    z = (2 * prior(e)[0].double() - 1).numpy()
    n = np.linalg.norm(z)
    return z / n if n > 0 else z


def score_trajectory(descriptors: np.ndarray, z: np.ndarray, window: int = 25, stride: int = 1) -> ScoreTrajectory:
    descriptors = np.asarray(descriptors, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be >= 1")
    n = descriptors.shape[0]
    if n < window:
        raise ValidationError(f"trajectory of {n} frames is shorter than the window {window}")
    zn = np.linalg.norm(z)
    s = descriptors @ (z / zn) if zn > 0 else np.zeros(n)
    starts = range(0, n - window + 1, stride)
    S = np.array([math.fsum(s[a:a + window]) / window for a in starts])
    return ScoreTrajectory(s, S, window, stride)


def maximal_runs(S: Sequence[float], tau: float) -> list[tuple[int, int]]:
    """All maximal index runs ``(a, b)`` (inclusive) with ``S >= tau``."""
    runs, start = [], None
    for i, v in enumerate(S):
        if v >= tau:
            if start is None:
                start = i
        elif start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(S) - 1))
    return runs


def _exact_mean(S: Sequence[float], a: int, b: int) -> Fraction:
    return sum((Fraction(float(x)) for x in S[a:b + 1]), Fraction(0)) / (b - a + 1)


def _to_frames(a: int, b: int, window: int, stride: int) -> tuple[int, int]:
    return a * stride, b * stride + window - 1


def _best_run(S: Sequence[float], tau: float) -> tuple[int, int] | None:
    best, best_mean = None, None
    for a, b in maximal_runs(S, tau):
        m = _exact_mean(S, a, b)
        if best_mean is None or m > best_mean:   # strict: earliest start wins ties
            best, best_mean = (a, b), m
    return best


def decode_segments(S: Sequence[float], tau: float, window: int = 1, stride: int = 1,
                    query: int = 0) -> Segment | None:
    """Highest-mean maximal run of window scores ``>= tau``, as a frame interval."""
    if not math.isfinite(tau):
        raise ValidationError("tau must be finite")
    S = [float(x) for x in S]
    run = _best_run(S, tau)
    if run is None:
        return None
    a, b = run
    start, end = _to_frames(a, b, window, stride)
    return Segment(start, end, math.fsum(S[a:b + 1]) / (b - a + 1), query)


def localize_multi(S_per_query: Sequence[Sequence[float]], tau: float, window: int = 1,
                   stride: int = 1) -> list[Segment]:
    """Iterative decode-and-remove per query; overlapping frame intervals of one
    query are merged and reported with the mean over all their windows."""
    if not math.isfinite(tau):
        raise ValidationError("tau must be finite")
    if len(S_per_query) < 1:
        raise ValidationError("need at least one query")
    out: list[Segment] = []
    for qi, S in enumerate(S_per_query):
        orig = [float(x) for x in S]
        work = list(orig)
        picked: list[tuple[int, int, list[int]]] = []      # frame start, frame end, window ids
        while True:
            run = _best_run(work, tau)
            if run is None:
                break
            a, b = run
            for i in range(a, b + 1):
                work[i] = -math.inf
            fs, fe = _to_frames(a, b, window, stride)
            picked.append((fs, fe, list(range(a, b + 1))))
        picked.sort()
        merged: list[list] = []
        for fs, fe, ids in picked:
            if merged and fs <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], fe)
                merged[-1][2].extend(ids)
            else:
                merged.append([fs, fe, list(ids)])
        for fs, fe, ids in merged:
            out.append(Segment(fs, fe, math.fsum(orig[i] for i in ids) / len(ids), qi))
    return out
