import math
import random
from fractions import Fraction

import numpy as np
import pytest
import torch

from videotok.errors import ValidationError
from videotok.fixtures import TEXT_DIM
from videotok.lapq import TextBitPrior
from videotok.lfq import QuantizedField
from videotok.localization import (Segment, decode_segments, frame_descriptors, localize_multi, maximal_runs,
                                   query_vector, score_trajectory)


# -- enumeration oracle -------------------------------------------------------------

def enumerate_runs(S, tau):
    """Every interval [a, b] that is all >= tau and cannot be extended either way."""
    out = []
    n = len(S)
    for a in range(n):
        for b in range(a, n):
            if all(S[i] >= tau for i in range(a, b + 1)) and (a == 0 or S[a - 1] < tau) \
                    and (b == n - 1 or S[b + 1] < tau):
                out.append((a, b))
    return out


def oracle_best(S, tau):
    best = None
    for a, b in enumerate_runs(S, tau):
        m = sum(Fraction(S[i]) for i in range(a, b + 1)) / (b - a + 1)
        if best is None or m > best[0] or (m == best[0] and a < best[1]):
            best = (m, a, b)
    return None if best is None else (best[1], best[2])


def oracle_multi(S, tau, window, stride):
    frames = sorted((a * stride, b * stride + window - 1, list(range(a, b + 1))) for a, b in enumerate_runs(S, tau))
    merged = []
    for fs, fe, ids in frames:
        if merged and fs <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], fe)
            merged[-1][2] += ids
        else:
            merged.append([fs, fe, ids])
    return [(fs, fe, sorted(ids)) for fs, fe, ids in merged]


def random_trajectory(rng):
    n = rng.randint(1, 50)
    levels = [rng.choice([0.25, 0.5, 0.75, 1.0]) for _ in range(3)]
    return [rng.choice(levels) if rng.random() < 0.3 else rng.random() for _ in range(n)]


# -- decoding ---------------------------------------------------------------------

def test_decode_simple_example():
    seg = decode_segments([0, 1, 1, 1, 0, 1], 0.5)
    assert (seg.start, seg.end) == (1, 3)
    assert seg.mean_score == 1.0 and seg.length == 3


def test_decode_nothing_above_threshold():
    assert decode_segments([0.1, 0.2], 0.5) is None
    assert decode_segments([], 0.5) is None


def test_decode_tie_goes_to_earliest():
    seg = decode_segments([0.8, 0.0, 0.8], 0.5)
    assert (seg.start, seg.end) == (0, 0)


def test_decode_matches_enumeration_oracle():
    rng = random.Random(11)
    for _ in range(200):
        S = random_trajectory(rng)
        for tau in (0.0, 0.25, 0.5, 0.75, 1.0):
            seg = decode_segments(S, tau)
            ref = oracle_best(S, tau)
            assert (None if seg is None else (seg.start, seg.end)) == ref


@pytest.mark.parametrize("window,stride", [(1, 1), (5, 1), (4, 2), (25, 3)])
def test_localize_multi_matches_oracle_and_length(window, stride):
    rng = random.Random(window * 100 + stride)
    for _ in range(60):
        S = random_trajectory(rng)
        tau = rng.choice([0.25, 0.5, 0.75])
        segs = localize_multi([S], tau, window, stride)
        ref = oracle_multi(S, tau, window, stride)
        assert [(s.start, s.end) for s in segs] == [(fs, fe) for fs, fe, _ in ref]
        for s, (_, _, ids) in zip(segs, ref):
            assert s.length >= window
            assert s.mean_score == pytest.approx(math.fsum(S[i] for i in ids) / len(ids), abs=0)


def test_localize_multi_merges_overlapping_windows():
    # two runs of window starts whose frame spans overlap with K=3
    segs = localize_multi([[0.9, 0.0, 0.9]], 0.5, window=3, stride=1)
    assert [(s.start, s.end) for s in segs] == [(0, 4)]
    assert segs[0].mean_score == pytest.approx(0.9)


def test_localize_multi_keeps_queries_apart():
    segs = localize_multi([[1, 0, 0], [0, 0, 1]], 0.5)
    assert [(s.query, s.start, s.end) for s in segs] == [(0, 0, 0), (1, 2, 2)]
    with pytest.raises(ValidationError):
        localize_multi([], 0.5)


def test_frame_span_of_decoded_windows():
    seg = decode_segments([0, 1, 1, 0], 0.5, window=4, stride=2)
    assert (seg.start, seg.end) == (2, 7) and seg.length >= 4


def test_raising_tau_keeps_runs_nested():
    rng = random.Random(5)
    for _ in range(200):
        S = random_trajectory(rng)
        lo, hi = sorted(rng.random() for _ in range(2))
        outer = maximal_runs(S, lo)
        for a, b in maximal_runs(S, hi):
            assert any(c <= a and b <= d for c, d in outer)


def test_raising_tau_can_lengthen_the_selected_run():
    # A short high run beats a diluted long run at the low threshold; the long
    # run's core overtakes it once the threshold trims the dilution away.
    S = [0.9, 0.1, 0.5, 0.95, 0.95, 0.95, 0.5]
    assert decode_segments(S, 0.5).length == 1
    assert decode_segments(S, 0.7).length == 3


def test_shift_invariance_dyadic():
    rng = random.Random(3)
    for _ in range(100):
        S = [rng.randint(0, 16) / 16 for _ in range(rng.randint(1, 30))]
        tau = rng.randint(0, 16) / 16
        c = rng.randint(-8, 8) / 4
        a = decode_segments(S, tau)
        b = decode_segments([x + c for x in S], tau + c)
        assert (a is None and b is None) or (a.start, a.end) == (b.start, b.end)


def test_non_finite_tau_rejected():
    with pytest.raises(ValidationError):
        decode_segments([1.0], math.nan)
    with pytest.raises(ValidationError):
        localize_multi([[1.0]], math.inf)


def test_segment_validation_and_dict():
    with pytest.raises(ValidationError):
        Segment(3, 2, 0.0)
    assert Segment(1, 2, 0.5, 4).as_dict() == {"query": 4, "start_frame": 1, "end_frame": 2, "mean_score": 0.5}


# -- trajectories and descriptors -------------------------------------------------

def test_window_means_match_oracle():
    rng = np.random.default_rng(0)
    desc = rng.normal(size=(30, 6))
    z = rng.normal(size=6)
    traj = score_trajectory(desc, z, window=7, stride=3)
    zn = math.sqrt(sum(v * v for v in z))
    s = [sum(desc[t, k] * z[k] for k in range(6)) / zn for t in range(30)]
    starts = list(range(0, 30 - 7 + 1, 3))
    assert list(traj.starts) == starts
    for i, a in enumerate(starts):
        assert traj.window_scores[i] == pytest.approx(sum(s[a:a + 7]) / 7, abs=1e-12)


def test_short_trajectory_rejected():
    with pytest.raises(ValidationError):
        score_trajectory(np.zeros((5, 3)), np.ones(3), window=6)
    with pytest.raises(ValidationError):
        score_trajectory(np.zeros((5, 3)), np.ones(3), window=2, stride=0)


def test_frame_descriptors_oracle():
    g = torch.Generator().manual_seed(1)
    p = torch.rand(1, 4, 3, 2, 2, generator=g)
    q = QuantizedField(z=2 * p - 1, code=torch.sign(2 * p - 1), bit_probs=p,
                       indices=torch.zeros(1, 3, 2, 2, dtype=torch.long))
    d = frame_descriptors(q)
    assert d.shape == (3, 4)
    for t in range(3):
        v = [sum(2 * p[0, k, t, y, x].item() - 1 for y in range(2) for x in range(2)) / 4 for k in range(4)]
        n = math.sqrt(sum(a * a for a in v))
        np.testing.assert_allclose(d[t], [a / n for a in v], atol=1e-7)


def test_frame_descriptor_zero_frame_stays_zero():
    p = torch.full((1, 3, 2, 1, 1), 0.5)
    q = QuantizedField(z=p, code=torch.ones_like(p), bit_probs=p, indices=torch.zeros(1, 2, 1, 1, dtype=torch.long))
    assert not frame_descriptors(q).any()


def test_query_vector_is_unit_and_deterministic():
    prior = TextBitPrior(TEXT_DIM, 10)
    a = query_vector(["red", "circle"], prior)
    assert a.shape == (10,) and np.linalg.norm(a) == pytest.approx(1.0)
    np.testing.assert_array_equal(a, query_vector(["red", "circle"], prior))
