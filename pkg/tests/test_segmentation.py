import math

import numpy as np
import pytest
import torch

from videotok.errors import ValidationError
from videotok.fixtures import TEXT_DIM
from videotok.lapq import TextBitPrior
from videotok.lfq import QuantizedField
from videotok.segmentation import (CRFParams, crf_mean_field, free_energy, pairwise_kernel, relevance_map,
                                   segment_all, unit_unaries, upsample_scores)


def field_from_probs(p: torch.Tensor) -> QuantizedField:
    """Wrap ``(b, t, h, w)`` probabilities as a single-clip quantized field."""
    p = p[None].float()
    code = torch.where(p >= 0.5, 1.0, -1.0)
    return QuantizedField(z=2 * p - 1, code=code, bit_probs=p, indices=torch.zeros(p.shape[:1] + p.shape[2:],
                                                                                    dtype=torch.long))


def identity_prior(d: int) -> TextBitPrior:
    prior = TextBitPrior(d, d)
    with torch.no_grad():
        prior.weight.copy_(torch.eye(d))
    return prior


def trace_run(rng, dims=(4, 8, 8), labels=3, **kw):
    unaries = rng.normal(size=(labels,) + dims)
    video = rng.uniform(size=(3,) + dims)
    params = CRFParams(**kw)
    trace: list = []
    out = crf_mean_field(unaries, video, params, trace=trace)
    return unaries, video, params, trace, out


# -- relevance -------------------------------------------------------------------

def test_relevance_parallel_and_orthogonal():
    d = 4
    prior = identity_prior(d)
    e = np.array([0.5, -0.5, 0.25, 0.0])
    other = np.array([0.5, 0.5, 0.0, 0.3])          # orthogonal to e
    p = torch.zeros(d, 1, 1, 2)
    p[:, 0, 0, 0] = torch.tensor((e + 1) / 2)
    p[:, 0, 0, 1] = torch.tensor((other + 1) / 2)
    rel = relevance_map(field_from_probs(p), e, prior)
    assert rel.shape == (1, 1, 2)
    assert rel[0, 0, 0] == pytest.approx(1.0, abs=1e-6)
    assert rel[0, 0, 1] == pytest.approx(0.0, abs=1e-6)


def test_relevance_matches_scalar_oracle():
    g = torch.Generator().manual_seed(3)
    b, d = 5, 7
    prior = TextBitPrior(d, b)
    p = torch.rand(b, 2, 3, 3, generator=g)
    e = torch.randn(d, generator=g).numpy()
    rel = relevance_map(field_from_probs(p), e, prior)
    W = prior.weight.double().tolist()
    p32 = p.float().double()
    for t in range(2):
        for y in range(3):
            for x in range(3):
                tok = [sum((2 * p32[k, t, y, x].item() - 1) * W[k][j] for k in range(b)) for j in range(d)]
                num = sum(a * c for a, c in zip(tok, e))
                den = math.sqrt(sum(a * a for a in tok)) * math.sqrt(sum(c * c for c in e))
                assert rel[t, y, x] == pytest.approx(num / den, abs=1e-6)


def test_relevance_zero_token_scores_zero():
    prior = identity_prior(3)
    p = torch.full((3, 1, 1, 1), 0.5)
    assert relevance_map(field_from_probs(p), np.ones(3), prior)[0, 0, 0] == 0.0


def test_relevance_rejects_wrong_dimension():
    prior = identity_prior(3)
    with pytest.raises(ValidationError):
        relevance_map(field_from_probs(torch.rand(3, 1, 1, 1)), np.ones(4), prior)


# -- upsampling -------------------------------------------------------------------

def test_upsample_linear_ramp():
    out = upsample_scores(np.array([[[0.0, 1.0]]]), (1, 1, 4))
    np.testing.assert_allclose(out[0, 0], [0, 1 / 3, 2 / 3, 1], atol=1e-12)


def test_upsample_preserves_corners_and_identity():
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(2, 3, 3))
    up = upsample_scores(vol, (4, 6, 6))
    for t, y, x in [(0, 0, 0), (-1, -1, -1), (0, -1, 0)]:
        assert up[t, y, x] == pytest.approx(vol[t, y, x])
    np.testing.assert_array_equal(upsample_scores(vol, vol.shape), vol)


def test_upsample_rejects_fractional_factor():
    with pytest.raises(ValidationError):
        upsample_scores(np.zeros((1, 3, 3)), (1, 4, 4))


# -- CRF --------------------------------------------------------------------------

def test_no_pairwise_is_unary_argmax():
    rng = np.random.default_rng(1)
    for _ in range(5):
        unaries = rng.normal(size=(4, 3, 5, 5))
        video = rng.uniform(size=(3, 3, 5, 5))
        out = crf_mean_field(unaries, video, CRFParams(pairwise=0.0))
        np.testing.assert_array_equal(out, unaries.argmax(0))


def test_kernel_is_symmetric_and_positive():
    rng = np.random.default_rng(2)
    video = rng.uniform(size=(3, 2, 4, 4))
    nb = pairwise_kernel(video, CRFParams(theta_s=1.0, theta_g=1.0, theta_t=0.5))
    n = 2 * 4 * 4
    dense = np.zeros((n, n))
    for i in range(n):
        for k in range(nb.indptr[i], nb.indptr[i + 1]):
            dense[i, nb.indices[k]] = nb.weights[k]
    np.testing.assert_allclose(dense, dense.T, atol=1e-15)
    assert (np.diag(dense) == 0).all() and (dense >= 0).all()


def dense_free_energy(q, unaries, video, params):
    """Straight-line free energy with an explicitly enumerated truncated kernel."""
    n_lab, t_n, h, w = unaries.shape
    coords = [(t, y, x) for t in range(t_n) for y in range(h) for x in range(w)]
    energy = 0.0
    for i, (t, y, x) in enumerate(coords):
        for l in range(n_lab):
            qi = q[i, l]
            energy -= qi * params.unary_scale * unaries[l, t, y, x]
            if qi > 0:
                energy += qi * math.log(qi)
        for j, (t2, y2, x2) in enumerate(coords):
            if j == i:
                continue
            ds = (y - y2) ** 2 + (x - x2) ** 2
            dt = (t - t2) ** 2
            if abs(t - t2) > math.ceil(3 * params.theta_t):
                continue
            da = sum((video[c, t, y, x] - video[c, t2, y2, x2]) ** 2 for c in range(3))
            k = 0.0
            if ds <= (3 * params.theta_s) ** 2:
                k += math.exp(-ds / (2 * params.theta_s ** 2) - dt / (2 * params.theta_t ** 2)
                              - da / (2 * params.theta_a ** 2))
            if ds <= (3 * params.theta_g) ** 2:
                k += params.smoothness * math.exp(-ds / (2 * params.theta_g ** 2) - dt / (2 * params.theta_t ** 2))
            agree = sum(q[i, l] * q[j, l] for l in range(n_lab))
            energy += 0.5 * params.pairwise * k * (1 - agree)
    return energy


def test_free_energy_matches_dense_oracle():
    rng = np.random.default_rng(4)
    unaries, video, params, trace, _ = trace_run(rng, dims=(2, 3, 3), labels=3, theta_s=0.8, theta_g=0.6)
    for q in (trace[0], trace[-1]):
        assert free_energy(q, unaries, video, params) == pytest.approx(
            dense_free_energy(q, unaries, video, params), rel=1e-10, abs=1e-10)


def test_free_energy_non_increasing_and_marginals_normalised():
    rng = np.random.default_rng(5)
    for _ in range(10):
        unaries, video, params, trace, _ = trace_run(rng, pairwise=float(rng.uniform(0.5, 5)), damping=0.5)
        energies = [free_energy(q, unaries, video, params) for q in trace]
        assert all(b <= a + 1e-9 for a, b in zip(energies, energies[1:]))
        for q in trace:
            assert np.abs(q.sum(1) - 1).max() < 1e-6


def test_strong_smoothness_gives_constant_labelling():
    rng = np.random.default_rng(6)
    unaries = 0.05 * rng.normal(size=(3, 2, 6, 6))
    video = np.full((3, 2, 6, 6), 0.4)
    out = crf_mean_field(unaries, video, CRFParams(pairwise=20.0, iterations=10))
    assert len(np.unique(out)) == 1


def test_label_permutation_equivariance():
    rng = np.random.default_rng(7)
    unaries = rng.normal(size=(4, 2, 5, 5))
    video = rng.uniform(size=(3, 2, 5, 5))
    perm = np.array([0, 3, 1, 2])
    base = crf_mean_field(unaries, video, CRFParams())
    permuted = crf_mean_field(unaries[perm], video, CRFParams())
    np.testing.assert_array_equal(perm[permuted], base)


def test_crf_rejects_bad_inputs():
    video = np.zeros((3, 1, 2, 2))
    with pytest.raises(ValidationError):
        crf_mean_field(np.zeros((1, 1, 2, 2)), video, CRFParams())
    with pytest.raises(ValidationError):
        crf_mean_field(np.zeros((2, 1, 3, 3)), video, CRFParams())
    with pytest.raises(ValidationError):
        CRFParams(damping=0.0)
    with pytest.raises(ValidationError):
        CRFParams(theta_a=0.0)


def test_unit_unaries_threshold_rule():
    r = [np.array([[[0.0, 0.4, 0.6, 1.0]]])]
    u = unit_unaries(r, threshold=0.5)
    labels = u.argmax(0)
    np.testing.assert_array_equal(labels[0, 0], [0, 0, 1, 1])


# -- end to end -------------------------------------------------------------------

def _field_and_prior(rng, dims=(2, 4, 4), bits=10):
    prior = TextBitPrior(TEXT_DIM, bits)
    p = torch.from_numpy(rng.uniform(size=(bits,) + dims)).float()
    return field_from_probs(p), prior


def test_segment_all_empty_units():
    rng = np.random.default_rng(8)
    q, prior = _field_and_prior(rng)
    res = segment_all(rng.uniform(size=(3, 4, 8, 8)), q, [], prior)
    assert res.labels.shape == (4, 8, 8) and not res.labels.any()


def test_segment_all_rejects_unknown_and_duplicate_units():
    rng = np.random.default_rng(9)
    q, prior = _field_and_prior(rng)
    video = rng.uniform(size=(3, 4, 8, 8))
    with pytest.raises(ValidationError):
        segment_all(video, q, ["red", "red"], prior)
    with pytest.raises(ValidationError):
        segment_all(video, q, ["zyzzyva"], prior)


def test_segment_all_masks_are_disjoint():
    rng = np.random.default_rng(10)
    q, prior = _field_and_prior(rng)
    res = segment_all(rng.uniform(size=(3, 4, 8, 8)), q, ["red", "blue"], prior)
    red, blue = res.binary("red"), res.binary("blue")
    assert not (red & blue).any()
    assert res.mapping() == {"red": 1, "blue": 2}
    assert len(res.relevance) == 2 and res.relevance[0].shape == (4, 8, 8)
