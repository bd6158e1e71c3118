import math

import numpy as np
import pytest
import torch

from videotok.errors import ValidationError
from videotok.lapq import LaPQ, QuantBlock, TextBitPrior, align_grids, align_tensor
from videotok.lfq import CodebookConfig, quantize_sign


def test_align_examples():
    p = torch.tensor([[0.2, 0.4], [0.6, 0.8]]).view(1, 1, 1, 2, 2)
    q = quantize_sign(torch.logit(p), CodebookConfig(bits=1))
    down = align_grids(q, (1, 1, 1))
    assert abs(float(down.bit_probs) - 0.5) < 1e-6 and float(down.code) == 1.0
    same = align_grids(q, (1, 2, 2))
    assert torch.allclose(same.bit_probs, q.bit_probs)
    u = torch.full((1, 3, 2, 4, 4), 0.3)
    assert torch.allclose(align_tensor(u, (2, 2, 2)), torch.full((1, 3, 2, 2, 2), 0.3))
    up = align_tensor(torch.arange(2.0).view(1, 1, 1, 1, 2), (1, 1, 4))
    assert up.flatten().tolist() == [0.0, 0.0, 1.0, 1.0]
    with pytest.raises(ValidationError):
        align_tensor(u, (2, 3, 3))


def test_text_prior():
    prior = TextBitPrior(8, 4)
    with torch.no_grad():
        prior.weight.zero_()
    assert torch.allclose(prior(torch.randn(2, 8)), torch.full((2, 4), 0.5))
    prior = TextBitPrior(8, 4)
    e = torch.nn.functional.normalize(torch.randn(1, 8), dim=1)
    assert torch.equal(prior(e), prior(e))
    expect = [1 / (1 + math.exp(-sum(float(prior.weight[i, j]) * float(e[0, j]) for j in range(8)))) for i in range(4)]
    assert np.allclose(prior(e)[0].numpy(), expect, atol=1e-6)
    assert not prior(e).requires_grad


def test_degenerate_block_is_lfq_of_projection():
    blk = QuantBlock(4, 4, 8, attn_dim=4, heads=2, carry=False)
    with torch.no_grad():
        blk.lateral.weight.copy_(torch.eye(4).view(4, 4, 1, 1, 1))
    feat = torch.randn(1, 4, 2, 3, 3)
    cfg = CodebookConfig(bits=4)
    out = blk(None, feat, None, None, lambda z: quantize_sign(z, cfg))
    assert torch.equal(out.code, quantize_sign(feat, cfg).code)
    zero_words = torch.zeros(1, 2, 8)
    out2 = blk(None, feat, zero_words, None, lambda z: quantize_sign(z, cfg))
    assert torch.equal(out2.code, out.code)


def _sigmoid(x):
    return 1 / (1 + math.exp(-x))


def test_block_matches_scalar_oracle():
    torch.manual_seed(4)
    C, b, d, A, H = 3, 2, 4, 4, 2
    blk = QuantBlock(C, b, d, attn_dim=A, heads=H, carry=True)
    feat = torch.randn(1, C, 1, 2, 2)
    words = torch.randn(1, 3, d)
    prev_p = torch.rand(1, b, 1, 1, 1)
    from videotok.lfq import QuantizedField
    prev = QuantizedField(z=torch.logit(prev_p), code=torch.sign(prev_p - 0.5), bit_probs=prev_p,
                          indices=torch.zeros(1, 1, 1, 1, dtype=torch.int64))
    out = blk(prev, feat, words, None, lambda z: quantize_sign(z, CodebookConfig(bits=b)))
    Wl, bl = blk.lateral.weight.view(b, C).tolist(), blk.lateral.bias
    Wc = blk.carry.weight.view(b, b).tolist()
    Wq = blk.query.weight.view(A, C).tolist()
    Wk, Wv, Wf = blk.key.weight.tolist(), blk.value.weight.tolist(), blk.fuse.weight.tolist()
    dh = A // H
    for y in range(2):
        for x in range(2):
            f = [float(feat[0, c, 0, y, x]) for c in range(C)]
            q = [sum(Wq[a][c] * f[c] for c in range(C)) for a in range(A)]
            attn_out = [0.0] * A
            for h in range(H):
                sl = range(h * dh, (h + 1) * dh)
                scores = []
                for n in range(3):
                    k = [sum(Wk[a][j] * float(words[0, n, j]) for j in range(d)) for a in sl]
                    scores.append(sum(qi * ki for qi, ki in zip([q[a] for a in sl], k)) / math.sqrt(dh))
                m = max(scores)
                ex = [math.exp(s - m) for s in scores]
                w = [e / sum(ex) for e in ex]
                for a in sl:
                    attn_out[a] = sum(w[n] * sum(Wv[a][j] * float(words[0, n, j]) for j in range(d)) for n in range(3))
            for i in range(b):
                z = sum(Wl[i][c] * f[c] for c in range(C)) + (float(bl[i]) if bl is not None else 0.0)
                z += sum(Wc[i][j] * (2 * float(prev_p[0, j, 0, 0, 0]) - 1) for j in range(b))
                z += sum(Wf[i][a] * attn_out[a] for a in range(A))
                assert abs(float(out.z.detach()[0, i, 0, y, x]) - z) < 1e-5
                assert abs(float(out.bit_probs.detach()[0, i, 0, y, x]) - _sigmoid(z)) < 1e-5


def _pyramid(levels=4):
    grids = [(4, 8, 8), (2, 4, 4), (2, 2, 2), (1, 1, 1)][:levels]
    chans = [16, 32, 48, 64][:levels]
    return [torch.randn(1, c, *g) for c, g in zip(chans, grids)], chans


def test_pyramid_contract():
    feats, chans = _pyramid()
    lapq = LaPQ(chans, CodebookConfig(bits=10), 32)
    words, mask = torch.randn(1, 3, 32), torch.ones(1, 3, dtype=torch.bool)
    out = lapq(feats, words, mask)
    assert [o.grid for o in out] == [tuple(f.shape[2:]) for f in feats]
    assert all(o.bits == 10 for o in out)
    with pytest.raises(ValidationError):
        lapq(feats, words, mask, states=list(lapq.blocks)[:3])
    single = LaPQ(chans[:1], CodebookConfig(bits=10), 32)
    assert len(single(feats[:1], words, mask)) == 1


def test_states_are_level_specific():
    torch.manual_seed(2)
    feats = [torch.randn(1, 16, 2, 4, 4), torch.randn(1, 16, 2, 2, 2)]
    lapq = LaPQ([16, 16], CodebookConfig(bits=10), 32)
    words, mask = torch.randn(1, 3, 32), torch.ones(1, 3, dtype=torch.bool)
    a = lapq(feats, words, mask)
    blk0, blk1 = lapq.blocks
    blk1_carry = blk1.carry
    # swap states (block 0 has no carry path, so give it one for the swap)
    blk0.carry = blk1_carry
    b = lapq(feats, words, mask, states=[blk1, blk0])
    assert not all(torch.equal(x.z, y.z) for x, y in zip(a, b))


def test_carry_path_live():
    torch.manual_seed(3)
    feats, chans = _pyramid(2)
    lapq = LaPQ(chans, CodebookConfig(bits=10), 32)
    words, mask = torch.randn(1, 3, 32), torch.ones(1, 3, dtype=torch.bool)
    a = lapq(feats, words, mask)
    with torch.no_grad():
        lapq.blocks[1].carry.weight.zero_()
    b = lapq(feats, words, mask)
    assert not torch.equal(a[1].z, b[1].z)
    assert torch.equal(a[0].z, b[0].z)
