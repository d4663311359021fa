import numpy as np
import pytest

from sfrulstm.multimodal import (concat_all_forward, matt_fuse, matt_weights, modsf_forward,
                                 sfmod_forward)
from sfrulstm.rulstm import BranchState, classify, roll_encode, unroll_decode
from sfrulstm.slowfast import build_clock, fuse_logits, sf_attention, slowfast_forward

from test_rulstm import rand_branch
from test_slowfast import oracle_weights, rand_mlp

CLOCK = build_clock(0.5, 0.25, 1.0, 1.0)
DIMS = (3, 2)


def setup(rng, M=2, d=3, C=4):
    params = [[rand_branch(rng, DIMS[m], d, C) for _ in range(2)] for m in range(M)]
    feats = [rng.normal(size=(CLOCK.T, DIMS[m])) for m in range(M)]
    return params, feats


def branch_outputs(feats, params):
    """out[m][b] = list over fused steps of (logits, encoder state)."""
    out = []
    for x, plist in zip(feats, params):
        row = []
        for b, p in enumerate(plist):
            r = CLOCK.ratios[b]
            sub = x[::r]
            states = roll_encode(sub, p.enc)
            steps = []
            for t in CLOCK.fused_steps:
                k = (t - 1) // r
                u = unroll_decode(sub[k], states[k], len(sub) - k, p.dec)
                steps.append((classify(u, p.clf_W, p.clf_b), states[k].concat()))
            row.append(steps)
        out.append(row)
    return out


def test_matt_weights_examples(rng):
    s = [BranchState(rng.normal(size=3), rng.normal(size=3))]
    np.testing.assert_array_equal(matt_weights(s, rand_mlp(rng, 6, 4, 1)), [1.0])
    s3 = [BranchState(rng.normal(size=3), rng.normal(size=3)) for _ in range(3)]
    np.testing.assert_allclose(matt_weights(s3, rand_mlp(rng, 18, 4, 3, True)), np.full(3, 1 / 3))
    p = rand_mlp(rng, 18, 4, 3)
    x = np.concatenate([v.concat() for v in s3])
    np.testing.assert_allclose(matt_weights(s3, p), oracle_weights(x, p), atol=1e-12)
    with pytest.raises(ValueError):
        matt_weights(s3[:2], p)


def test_matt_fuse(rng):
    v, a = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_allclose(matt_fuse([v, v], [0.4, 0.6]), v, atol=1e-15)
    np.testing.assert_array_equal(matt_fuse([a], [1.0]), a)
    np.testing.assert_allclose(matt_fuse([a, v], [0.25, 0.75]), 0.25 * a + 0.75 * v, atol=1e-15)


def test_modsf_matches_composition_oracle(rng):
    params, feats = setup(rng)
    matt = [rand_mlp(rng, 12, 5, 2) for _ in range(2)]
    sf = rand_mlp(rng, 12, 5, 2)
    res = modsf_forward(feats, CLOCK, params, matt, sf)
    outs = branch_outputs(feats, params)
    expect = []
    for i in range(len(CLOCK.fused_steps)):
        l_b, s_b = [], []
        for b in range(2):
            rs = [outs[m][b][i][1] for m in range(2)]
            w = matt_weights(rs, matt[b])
            l_b.append(matt_fuse([outs[m][b][i][0] for m in range(2)], w))
            s_b.append(sum(w[m] * rs[m] for m in range(2)))
        expect.append(fuse_logits(l_b, sf_attention(s_b, sf)))
    np.testing.assert_allclose(res.logits[0], expect, atol=1e-12)


@pytest.mark.parametrize("matt_input", ["weighted", "raw"])
def test_sfmod_matches_composition_oracle(rng, matt_input):
    params, feats = setup(rng)
    sf = [rand_mlp(rng, 12, 5, 2) for _ in range(2)]
    matt = rand_mlp(rng, 12 if matt_input == "weighted" else 24, 5, 2)
    res = sfmod_forward(feats, CLOCK, params, sf, matt, matt_input)
    outs = branch_outputs(feats, params)
    expect = []
    for i in range(len(CLOCK.fused_steps)):
        l_m, s_m, raw = [], [], []
        for m in range(2):
            rs = [outs[m][b][i][1] for b in range(2)]
            w = sf_attention(rs, sf[m])
            l_m.append(fuse_logits([outs[m][b][i][0] for b in range(2)], w))
            s_m.append(w[0] * rs[0] + w[1] * rs[1])
            raw.append(np.concatenate(rs))
        wm = matt_weights(s_m if matt_input == "weighted" else raw, matt)
        expect.append(matt_fuse(l_m, wm))
    np.testing.assert_allclose(res.logits[0], expect, atol=1e-12)


def test_concat_all_matches_oracle(rng):
    params, feats = setup(rng)
    head = rand_mlp(rng, 24, 5, 4)
    res = concat_all_forward(feats, CLOCK, params, head)
    outs = branch_outputs(feats, params)
    expect = []
    for i in range(len(CLOCK.fused_steps)):
        rs = [outs[m][b][i][1] for m in range(2) for b in range(2)]
        ls = [outs[m][b][i][0] for m in range(2) for b in range(2)]
        expect.append(fuse_logits(ls, oracle_weights(np.concatenate(rs), head)))
    np.testing.assert_allclose(res.logits[0], expect, atol=1e-12)


def test_single_modality_reductions(rng):
    params, feats = setup(rng, M=1)
    sf = rand_mlp(rng, 12, 5, 2)
    ref = slowfast_forward(feats[0], CLOCK, *params[0], "attention", sf)
    a = modsf_forward(feats, CLOCK, params, [rand_mlp(rng, 6, 4, 1) for _ in range(2)], sf)
    b = sfmod_forward(feats, CLOCK, params, [sf], rand_mlp(rng, 6, 4, 1))
    assert np.abs(a.logits - ref.logits).max() <= 1e-12
    assert np.abs(b.logits - ref.logits).max() <= 1e-12


def test_zero_heads_double_mean(rng):
    params, feats = setup(rng)
    outs = branch_outputs(feats, params)
    mean = np.array([np.mean([outs[m][b][i][0] for m in range(2) for b in range(2)], axis=0)
                     for i in range(len(CLOCK.fused_steps))])
    a = modsf_forward(feats, CLOCK, params, [rand_mlp(rng, 12, 5, 2, True) for _ in range(2)],
                      rand_mlp(rng, 12, 5, 2, True))
    b = sfmod_forward(feats, CLOCK, params, [rand_mlp(rng, 12, 5, 2, True) for _ in range(2)],
                      rand_mlp(rng, 12, 5, 2, True))
    c = concat_all_forward(feats, CLOCK, params, rand_mlp(rng, 24, 5, 4, True))
    for res in (a, b, c):
        np.testing.assert_allclose(res.logits[0], mean, atol=1e-12)
    np.testing.assert_allclose(c.weights, 0.25)


def test_missing_branch_raises(rng):
    params, feats = setup(rng)
    with pytest.raises(ValueError):
        modsf_forward(feats, CLOCK, [params[0], params[1][:1]],
                      [rand_mlp(rng, 12, 5, 2)] * 2, rand_mlp(rng, 12, 5, 2))
