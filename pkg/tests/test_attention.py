import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allspark import tensor as T
from allspark.attention import (
    AttentionParams,
    FeatureMap,
    Origin,
    allspark_forward,
    attend,
    attention_weights,
    channel_cross_attention,
    channel_self_attention,
    identity_params,
    init_attention_params,
    _project_bank,
    _split_query,
)
from allspark.errors import ContractError, ShapeError
from allspark.memory import SemanticMemory
from allspark.tensor import Tensor
from oracles import channel_attention_bruteforce


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def test_identical_bank_channels_copy_through():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(5, 1))
    bank = Tensor(np.repeat(u, 4, axis=1))
    out = channel_cross_attention(_rand(rng, 5, 4), bank, identity_params(4)).tokens.data
    np.testing.assert_allclose(out, np.repeat(u, 4, axis=1), rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("level", [0.0, 2.5])
def test_flat_similarity_row_averages_bank(level):
    # a constant query channel meets token-centred bank channels: its similarity
    # row is c * sum_t k[t, j] = 0, so the weights are uniform
    rng = np.random.default_rng(1)
    q = rng.normal(size=(6, 3))
    q[:, 1] = level
    bank = rng.normal(size=(6, 3))
    bank -= bank.mean(axis=0)
    with T.precision("f64"):
        out = channel_cross_attention(Tensor(q), Tensor(bank), identity_params(3)).tokens.data
    np.testing.assert_allclose(out[:, 1], bank.mean(axis=1), rtol=1e-9, atol=1e-12)


def test_zero_query_channel_uncentred_bank():
    rng = np.random.default_rng(11)
    q = rng.normal(size=(6, 3))
    q[:, 0] = 0.0
    bank = rng.normal(size=(6, 4)) + 3.0
    with T.precision("f64"):
        params = identity_params(3)
        out = channel_cross_attention(Tensor(q), Tensor(bank), params).tokens.data
    padded = np.concatenate([bank, np.zeros((6, 2))], axis=1)  # second block is zero padded
    np.testing.assert_allclose(out[:, 0], padded.mean(axis=1), rtol=1e-9)


def test_matches_bruteforce_reference():
    rng = np.random.default_rng(2)
    d, C, Cb = 2, 2, 3
    h, bank = rng.normal(size=(d, C)), rng.normal(size=(d, Cb))
    w = [rng.normal(size=(C, C)) for _ in range(3)] + [rng.normal(size=(C, C))]
    with T.precision("f64"):
        params = AttentionParams(*(Tensor(x) for x in w))
        got = channel_cross_attention(Tensor(h), Tensor(bank), params).tokens.data
    np.testing.assert_allclose(got, channel_attention_bruteforce(h, bank, *w), rtol=1e-10, atol=1e-12)


def test_bruteforce_with_expansion():
    rng = np.random.default_rng(3)
    d, C, Cp, Cb = 3, 2, 4, 5
    h, bank = rng.normal(size=(d, C)), rng.normal(size=(d, Cb))
    w = [rng.normal(size=(C, Cp)) for _ in range(3)] + [rng.normal(size=(Cp, C))]
    with T.precision("f64"):
        got = channel_cross_attention(Tensor(h), Tensor(bank), AttentionParams(*(Tensor(x) for x in w))).tokens.data
    np.testing.assert_allclose(got, channel_attention_bruteforce(h, bank, *w), rtol=1e-10, atol=1e-12)


def test_heads_split_projected_channels():
    # two heads equal two independent single-head attentions on the halves
    rng = np.random.default_rng(4)
    d, C = 5, 4
    h, bank = rng.normal(size=(d, C)), rng.normal(size=(d, C))
    wq, wk, wv = (rng.normal(size=(C, C)) for _ in range(3))
    with T.precision("f64"):
        two = attend(Tensor(h @ wq), _project_bank(Tensor(bank), Tensor(wk), 2), _project_bank(Tensor(bank), Tensor(wv), 2), 2).data
        for s in (slice(0, 2), slice(2, 4)):
            one = attend(Tensor(h @ wq[:, s]), _project_bank(Tensor(bank), Tensor(wk[:, s]), 1),
                         _project_bank(Tensor(bank), Tensor(wv[:, s]), 1), 1).data
            np.testing.assert_allclose(two[:, s], one, rtol=1e-10)


def test_shapes_at_full_scale():
    rng = np.random.default_rng(5)
    d, C, K = 289, 512, 21
    q = Tensor(rng.normal(size=(d, C)).astype(np.float32))
    bank = Tensor(rng.normal(size=(d, K * C)).astype(np.float32))
    out = channel_cross_attention(q, bank, init_attention_params(C, rng=rng))
    assert out.tokens.shape == (289, 512)


def test_token_length_mismatch():
    rng = np.random.default_rng(6)
    with pytest.raises(ShapeError):
        channel_cross_attention(_rand(rng, 4, 3), _rand(rng, 5, 3), identity_params(3))


def test_infer_rejects_two_inputs():
    rng = np.random.default_rng(7)
    with pytest.raises(ContractError):
        allspark_forward(_rand(rng, 4, 3), _rand(rng, 4, 3), None, identity_params(3), "infer")


def test_warmup_falls_back_to_unlabeled_tokens():
    rng = np.random.default_rng(8)
    lab, unl = _rand(rng, 4, 3), _rand(rng, 4, 3)
    params = init_attention_params(3, rng=rng)
    mem = SemanticMemory(2, 3, 4)
    h_l, h_u = allspark_forward(lab, unl, mem, params, "train")
    np.testing.assert_array_equal(h_l.tokens.data, channel_cross_attention(lab, unl, params).tokens.data)
    np.testing.assert_array_equal(h_u.tokens.data, channel_self_attention(unl, params).tokens.data)
    assert h_l.origin is Origin.labeled and h_u.origin is Origin.unlabeled


def _invariant_instance(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 9))
    C = int(rng.integers(1, 6))
    heads = int(rng.choice([h for h in (1, 2) if C % h == 0]))
    nb = int(rng.integers(1, 4))
    q = Tensor(rng.normal(size=(d, C)).astype(np.float32))
    bank = Tensor(rng.normal(size=(d, nb * C)).astype(np.float32))
    return rng, q, bank, init_attention_params(C, num_heads=heads, rng=rng), nb


def test_attention_invariants_over_random_instances():
    for seed in range(100):
        rng, q, bank, params, nb = _invariant_instance(seed)
        H = params.num_heads
        k = _project_bank(bank, params.w_k, H)
        v = _project_bank(bank, params.w_v, H)
        qp = T.matmul(q, params.w_q)
        m = attention_weights(_split_query(qp, H), k).data
        assert np.abs(m.sum(-1) - 1).max() < 1e-6
        # joint permutation of the projected bank channels
        perm = rng.permutation(k.shape[-1])
        a = attend(qp, k, v, H).data
        b = attend(qp, Tensor(k.data[..., perm]), Tensor(v.data[..., perm]), H).data
        assert np.abs(a - b).max() < 1e-6
        # permuting whole C-blocks of the raw bank
        C = params.channels
        blocks = rng.permutation(nb)
        shuffled = np.concatenate([bank.data[:, i * C:(i + 1) * C] for i in blocks], axis=1)
        a = channel_cross_attention(q, bank, params).tokens.data
        b = channel_cross_attention(q, Tensor(shuffled), params).tokens.data
        assert np.abs(a - b).max() < 1e-6


def test_inference_ignores_memory_contents():
    rng = np.random.default_rng(9)
    f = _rand(rng, 4, 3)
    params = init_attention_params(3, rng=rng)
    empty = SemanticMemory(2, 3, 4)
    full = SemanticMemory(2, 3, 4)
    for k in range(2):
        full.enqueue(k, rng.normal(size=(4, 3)))
    a, _ = allspark_forward(f, None, empty, params, "infer")
    b, _ = allspark_forward(f, None, full, params, "infer")
    assert a.tokens.data.tobytes() == b.tokens.data.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3))
def test_batched_equals_per_sample(seed, B):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(B, 4, 3))
    bank = rng.normal(size=(4, 5))
    with T.precision("f64"):
        params = init_attention_params(3, rng=rng)
        batched = channel_cross_attention(Tensor(q), Tensor(bank), params).tokens.data
        for i in range(B):
            single = channel_cross_attention(Tensor(q[i]), Tensor(bank), params).tokens.data
            np.testing.assert_allclose(batched[i], single, rtol=1e-12, atol=1e-14)


def test_params_validate_shapes():
    with pytest.raises(ShapeError):
        AttentionParams(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 3))))
    with pytest.raises((ShapeError, ContractError, ValueError)):
        init_attention_params(3, num_heads=2)


def test_feature_map_dims():
    fm = FeatureMap(Tensor(np.zeros((7, 5))))
    assert (fm.d, fm.C) == (7, 5)
