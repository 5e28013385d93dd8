import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mmkp import numerics as nx
from mmkp.data import FEATURE_DIM, N_REGIONS
from mmkp.encoders import ImageEncoder, TextEncoder, load_embeddings, max_pool
from mmkp.errors import EmptyInput, NumericError, ShapeError

D = torch.float64


def text_encoder(V=12, d_emb=6, d1=8, seed=0):
    torch.manual_seed(seed)
    return TextEncoder(V, d_emb, d1, dropout=0.0).to(D).eval()


def ids(*xs):
    return torch.tensor([list(xs)])


def test_type_table_zero_gives_word_embeddings():
    enc = text_encoder()
    with torch.no_grad():
        enc.type_emb.weight.zero_()
    out = enc.embed(ids(3, 4, 5), ids(0, 1, 2))
    assert torch.equal(out, enc.word_emb.weight[[3, 4, 5]].unsqueeze(0))


def test_word_table_zero_gives_type_embeddings():
    enc = text_encoder()
    with torch.no_grad():
        enc.word_emb.weight.zero_()
    out = enc.embed(ids(3, 4, 5), ids(0, 2, 1))
    assert torch.equal(out, enc.type_emb.weight[[0, 2, 1]].unsqueeze(0))


def test_zero_recurrent_weights_give_zero_states():
    enc = text_encoder()
    with torch.no_grad():
        for p in enc.gru.parameters():
            p.zero_()
    H, M = enc(ids(1, 2, 3), ids(0, 0, 1), torch.tensor([3]))
    assert torch.all(H == 0) and torch.all(M == 0)


def test_single_token():
    enc = text_encoder()
    H, M = enc(ids(4), ids(0), torch.tensor([1]))
    assert H.shape == (1, 1, 8)
    assert torch.equal(M[0], H[0, 0])


def test_default_split_per_direction():
    enc = TextEncoder(10)
    assert enc.gru.hidden_size == 150 and enc.gru.bidirectional
    assert enc.word_emb.weight.shape[1] == 200


@given(st.permutations(list(range(5))))
def test_pool_permutation_invariant(perm):
    h = torch.tensor(np.random.default_rng(0).normal(size=(5, 4)))
    assert torch.equal(max_pool(h), max_pool(h[list(perm)]))


def test_pool_dominates_every_state():
    enc = text_encoder()
    H, M = enc(torch.tensor([[1, 2, 3, 4, 5, 6]]), torch.tensor([[0, 0, 0, 1, 2, 2]]), torch.tensor([6]))
    assert torch.all(M[0] >= H[0])


def test_padding_does_not_change_encoding():
    enc = text_encoder()
    H1, M1 = enc(ids(1, 2, 3), ids(0, 1, 2), torch.tensor([3]))
    H2, M2 = enc(torch.tensor([[1, 2, 3, 0, 0], [4, 5, 0, 0, 0]]), torch.tensor([[0, 1, 2, 0, 0], [0, 0, 0, 0, 0]]),
                 torch.tensor([3, 2]))
    assert torch.allclose(H1[0], H2[0, :3], atol=1e-14) and torch.allclose(M1[0], M2[0], atol=1e-14)
    assert torch.all(H2[1, 2:] == 0)


def _np_gru_direction(x, w_ih, w_hh, b_ih, b_hh):
    # gates ordered (reset, update, candidate), as in the standard formulation
    hdim = w_hh.shape[1]
    h = np.zeros(hdim)
    out = []
    sig = lambda v: 1 / (1 + np.exp(-v))
    for xt in x:
        gi = w_ih @ xt + b_ih
        gh = w_hh @ h + b_hh
        r = sig(gi[:hdim] + gh[:hdim])
        z = sig(gi[hdim:2 * hdim] + gh[hdim:2 * hdim])
        n = np.tanh(gi[2 * hdim:] + r * gh[2 * hdim:])
        h = (1 - z) * n + z * h
        out.append(h)
    return np.array(out)


def test_bigru_matches_numpy_oracle():
    enc = text_encoder()
    tok, typ = ids(1, 5, 2, 7), ids(0, 0, 1, 2)
    H, M = enc(tok, typ, torch.tensor([4]))
    x = (enc.word_emb.weight[tok[0]] + enc.type_emb.weight[typ[0]]).detach().numpy()
    g = {n: p.detach().numpy() for n, p in enc.gru.named_parameters()}
    fwd = _np_gru_direction(x, g["weight_ih_l0"], g["weight_hh_l0"], g["bias_ih_l0"], g["bias_hh_l0"])
    bwd = _np_gru_direction(x[::-1], g["weight_ih_l0_reverse"], g["weight_hh_l0_reverse"],
                            g["bias_ih_l0_reverse"], g["bias_hh_l0_reverse"])[::-1]
    ref = np.concatenate([fwd, bwd], axis=1)
    assert np.abs(H[0].detach().numpy() - ref).max() < 1e-12
    assert np.abs(M[0].detach().numpy() - ref.max(0)).max() < 1e-12


def test_text_encoder_gradients():
    enc = text_encoder(V=8, d_emb=3, d1=4)
    params = dict(enc.named_parameters())
    tok, typ = torch.tensor([[1, 5, 2, 7], [3, 4, 0, 0]]), torch.tensor([[0, 0, 1, 2], [0, 1, 0, 0]])
    w = torch.tensor(np.random.default_rng(0).normal(size=(2, 4, 4)))

    def fn():
        H, M = enc(tok, typ, torch.tensor([4, 2]))
        return (H * w).sum() + (M ** 2).sum()

    rep = nx.finite_difference_check(fn, params)
    assert max(r["max_rel_err"] for r in rep.values()) < 1e-4


def test_embed_rejects_bad_ids():
    enc = text_encoder()
    with pytest.raises(IndexError):
        enc.embed(ids(99), ids(0))
    with pytest.raises(IndexError):
        enc.embed(ids(1), ids(3))


def test_empty_input_rejected():
    enc = text_encoder()
    with pytest.raises(EmptyInput):
        enc(torch.zeros((1, 0), dtype=torch.int64), torch.zeros((1, 0), dtype=torch.int64), torch.tensor([0]))


def test_load_embeddings(tmp_path):
    from mmkp.data import Vocabulary

    vocab = Vocabulary(["cat", "dog"])
    enc = TextEncoder(vocab.size, d_emb=3, d1=4)
    (tmp_path / "e.txt").write_text("cat 1 2 3\nbird 4 5 6\ndog 1 2\n")
    assert load_embeddings(tmp_path / "e.txt", vocab, enc.word_emb) == 1
    assert enc.word_emb.weight[vocab.id_of["cat"]].tolist() == [1.0, 2.0, 3.0]


# ------------------------------------------------------------------ image


def image_encoder(d1=4, seed=0):
    torch.manual_seed(seed)
    return ImageEncoder(d1).to(D)


def test_zero_weight_gives_bias_rows():
    enc = image_encoder()
    with torch.no_grad():
        enc.proj.weight.zero_()
    out = enc(torch.randn(N_REGIONS, FEATURE_DIM, dtype=D))
    assert torch.equal(out, enc.proj.bias.expand(N_REGIONS, -1))


def test_zero_input_zero_bias():
    enc = image_encoder()
    with torch.no_grad():
        enc.proj.bias.zero_()
    assert torch.all(enc(torch.zeros(N_REGIONS, FEATURE_DIM, dtype=D)) == 0)


def test_projection_matches_loop_oracle():
    enc = image_encoder(d1=4, seed=3)
    raw = np.random.default_rng(3).normal(size=(N_REGIONS, FEATURE_DIM))
    out = enc(torch.tensor(raw)).detach().numpy()
    W = enc.proj.weight.detach().numpy()   # (d1, 512)
    b = enc.proj.bias.detach().numpy()
    ref = np.zeros((N_REGIONS, 4))
    for r in range(N_REGIONS):
        for j in range(4):
            acc = 0.0
            for k in range(FEATURE_DIM):
                acc += raw[r, k] * W[j, k]
            ref[r, j] = acc + b[j]
    assert np.abs(out - ref).max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 100))
def test_projection_linear_without_bias(a, c, seed):
    enc = image_encoder()
    with torch.no_grad():
        enc.proj.bias.zero_()
    g = torch.Generator().manual_seed(seed)
    x, y = (torch.randn(N_REGIONS, FEATURE_DIM, generator=g, dtype=D) for _ in range(2))
    lhs = enc(a * x + c * y)
    rhs = a * enc(x) + c * enc(y)
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_projection_shape_and_errors():
    enc = image_encoder(d1=6)
    assert enc(torch.zeros(2, N_REGIONS, FEATURE_DIM, dtype=D)).shape == (2, N_REGIONS, 6)
    with pytest.raises(ShapeError):
        enc(torch.zeros(48, FEATURE_DIM, dtype=D))
    bad = torch.zeros(N_REGIONS, FEATURE_DIM, dtype=D)
    bad[0, 0] = float("nan")
    with pytest.raises(NumericError):
        enc(bad)
