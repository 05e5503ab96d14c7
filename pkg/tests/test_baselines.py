import numpy as np
import pytest

from marc.baselines import (
    NestedHeads,
    ae_loss,
    cl_proxy_loss,
    cs_proxy_loss,
    jacobi_eigh,
    mrl_loss,
    pca_fit,
    pca_reconstruction_error,
    pca_transform,
)
from marc.matching import match_loss, predict_match
from marc.nets import Mlp
from marc.numcore import Tensor
from marc.rng import stream


# ---------------------------------------------------------------------------
# PCA


def test_pca_rank_one_data_perfect():
    t = np.linspace(-2, 2, 20).reshape(-1, 1)
    x = t @ np.array([[1.0, 2.0]])  # points on a line in 2-D
    model = pca_fit(x, 1)
    assert pca_reconstruction_error(x, model) < 1e-20


def test_pca_error_equals_discarded_eigenvalues():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 6))
    for k in (1, 3, 5):
        model = pca_fit(x, k)
        full_w, _ = jacobi_eigh(np.cov(x.T, ddof=1))
        discarded = np.clip(full_w, 0, None)[k:].sum()
        err = pca_reconstruction_error(x, model)
        assert abs(err - discarded) <= 1e-8 * max(1.0, abs(discarded))


def test_pca_matches_dense_eigensolver_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 8))
    model = pca_fit(x, 3)
    w, v = np.linalg.eigh(np.cov(x.T, ddof=1))  # independent oracle
    w, v = w[::-1], v[:, ::-1]
    assert np.allclose(model.eigenvalues, w[:3], atol=1e-8)
    for j in range(3):
        dot = abs(v[:, j] @ model.components[:, j])
        assert abs(dot - 1.0) < 1e-8  # equal up to sign


def test_pca_components_orthonormal():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 7))
    model = pca_fit(x, 4)
    gram = model.components.T @ model.components
    assert np.abs(gram - np.eye(4)).max() < 1e-8


def test_pca_eigenvalues_sorted_nonnegative():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(25, 5))
    model = pca_fit(x, 4)
    assert (np.diff(model.eigenvalues) <= 1e-12).all()
    assert (model.eigenvalues >= 0).all()


def test_pca_beats_random_frames():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(12, 4)) @ np.diag([3.0, 2.0, 1.0, 0.5])
    model = pca_fit(x, 2)
    best = pca_reconstruction_error(x, model)
    xc = x - x.mean(axis=0)
    for _ in range(100):
        q, _ = np.linalg.qr(rng.normal(size=(4, 2)))
        err = ((xc - (xc @ q) @ q.T) ** 2).sum() / (x.shape[0] - 1)
        assert best <= err + 1e-12


def test_pca_transform_centering():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, 4))
    model = pca_fit(x, 2)
    repeated = np.repeat(x.mean(axis=0, keepdims=True), 6, axis=0)
    assert np.abs(pca_transform(repeated, model)).max() < 1e-12


def test_pca_transform_matches_oracle_projection():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(30, 5))
    model = pca_fit(x, 3)
    expected = (x - x.mean(axis=0)) @ model.components
    assert np.allclose(pca_transform(x, model), expected, atol=1e-12)


def test_pca_error_nonincreasing_in_k():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(30, 6))
    errs = [pca_reconstruction_error(x, pca_fit(x, k)) for k in range(1, 6)]
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))


def test_pca_validation():
    x = np.random.default_rng(8).normal(size=(10, 4))
    with pytest.raises(ValueError, match="k"):
        pca_fit(x, 4)
    with pytest.raises(ValueError, match="samples"):
        pca_fit(x[:3], 3)


def test_pca_transform_dim_mismatch():
    x = np.random.default_rng(9).normal(size=(10, 4))
    model = pca_fit(x, 2)
    with pytest.raises(ValueError, match="pca_transform"):
        pca_transform(np.ones((3, 5)), model)


# ---------------------------------------------------------------------------
# proxies


def test_cs_perfect_positive():
    r = np.random.default_rng(10).normal(size=(4, 3))
    assert cs_proxy_loss(Tensor(r), Tensor(r), np.ones(4)).item() < 1e-20


def test_cs_perfect_negative():
    r = np.random.default_rng(11).normal(size=(4, 3))
    assert cs_proxy_loss(Tensor(r), Tensor(-r), np.zeros(4)).item() < 1e-20


def test_cs_orthogonal_positive_is_one():
    r_u = np.array([[1.0, 0.0]])
    r_i = np.array([[0.0, 1.0]])
    assert abs(cs_proxy_loss(Tensor(r_u), Tensor(r_i), [1]).item() - 1.0) < 1e-12


def test_cs_zero_norm_errors():
    with pytest.raises(ValueError, match="zero-norm"):
        cs_proxy_loss(Tensor(np.zeros((2, 2))), Tensor(np.ones((2, 2))), [1, 0])


def test_cl_two_orthogonal_rows():
    r = np.eye(2)
    got = cl_proxy_loss(Tensor(r), Tensor(r), tau=1.0).item()
    assert abs(got - np.log(1.0 + np.exp(-1.0))) < 1e-12


def test_cl_identical_rows_is_ln_n():
    for n in (2, 5, 8):
        r = np.ones((n, 3))
        got = cl_proxy_loss(Tensor(r), Tensor(r), tau=0.5).item()
        assert abs(got - np.log(n)) < 1e-12


def test_cl_matches_direct_softmax_oracle():
    rng = np.random.default_rng(12)
    r_u = rng.normal(size=(8, 4))
    r_i = rng.normal(size=(8, 4))
    tau = 0.07
    un = r_u / np.linalg.norm(r_u, axis=1, keepdims=True)
    vn = r_i / np.linalg.norm(r_i, axis=1, keepdims=True)
    sims = un @ vn.T / tau
    expected = 0.0
    for i in range(8):
        p = np.exp(sims[i] - sims[i].max())
        p /= p.sum()
        expected -= np.log(p[i])
    expected /= 8
    assert abs(cl_proxy_loss(Tensor(r_u), Tensor(r_i), tau).item() - expected) < 1e-10


def test_cl_needs_two_rows():
    with pytest.raises(ValueError, match="n >= 2"):
        cl_proxy_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))


def test_cl_nonnegative():
    rng = np.random.default_rng(13)
    for _ in range(5):
        r_u, r_i = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        assert cl_proxy_loss(Tensor(r_u), Tensor(r_i)).item() >= 0


# ---------------------------------------------------------------------------
# nested compression


def test_mrl_single_full_prefix_equals_match_loss_bitwise():
    rng = np.random.default_rng(14)
    d_c = 4
    heads = NestedHeads((d_c,), d_c, stream(0, "h"))
    c_u, c_i = rng.normal(size=(6, d_c)), rng.normal(size=(6, d_c))
    y = rng.integers(0, 2, size=6).astype(float)
    got = mrl_loss(Tensor(c_u), Tensor(c_i), y, heads).item()
    expected = match_loss(predict_match(Tensor(c_u), Tensor(c_i), heads.heads[0]), y).item()
    assert got == expected


def test_mrl_zero_heads_is_prefixcount_ln2():
    rng = np.random.default_rng(15)
    heads = NestedHeads((2, 4), 4, stream(1, "h"))
    for head in heads.heads:
        for w in head.mlp.weights:
            w.values[:] = 0.0
    c = rng.normal(size=(5, 4))
    y = rng.integers(0, 2, size=5).astype(float)
    got = mrl_loss(Tensor(c), Tensor(c), y, heads).item()
    assert abs(got - 2 * np.log(2.0)) < 1e-12


def test_mrl_two_prefixes_compose():
    rng = np.random.default_rng(16)
    heads = NestedHeads((2, 4), 4, stream(2, "h"))
    c_u, c_i = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    y = rng.integers(0, 2, size=6).astype(float)
    expected = 0.0
    for m, head in zip((2, 4), heads.heads):
        expected += match_loss(
            predict_match(Tensor(c_u[:, :m]), Tensor(c_i[:, :m]), head), y
        ).item()
    got = mrl_loss(Tensor(c_u), Tensor(c_i), y, heads).item()
    assert abs(got - expected) < 1e-12


def test_mrl_prefix_exceeding_dc_errors():
    with pytest.raises(ValueError, match="prefix"):
        NestedHeads((2, 8), 4, stream(3, "h"))
    heads = NestedHeads((2, 4), 4, stream(3, "h"))
    with pytest.raises(ValueError, match="mrl_loss"):
        mrl_loss(Tensor(np.ones((3, 3))), Tensor(np.ones((3, 3))), [1, 0, 1], heads)


def test_nested_dims_strictly_increasing():
    with pytest.raises(ValueError, match="increasing"):
        NestedHeads((4, 4), 8, stream(4, "h"))


# ---------------------------------------------------------------------------
# autoencoder


def test_ae_identity_nets_zero_loss():
    d = 3
    enc = Mlp([d, d], stream(5, "e"), name="enc")
    dec = Mlp([d, d], stream(5, "d"), name="dec")
    enc.weights[0].values = np.eye(d)
    dec.weights[0].values = np.eye(d)
    r = np.random.default_rng(17).normal(size=(6, d))
    assert ae_loss(Tensor(r), enc, dec).item() < 1e-25


def test_ae_zero_decoder_is_mean_square():
    d = 4
    enc = Mlp([d, 2], stream(6, "e"), name="enc")
    dec = Mlp([2, d], stream(6, "d"), name="dec")
    dec.weights[0].values[:] = 0.0
    r = np.random.default_rng(18).normal(size=(5, d))
    expected = (r**2).sum() / (5 * d)
    assert abs(ae_loss(Tensor(r), enc, dec).item() - expected) < 1e-12


def test_ae_random_matches_direct_evaluation():
    enc = Mlp([4, 3, 2], stream(7, "e"), name="enc")
    dec = Mlp([2, 3, 4], stream(7, "d"), name="dec")
    r = np.random.default_rng(19).normal(size=(6, 4))
    h = np.maximum(r @ enc.weights[0].values + enc.biases[0].values, 0.0)
    z = h @ enc.weights[1].values + enc.biases[1].values
    h2 = np.maximum(z @ dec.weights[0].values + dec.biases[0].values, 0.0)
    recon = h2 @ dec.weights[1].values + dec.biases[1].values
    expected = ((r - recon) ** 2).mean()
    assert abs(ae_loss(Tensor(r), enc, dec).item() - expected) < 1e-12
