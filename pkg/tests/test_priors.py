import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralannot.errors import DimensionMismatch, InsufficientData
from neuralannot.priors import (
    LossWeights,
    PcaEmbedding,
    decode,
    encode,
    fit_pca,
    geman_mcclure,
    geman_mcclure_grad,
    l2_prior,
    l2_prior_grad,
)

from conftest import central_diff, rel_err


def _corpus(rng, M=200, D=12, rank=5):
    scales = np.linspace(2.0, 0.5, rank)
    low_rank = (rng.normal(size=(M, rank)) * scales) @ rng.normal(size=(rank, D))
    return low_rank + 0.05 * rng.normal(size=(M, D)) + rng.normal(size=D)


def _recon_err(X, mean, basis):
    C = X - mean
    return float(np.sum((C - C @ basis.T @ basis) ** 2))


def test_identical_poses():
    x = np.arange(6.0)
    emb = fit_pca(np.tile(x, (10, 1)), 2)
    np.testing.assert_allclose(emb.mean, x)
    np.testing.assert_allclose(emb.variances, 0.0, atol=1e-20)


def test_line_is_reconstructed_exactly(rng):
    mu, u = rng.normal(size=9), rng.normal(size=9)
    X = mu + np.outer(rng.normal(size=40), u)
    emb = fit_pca(X, 1)
    assert np.max(np.abs(decode(emb, encode(emb, X)) - X)) < 1e-9


def test_basis_orthonormal_and_sorted(rng):
    emb = fit_pca(_corpus(rng), 4)
    np.testing.assert_allclose(emb.basis @ emb.basis.T, np.eye(4), atol=1e-8)
    assert np.all(np.diff(emb.variances) <= 0)


def test_beats_random_bases(rng):
    X = _corpus(rng)
    d = 3
    emb = fit_pca(X, d)
    best = _recon_err(X, emb.mean, emb.basis)
    for _ in range(100):
        Q, _ = np.linalg.qr(rng.normal(size=(X.shape[1], d)))
        assert best <= _recon_err(X, X.mean(0), Q.T) + 1e-9


def test_encode_decode_examples(rng):
    X = _corpus(rng)
    emb = fit_pca(X, 4)
    np.testing.assert_allclose(decode(emb, np.zeros(4)), emb.mean)
    np.testing.assert_allclose(encode(emb, emb.mean), 0.0, atol=1e-12)
    sv = np.linalg.svd(X - X.mean(0), compute_uv=False)
    tail = np.sum(sv[4:] ** 2)
    total = np.sum((decode(emb, encode(emb, X)) - X) ** 2)
    assert total <= tail + 1e-9
    with pytest.raises(DimensionMismatch):
        decode(emb, np.zeros(3))
    with pytest.raises(DimensionMismatch):
        encode(emb, np.zeros(5))


def test_projection_idempotent(rng):
    emb = fit_pca(_corpus(rng), 4)
    x = rng.normal(size=(5, 12))
    once = decode(emb, encode(emb, x))
    np.testing.assert_allclose(decode(emb, encode(emb, once)), once, atol=1e-12)


def test_fit_pca_errors(rng):
    with pytest.raises(InsufficientData):
        fit_pca(rng.normal(size=(3, 5)), 3)
    with pytest.raises(InsufficientData):
        fit_pca(rng.normal(size=(10, 5)), 0)


def test_embedding_file_round_trip(tmp_path, rng):
    emb = fit_pca(_corpus(rng), 3)
    emb.save(tmp_path / "emb.json")
    back = PcaEmbedding.load(tmp_path / "emb.json")
    np.testing.assert_array_equal(back.basis, emb.basis)
    np.testing.assert_array_equal(back.mean, emb.mean)


def test_geman_mcclure_examples():
    s = 0.1
    assert geman_mcclure(0.0, s) == 0.0
    assert geman_mcclure(s, s) == pytest.approx(s * s / 2, rel=1e-15)
    assert abs(geman_mcclure(1e6 * s, s) - s * s) <= 1e-9 * s * s
    with pytest.raises(ValueError):
        geman_mcclure(1.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(0.01, 1.0))
def test_geman_mcclure_properties(e, sigma):
    rho = geman_mcclure(e, sigma)
    assert rho == geman_mcclure(-e, sigma)
    assert 0.0 <= rho <= sigma * sigma
    if abs(e) > 1e-3:
        assert geman_mcclure(abs(e) * 1.01, sigma) > rho
        # complex-step derivative: exact to rounding for this analytic function
        num = geman_mcclure(e + 1e-30j, sigma).imag / 1e-30
        assert geman_mcclure_grad(e, sigma) == pytest.approx(num, rel=1e-6, abs=1e-15)


def test_l2_prior(rng):
    assert l2_prior({"pose": np.zeros(5)}, {"pose": 0.3}) == 0.0
    assert l2_prior({"pose": np.array([2.0])}, {"pose": 1.0}) == 4.0
    vals = {"pose": rng.normal(size=6), "betas": rng.normal(size=10)}
    w = {"pose": 0.01, "betas": 0.1}
    g = l2_prior_grad(vals, w)
    for k in vals:
        num = central_diff(lambda x: l2_prior({**vals, k: x}, w), vals[k])
        assert rel_err(g[k], num) < 1e-6


def test_loss_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(ax={"pose": -1.0})
    with pytest.raises(ValueError):
        LossWeights(w_2d=-0.1)
    w = LossWeights()
    assert w.tg["latent"] == 0.01 and w.ax["betas"] == 0.1
