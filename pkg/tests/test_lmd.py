import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from via import autodiff as ad
from via import lmd


def _basis(K, C, seed):
    return ad.Tensor(lmd.init_basis(K, C, np.random.default_rng(seed)))


def test_axis_basis_projection(f64):
    # D = {e1, e2} in R^4, constant latent (1, 2, 3, 4)
    D = ad.Tensor(np.eye(4)[:2])
    r = ad.Tensor(np.tile([1.0, 2.0, 3.0, 4.0], (5, 1)))
    d = lmd.decompose(r, D)
    np.testing.assert_array_equal(d.magnitudes.data, [1.0, 2.0])
    np.testing.assert_array_equal(d.character.data, [1.0, 2.0, 0.0, 0.0])
    np.testing.assert_array_equal(d.motion.data, np.tile([0.0, 0.0, 3.0, 4.0], (5, 1)))


def test_magnitudes_use_temporal_mean(f64):
    D = ad.Tensor(np.array([[1.0, 0.0, 0.0]]))
    r = ad.Tensor(np.array([[2.0, 1.0, 0.0], [4.0, -1.0, 5.0]]))
    d = lmd.decompose(r, D)
    assert d.magnitudes.data[0] == 3.0
    # only the static part is removed, the motion keeps its temporal variation
    np.testing.assert_array_equal(d.motion.data[:, 0], [-1.0, 1.0])


def test_unnormalized_basis_divides_by_squared_norm(f64):
    D = ad.Tensor(np.array([[2.0, 0.0, 0.0]]))
    r = ad.Tensor(np.array([[3.0, 1.0, 1.0]]))
    d = lmd.decompose(r, D)
    assert d.magnitudes.data[0] == pytest.approx(1.5)
    np.testing.assert_allclose(d.character.data, [3.0, 0.0, 0.0])


def test_zero_magnitudes_give_pure_motion(f64):
    D = _basis(3, 6, 0)
    motion = ad.Tensor(np.random.default_rng(1).normal(size=(4, 6)))
    out = lmd.manipulate(motion, D, np.zeros(3))
    np.testing.assert_array_equal(out.data, motion.data)


@pytest.mark.parametrize("K", [2, 8, 32])
def test_recombination_identity_and_orthogonality(f64, K):
    rng = np.random.default_rng(K)
    D = _basis(K, 64, K)
    r = ad.Tensor(rng.normal(size=(50, 8, 64)))
    d = lmd.decompose(r, D)
    np.testing.assert_allclose(lmd.recombine(d.motion, d.character).data, r.data, atol=1e-12, rtol=0)
    resid = np.abs(d.motion.data.mean(axis=1) @ D.data.T).max()
    assert resid < 1e-10


def test_gram_schmidt_textbook_example():
    out = lmd.gram_schmidt(np.array([[1.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, 1.0]], atol=1e-15)


def test_gram_schmidt_keeps_first_row_and_span(rng):
    d = rng.normal(size=(5, 9))
    out = lmd.gram_schmidt(d)
    np.testing.assert_array_equal(out[0], d[0])
    assert lmd.orthogonality_residual(out) < 1e-12
    # every prefix spans the same subspace
    for k in range(1, 6):
        stacked = np.vstack([d[:k], out[:k]])
        assert np.linalg.matrix_rank(stacked, tol=1e-8) == k


def test_reorthogonalize_is_idempotent_on_orthogonal_basis(f64):
    D = _basis(8, 32, 3)
    before = D.data.copy()
    lmd.reorthogonalize(D)
    assert np.abs(D.data - before).max() <= 1e-10


def test_degenerate_vector_is_reinitialized(caplog):
    d = np.array([[1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    with caplog.at_level(logging.WARNING, logger="via.lmd"):
        out = lmd.gram_schmidt(d, np.random.default_rng(0))
    assert "degenerate" in caplog.text
    assert np.linalg.norm(out[1]) > 0.5
    assert lmd.orthogonality_residual(out) < 1e-12


def test_non_orthogonal_basis_rejected(f64):
    D = ad.Tensor(np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]))
    with pytest.raises(lmd.BasisError, match="not orthogonal"):
        lmd.decompose(ad.Tensor(np.ones((2, 3))), D)


@pytest.mark.parametrize("shape", [(0, 8), (8, 8), (9, 8)])
def test_check_basis_rejects_bad_shapes(shape):
    with pytest.raises(lmd.BasisError):
        lmd.check_basis(np.eye(*shape) if shape[0] else np.ones(shape))


def test_init_basis_needs_k_below_channels():
    with pytest.raises(ValueError, match="K=64"):
        lmd.init_basis(64, 64, np.random.default_rng(0))


def test_decompose_shape_mismatch(f64):
    with pytest.raises(ad.ShapeError):
        lmd.decompose(ad.Tensor(np.ones((4, 6))), _basis(2, 8, 0))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_decomposition_is_linear_in_latent(K, seed):
    with ad.precision("float64"):
        rng = np.random.default_rng(seed)
        D = ad.Tensor(lmd.init_basis(K, 8, rng))
        r1, r2 = rng.normal(size=(2, 5, 8))
        a = lmd.decompose(ad.Tensor(r1 + r2), D).magnitudes.data
        b = lmd.decompose(ad.Tensor(r1), D).magnitudes.data + lmd.decompose(ad.Tensor(r2), D).magnitudes.data
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_decompose_gradients(f64, rng):
    D = ad.parameter(lmd.init_basis(3, 6, rng))
    r = ad.parameter(rng.normal(size=(2, 4, 6)))
    w = rng.normal(size=(2, 4, 6))

    def loss():
        d = lmd.decompose(r, D, check=False)
        return ad.sum(d.motion * ad.Tensor(w)) + ad.sum(ad.square(d.magnitudes))

    assert ad.check_gradients(loss, [r, D]) < 1e-6
