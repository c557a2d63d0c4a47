import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowprior.numerics import (
    RankDeficientError,
    RngStream,
    finite_diff_jacobian,
    gaussian_matrix,
    null_space,
    pseudo_solve,
    svd,
)


def test_stream_is_reproducible():
    a = RngStream(7, 3).sampler().normal(100)
    b = RngStream(7, 3).sampler().normal(100)
    assert np.array_equal(a, b)


def test_children_are_distinct_and_stable():
    root = RngStream(5)
    draws = [root.child(k).sampler().uniform(8) for k in range(20)]
    assert len({d.tobytes() for d in draws}) == 20
    assert root.child(1, 2) == root.child(1, 2)
    assert root.child(1, 2) != root.child(2, 1)


def test_uniform_matches_word_oracle():
    # 53 high bits of each Philox word, centred in its bucket
    words = np.random.Philox(key=np.array([11, 4], dtype=np.uint64)).random_raw(5)
    expect = [((int(w) >> 11) + 0.5) / 2.0 ** 53 for w in words]
    got = RngStream(11, 4).sampler().uniform(5)
    assert got.tolist() == expect
    assert np.all((got > 0) & (got < 1))


def test_normal_moments():
    z = RngStream(2).sampler().normal(200_000)
    assert abs(z.mean()) < 4 / math.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * math.sqrt(2 / z.size)


def test_stream_rejects_negative_seed():
    with pytest.raises(ValueError):
        RngStream(-1)


@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (16, 16), (40, 7)])
def test_svd_reconstructs(shape):
    M = RngStream(1).sampler().normal(shape)
    t = svd(M)
    k = min(shape)
    assert t.U.shape == (shape[0], k) and t.V.shape == (shape[1], k)
    assert np.max(np.abs(t.reconstruct() - M)) < 1e-12
    assert np.max(np.abs(t.U.T @ t.U - np.eye(k))) < 1e-12
    assert np.max(np.abs(t.V.T @ t.V - np.eye(k))) < 1e-12
    assert np.all(np.diff(t.sigma) <= 0) and np.all(t.sigma >= 0)
    assert np.allclose(t.sigma, np.linalg.svd(M, compute_uv=False), atol=1e-12)


def test_svd_rank_deficient_and_zero():
    u = np.arange(1.0, 6.0)
    t = svd(np.outer(u, u))
    assert t.sigma[0] == pytest.approx(u @ u)
    assert np.all(t.sigma[1:] < 1e-12)
    assert np.max(np.abs(t.V.T @ t.V - np.eye(5))) < 1e-12
    z = svd(np.zeros((3, 3)))
    assert np.all(z.sigma == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32))
def test_svd_property(m, n, seed):
    M = RngStream(seed).sampler().normal((m, n))
    t = svd(M)
    assert np.max(np.abs(t.reconstruct() - M)) < 1e-11


def test_pseudo_solve_minimum_norm():
    B = gaussian_matrix(4, 9, 1.0, RngStream(3))
    y = RngStream(4).sampler().normal(4)
    z = pseudo_solve(B, y)
    assert np.max(np.abs(B @ z - y)) < 1e-12
    # minimum norm: orthogonal to the null space
    N = null_space(B)
    assert N.shape == (9, 5)
    assert np.max(np.abs(N.T @ z)) < 1e-12
    assert np.max(np.abs(B @ N)) < 1e-12


def test_pseudo_solve_rejects_rank_deficient():
    B = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    with pytest.raises(RankDeficientError):
        pseudo_solve(B, [1.0, 2.0])
    with pytest.raises(ValueError):
        pseudo_solve(B, [1.0])


def test_gaussian_matrix_variance():
    A = gaussian_matrix(200, 200, 0.25, RngStream(9))
    assert abs(A.var() - 0.25) < 0.01
    with pytest.raises(ValueError):
        gaussian_matrix(2, 2, 0.0, RngStream(9))


def test_finite_diff_jacobian():
    f = lambda x: np.array([x[0] * x[1], np.sin(x[1])])
    J = finite_diff_jacobian(f, [2.0, 0.5])
    assert np.allclose(J, [[0.5, 2.0], [0.0, math.cos(0.5)]], atol=1e-9)
    with pytest.raises(FloatingPointError):
        with np.errstate(all="ignore"):
            finite_diff_jacobian(lambda x: np.log(x), [0.0])
