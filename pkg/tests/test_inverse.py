import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowprior.flow import FlowStack
from flowprior.inverse import (
    PSNR_CAP,
    InitStrategy,
    InverseProblemSpec,
    MeasurementOperator,
    VectorFileError,
    dct_basis,
    gamma_sweep,
    lasso_cd,
    lasso_dct,
    lbfgs,
    make_measurements,
    measurement_sweep,
    perturbation_sensitivity,
    psnr,
    read_samples,
    read_vector,
    solve,
    ssim,
    write_vector,
)
from flowprior.numerics import RngStream, pseudo_solve
from flowprior.training import make_toy_2d

from conftest import rel_err


# -- metrics -------------------------------------------------------------------


def test_psnr_closed_forms():
    ref = np.linspace(0, 1, 25)
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-12)
    assert psnr(ref, ref) == PSNR_CAP
    x = ref.copy()
    x[:4] += [0.5, -0.5, 0.5, -0.5]  # MSE = 1/25
    assert psnr(x, ref) == pytest.approx(10 * math.log10(25), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32))
def test_psnr_symmetric_and_permutation_invariant(n, seed):
    s = RngStream(seed).sampler()
    x, r = s.uniform(n), s.uniform(n)
    p = s.permutation(n)
    assert psnr(x, r) == psnr(r, x)
    assert psnr(x[p], r[p]) == pytest.approx(psnr(x, r), abs=1e-9)


def test_psnr_length_mismatch():
    with pytest.raises(ValueError):
        psnr([0.0, 1.0], [0.0])


def _ssim_oracle(x, ref, H, W, win=8, K1=0.01, K2=0.03, L=1.0):
    """Direct per-tile loops over the standard SSIM product."""
    x = np.asarray(x).reshape(H, W)
    ref = np.asarray(ref).reshape(H, W)
    wh, ww = min(win, H), min(win, W)
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    vals = []
    for r0 in range(0, H - wh + 1, wh):
        for c0 in range(0, W - ww + 1, ww):
            a = [x[r0 + i][c0 + j] for i in range(wh) for j in range(ww)]
            b = [ref[r0 + i][c0 + j] for i in range(wh) for j in range(ww)]
            N = len(a)
            ma, mb = sum(a) / N, sum(b) / N
            va = sum((u - ma) ** 2 for u in a) / N
            vb = sum((v - mb) ** 2 for v in b) / N
            cv = sum((u - ma) * (v - mb) for u, v in zip(a, b)) / N
            vals.append((2 * ma * mb + C1) * (2 * cv + C2) / ((ma ** 2 + mb ** 2 + C1) * (va + vb + C2)))
    return sum(vals) / len(vals)


def test_ssim_matches_direct_formula():
    H, W = 16, 24
    board = ((np.add.outer(np.arange(H), np.arange(W)) % 2) == 0).astype(float).ravel()
    noise = RngStream(3).sampler().uniform(H * W)
    blend = 0.5 * board + 0.5 * noise
    assert ssim(blend, board, (H, W)) == pytest.approx(_ssim_oracle(blend, board, H, W), abs=1e-10)
    assert ssim(board, board, (H, W)) == pytest.approx(1.0, abs=1e-15)
    assert ssim(1 - board, board, (H, W)) < 1


def test_ssim_small_image_and_ragged_edges():
    s = RngStream(4).sampler()
    a, b = s.uniform(4 * 4), s.uniform(4 * 4)
    assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b, 4, 4), abs=1e-12)
    a, b = s.uniform(10 * 11), s.uniform(10 * 11)
    assert ssim(a, b, (10, 11)) == pytest.approx(_ssim_oracle(a, b, 10, 11), abs=1e-12)
    with pytest.raises(ValueError):
        ssim(a, b, (3, 3))


# -- operators -----------------------------------------------------------------


def test_noiseless_identity_returns_signal():
    x = np.array([0.1, 0.7, 0.3])
    assert np.array_equal(make_measurements(x, MeasurementOperator.identity(3), RngStream(0)), x)


def test_noise_energy_matches_level():
    # chi-square with 100 dof scaled by 1e-4: mean 0.01, relative sd of the 1e4-draw mean is 0.14%
    op = MeasurementOperator.gaussian(100, 5, RngStream(1), noise_level=0.1)
    x = np.zeros(5)
    s = RngStream(2).sampler()
    energy = [float(np.sum(make_measurements(x, op, s) ** 2)) for _ in range(10_000)]
    assert abs(np.mean(energy) - 0.01) < 0.03 * 0.01


def test_gaussian_operator_variance():
    op = MeasurementOperator.gaussian(50, 400, RngStream(3))
    assert abs(op.matrix.var() - 1 / 50) < 0.05 / 50


def test_mask_zeros_unobserved():
    mask = np.array([1, 0, 1, 0, 0, 1.0])
    op = MeasurementOperator.from_mask(mask, noise_level=0.3)
    y = make_measurements(np.ones(6), op, RngStream(4))
    assert np.all(y[mask == 0] == 0)
    assert np.all(y[mask == 1] != 1)
    with pytest.raises(ValueError):
        MeasurementOperator.from_mask([0, 0.5])


def test_operator_validation():
    with pytest.raises(ValueError):
        MeasurementOperator.identity(3, noise_level=-1)
    with pytest.raises(ValueError):
        make_measurements(np.zeros(4), MeasurementOperator.identity(3), RngStream(0))


# -- solver ----------------------------------------------------------------------


def test_lbfgs_quadratic():
    Q = np.diag([1.0, 10.0, 100.0])
    res = lbfgs(lambda x: (float(x @ Q @ x), 2 * Q @ x), np.ones(3), 200, 1e-6)
    assert res.status == "converged"
    assert np.max(np.abs(res.x)) < 1e-7
    # a tighter tolerance ends at the floating-point floor instead
    floor = lbfgs(lambda x: (float(x @ Q @ x), 2 * Q @ x), np.ones(3), 200, 1e-30)
    assert floor.status == "stalled" and floor.fun < 1e-20
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))


def test_lbfgs_rosenbrock():
    def f(v):
        x, y = v
        return (1 - x) ** 2 + 100 * (y - x * x) ** 2, np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])

    res = lbfgs(f, np.array([-1.2, 1.0]), 500, 1e-9)
    assert np.allclose(res.x, [1, 1], atol=1e-6)


def test_identity_denoise_is_exact():
    G = FlowStack.build(4, steps=2)
    y = np.array([0.2, 0.4, 0.6, 0.8])
    rep = solve(G, InverseProblemSpec(MeasurementOperator.identity(4), y), x_true=y)
    assert np.max(np.abs(rep.x_hat - y)) < 1e-8
    assert rep.psnr > 90
    assert np.array_equal(rep.x_hat, G.forward(rep.z_hat))


@pytest.mark.parametrize("seed", range(5))
def test_minimum_norm_recovery(seed):
    G = FlowStack.build(16, steps=2)
    op = MeasurementOperator.gaussian(8, 16, RngStream(seed))
    y = op.apply(RngStream(seed, 1).sampler().normal(16))
    rep = solve(G, InverseProblemSpec(op, y, max_iters=1000, tolerance=1e-12))
    assert rel_err(rep.z_hat, pseudo_solve(op.matrix, y)) < 1e-5
    assert np.linalg.norm(op.apply(rep.x_hat) - y) < 1e-6 * np.linalg.norm(y)
    assert all(b <= a for a, b in zip(rep.objective_trace, rep.objective_trace[1:]))


def test_init_strategies(random_stack):
    G = random_stack(4, seed=2, scale=0.1)
    x = np.array([0.1, 0.2, 0.3, 0.4])
    z = InitStrategy.from_image(x).latent(G, RngStream(0))
    assert np.max(np.abs(G.forward(z) - x)) < 1e-12
    g1 = InitStrategy.gaussian(0.5).latent(G, RngStream(1))
    g2 = InitStrategy.gaussian(0.5).latent(G, RngStream(1))
    assert np.array_equal(g1, g2) and np.any(g1 != 0)
    assert np.array_equal(InitStrategy.zero().latent(G, RngStream(0)), np.zeros(4))
    with pytest.raises(ValueError):
        InitStrategy.from_image(np.zeros(3)).latent(G, RngStream(0))
    with pytest.raises(ValueError):
        InitStrategy("warm")


def test_spec_validation():
    op = MeasurementOperator.identity(3)
    with pytest.raises(ValueError):
        InverseProblemSpec(op, np.zeros(2))
    with pytest.raises(ValueError):
        InverseProblemSpec(op, np.zeros(3), gamma=-0.1)


def test_all_ones_mask_equals_denoising(random_stack):
    G = random_stack(4, seed=3, scale=0.1)
    x = np.array([0.3, 0.5, 0.1, 0.9])
    reps = []
    for op in (MeasurementOperator.identity(4), MeasurementOperator.from_mask(np.ones(4))):
        y = make_measurements(x, op, RngStream(5))
        reps.append(solve(G, InverseProblemSpec(op, y, gamma=0.01, init=InitStrategy.gaussian(0.1), seed=2), x))
    a, b = reps
    assert np.array_equal(a.x_hat, b.x_hat) and np.array_equal(a.z_hat, b.z_hat)
    assert a.objective_trace == b.objective_trace and (a.psnr, a.ssim, a.iterations, a.status) == (b.psnr, b.ssim, b.iterations, b.status)


def test_trained_flow_denoises_in_distribution(gmm_trained):
    G, _ = gmm_trained
    X = make_toy_2d("gaussian-mixture-2", 30, 0.25, RngStream(2)).samples
    op = MeasurementOperator.identity(2, 0.3 * math.sqrt(2))
    table = gamma_sweep(G, X, [0.05], op, seed=3)
    noisy = np.mean([psnr(make_measurements(x, op, RngStream(3).child(i, 0x9015E)), x) for i, x in enumerate(X)])
    assert table.means()[0][1] > noisy


# -- sweeps ----------------------------------------------------------------------


def test_gamma_sweep_identity_noiseless_non_increasing():
    G = FlowStack.build(4, steps=2)
    X = RngStream(1).sampler().uniform((3, 4))
    table = gamma_sweep(G, X, [0.0, 0.01, 0.1, 1.0], MeasurementOperator.identity(4))
    means = [p for _, p, _ in table.means()]
    assert all(b <= a for a, b in zip(means, means[1:]))
    assert len(gamma_sweep(G, X[:1], [0.5], MeasurementOperator.identity(4)).cells) == 1


def test_sweep_csv_and_threads_invariance():
    G = FlowStack.build(4, steps=2)
    X = RngStream(1).sampler().uniform((3, 4))
    a = measurement_sweep(G, X, [2, 4], 0.05, seed=7, threads=1).to_csv()
    b = measurement_sweep(G, X, [2, 4], 0.05, seed=7, threads=4).to_csv()
    assert a == b
    lines = a.splitlines()
    assert lines[0] == "m_or_gamma,sample_id,seed,psnr_db,ssim,iters,status"
    assert len(lines) == 7 and lines[1].startswith("2,0,7,")


def test_measurement_sweep_full_rank_hits_cap():
    G = FlowStack.build(4, steps=2)
    X = RngStream(2).sampler().uniform((3, 4))
    table = measurement_sweep(G, X, [4], tolerance=1e-12)
    assert table.means()[0][1] > 90


def test_measurement_sweep_preconditions():
    G = FlowStack.build(4, steps=2)
    with pytest.raises(ValueError):
        measurement_sweep(G, np.zeros((1, 4)), [])
    with pytest.raises(ValueError):
        measurement_sweep(G, np.zeros((1, 4)), [5])


def test_failing_cell_is_marked_not_fatal():
    G = FlowStack.build(4, steps=2)
    X = RngStream(2).sampler().uniform((2, 4))
    init = InitStrategy.from_image(np.zeros(3))  # wrong length
    table = gamma_sweep(G, X, [0.0], MeasurementOperator.identity(4), init=init)
    assert all(c.status.startswith("error:") for c in table.cells)
    assert "," not in table.cells[0].status


# -- lasso -----------------------------------------------------------------------


def test_lasso_closed_form_example():
    res = lasso_cd(np.eye(3), [0.5, 0.004, -0.3], lam=0.01)
    assert np.allclose(res.z, [0.495, 0.0, -0.295], atol=1e-15)
    assert np.array_equal(lasso_cd(np.eye(3), np.zeros(3)).z, np.zeros(3))


def test_lasso_objective_monotone_and_locally_optimal():
    s = RngStream(5).sampler()
    D = s.normal((12, 16))
    y = s.normal(12)
    lam = 0.1
    res = lasso_cd(D, y, lam, max_cycles=5000, tol=1e-12)
    assert res.converged
    assert all(b <= a + 1e-12 for a, b in zip(res.objective, res.objective[1:]))
    obj = lambda z: float(np.sum((D @ z - y) ** 2) + lam * np.abs(z).sum())
    best = obj(res.z)
    for _ in range(100):
        assert best <= obj(res.z + 1e-3 * np.sign(s.uniform(16) - 0.5)) + 1e-12


def test_dct_basis_orthonormal():
    Phi = dct_basis((4, 5))
    assert np.max(np.abs(Phi.T @ Phi - np.eye(20))) < 1e-13
    # constant image is a single DC coefficient
    coeffs = Phi.T @ np.ones(20)
    assert coeffs[0] == pytest.approx(math.sqrt(20)) and np.max(np.abs(coeffs[1:])) < 1e-12


def test_lasso_dct_recovers_sparse_image():
    Phi = dct_basis((4, 4))
    z = np.zeros(16)
    z[[0, 1, 4]] = [2.0, 0.5, -0.4]
    x = Phi @ z
    A = MeasurementOperator.gaussian(12, 16, RngStream(8)).matrix
    x_hat, res = lasso_dct(A, A @ x, lam=1e-4, iters=5000, shape=(4, 4))
    assert psnr(x_hat, x) > 40


# -- perturbation ------------------------------------------------------------------


def test_perturbation_identity_is_isometric():
    G = FlowStack.build(5, steps=2)
    t = perturbation_sensitivity(G, np.zeros(5), np.ones(5), [0.0, 0.5, 2.0], RngStream(1), directions=30)
    assert np.allclose(t.natural, [0, 0.5, 2.0], atol=1e-12)
    assert np.allclose(t.random_mean, [0, 0.5, 2.0], atol=1e-12)
    assert np.all(t.random_std < 1e-12)
    with pytest.raises(ValueError):
        perturbation_sensitivity(G, np.ones(5), np.ones(5), [1.0], RngStream(1))


def test_perturbation_trained_has_both_curves(gmm_trained):
    G, _ = gmm_trained
    t = perturbation_sensitivity(G, np.zeros(2), np.array([1.0, 0.5]), [0, 0.1, 0.5], RngStream(2))
    rows = t.to_csv().splitlines()
    assert rows[0] == "alpha,natural,random_mean,random_std" and len(rows) == 4
    assert np.all(np.isfinite(t.natural)) and np.all(np.isfinite(t.random_mean))


# -- vector files -------------------------------------------------------------------


def test_vector_file_round_trip(tmp_path):
    v = np.array([1.5, -2.0, 3.25])
    p = tmp_path / "v.fpv"
    write_vector(p, v)
    raw = p.read_bytes()
    assert raw[:8] == b"FPVEC\x00\x00\x00" and int.from_bytes(raw[8:16], "little") == 3 and len(raw) == 16 + 24
    assert np.array_equal(read_vector(p), v)
    write_vector(p, np.arange(6.0))
    assert read_samples(p, 3).tolist() == [[0, 1, 2], [3, 4, 5]]
    with pytest.raises(VectorFileError):
        read_samples(p, 4)
    p.write_bytes(b"BADMAGIC" + raw[8:])
    with pytest.raises(VectorFileError):
        read_vector(p)
    p.write_bytes(raw[:-1])
    with pytest.raises(VectorFileError):
        read_vector(p)
