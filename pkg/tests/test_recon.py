import numpy as np
import pytest

from deepdot.errors import DegenerateInput, InvalidArgument
from deepdot.forward import ForwardModel, OpticalMedium
from deepdot.geometry import Inclusion, Phantom, build_grid, grid_probe_layout, rasterize
from deepdot.recon import (
    LMConfig,
    SparseConfig,
    gram_diagonal,
    lambda_rule,
    lm_reconstruct,
    mm_sparse_reconstruct,
    mm_sparse_solve,
    weighted_ridge,
)


def test_lambda_rule_examples():
    assert lambda_rule(np.eye(5), 10) == 10
    assert lambda_rule(np.diag([1.0, 2.0]), 1) == 4
    J = np.random.default_rng(0).normal(size=(4, 6)) + 1j
    assert lambda_rule(J, 6.0) == pytest.approx(3 * lambda_rule(J, 2.0))
    np.testing.assert_allclose(gram_diagonal(J), np.real(np.diag(J.conj().T @ J)))
    with pytest.raises(DegenerateInput):
        lambda_rule(np.zeros((3, 3)), 1.0)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        LMConfig(lambda_constant=0)
    with pytest.raises(InvalidArgument):
        SparseConfig(p=3)
    with pytest.raises(InvalidArgument):
        SparseConfig(cooling_factor=1.0)


def test_weighted_ridge_matches_dense():
    rng = np.random.default_rng(1)
    J = rng.normal(size=(6, 10)) + 1j * rng.normal(size=(6, 10))
    y = rng.normal(size=6) + 1j * rng.normal(size=6)
    w = rng.uniform(0.5, 2.0, 10)
    A = np.real(J.conj().T @ J) + 0.3 * np.diag(w)
    ref = np.linalg.solve(A, np.real(J.conj().T @ y))
    np.testing.assert_allclose(weighted_ridge(J, y, 0.3, w), ref, rtol=1e-10, atol=1e-12)


def test_mm_p2_is_ridge():
    rng = np.random.default_rng(2)
    J = rng.normal(size=(8, 10))
    y = rng.normal(size=8)
    lam = 0.7
    ref = np.linalg.solve(J.T @ J + lam * np.eye(10), J.T @ y)
    x = mm_sparse_solve(J, y, lam, p=2, epsilon=0.0, nonnegative=False)
    assert np.abs(x - ref).max() < 1e-8


def test_mm_p2_square_unregularized_inverts():
    rng = np.random.default_rng(3)
    J = rng.normal(size=(7, 7)) + 3 * np.eye(7)
    y = rng.normal(size=7)
    x = mm_sparse_solve(J, y, 0.0, p=2, epsilon=0.0, nonnegative=False)
    np.testing.assert_allclose(x, np.linalg.solve(J, y), atol=1e-10)


def test_mm_large_lambda_vanishes():
    rng = np.random.default_rng(4)
    J, y = rng.normal(size=(5, 12)), rng.normal(size=5)
    for p in (1, 2):
        assert np.abs(mm_sparse_solve(J, y, 1e12, p=p)).max() < 1e-9


def test_mm_nonnegative_and_permutation_equivariant():
    rng = np.random.default_rng(5)
    J, y = rng.normal(size=(6, 9)), rng.normal(size=6)
    perm = rng.permutation(9)
    x = mm_sparse_solve(J, y, 0.5, p=1)
    assert x.min() >= 0
    xp = mm_sparse_solve(J[:, perm], y, 0.5, p=1)
    np.testing.assert_allclose(xp, x[perm], atol=1e-10)


def test_mm_l1_sparser_than_l2():
    rng = np.random.default_rng(6)
    J = rng.normal(size=(15, 40))
    truth = np.zeros(40)
    truth[[3, 17]] = [1.0, 2.0]
    y = J @ truth
    x1 = mm_sparse_solve(J, y, 0.5, p=1, inner_iterations=30)
    x2 = mm_sparse_solve(J, y, 0.5, p=2)
    assert np.count_nonzero(x1 > 0.1 * x1.max()) <= np.count_nonzero(x2 > 0.1 * x2.max())


@pytest.fixture(scope="module")
def small_problem():
    g = build_grid(12, 12, 6, 2.5)
    cfg = grid_probe_layout(g, 3, 3, 4, 4)
    med = OpticalMedium.homogeneous(g, 0.002, 1.0)
    dm = rasterize(Phantom((Inclusion((15.0, 15.0, 7.5), 5.0, 4.0),)), g)
    data = ForwardModel(med, cfg).scattered(dm)
    return g, cfg, med, dm, data


def test_lm_zero_data(small_problem):
    g, cfg, med, _, _ = small_problem
    res = lm_reconstruct(np.zeros(cfg.n_sources * cfg.n_detectors), med, cfg)
    assert not np.any(res.delta_mu.values)
    assert res.residual_history[0] == 0


def test_lm_properties(small_problem):
    g, cfg, med, dm, data = small_problem
    res = lm_reconstruct(data, med, cfg, LMConfig(max_outer_iterations=8))
    assert res.residual_history
    best = np.minimum.accumulate(res.residual_history)
    assert np.all(np.diff(best) <= 0)
    assert res.residual_history[-1] < res.residual_history[0]
    assert res.delta_mu.values.min() >= 0
    c = g.centers()
    x = res.delta_mu.values
    centroid = (c * x[:, None]).sum(0) / x.sum()
    assert np.linalg.norm(centroid - [15.0, 15.0, 7.5]) < 2.5


def test_mm_reconstruct(small_problem):
    g, cfg, med, dm, data = small_problem
    res = mm_sparse_reconstruct(data, med, cfg, SparseConfig(p=1, stages=3, inner_iterations=5))
    assert res.delta_mu.values.min() >= 0
    assert min(res.residual_history) < res.residual_history[0]
