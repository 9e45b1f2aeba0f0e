import warnings

import numpy as np
import pytest

from cannulacam.linear_recon import (
    CalibratedMatrix,
    ConvergenceWarning,
    NonlinearityError,
    SolverParams,
    calibrate,
    estimate_condition,
    jacobi_svd,
    tikhonov_solve,
    tsvd_solve,
)
from cannulacam.optics import OpticalConfig, build_operator, forward
from oracles import dense_normal_solve

SMALL = OpticalConfig(scene_h=8, scene_w=8, sensor_h=10, sensor_w=10)


def test_calibrate_identity():
    cfg = OpticalConfig(scene_h=8, scene_w=8, sensor_h=8, sensor_w=8, identity_mode=True)
    op = build_operator(cfg, 2)
    cal = calibrate(lambda s: forward(op, s), (8, 8))
    assert np.array_equal(cal.matrix, np.eye(64))
    assert cal.source == "PROBED" and cal.sensor_dims == (8, 8)


def test_calibrate_reproduces_operator():
    op = build_operator(SMALL, 1)
    cal = calibrate(lambda s: forward(op, s), (8, 8), verify=True)
    assert np.max(np.abs(cal.matrix - op.matrix)) < 1e-6


def test_calibrate_flags_bias():
    op = build_operator(SMALL, 1)
    with pytest.raises(NonlinearityError):
        calibrate(lambda s: forward(op, s) + 0.01, (8, 8), verify=True)


def test_calibrate_inconsistent_output():
    calls = iter(range(100))
    with pytest.raises(ValueError):
        calibrate(lambda s: np.zeros((4, 4)) if next(calls) == 0 else np.zeros((5, 5)), (2, 2))


def test_identity_inversion(rng):
    y = rng.random(16)
    res = tikhonov_solve(np.eye(16), y, SolverParams(lam=0.0))
    assert np.allclose(res.x, y, atol=1e-12) and res.converged


def test_scalar_system():
    res = tikhonov_solve(np.array([[2.0]]), np.array([4.0]), SolverParams(lam=2.0))
    assert res.x[0] == pytest.approx(8.0 / 6.0, abs=1e-12)


def test_huge_lambda(rng):
    A = rng.random((20, 10))
    y = rng.random(20)
    res = tikhonov_solve(A, y, SolverParams(lam=1e12))
    assert np.linalg.norm(res.x) < 1e-9 * np.linalg.norm(A.T @ y)


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_normal_equations(seed):
    r = np.random.default_rng(seed)
    A = r.random((80, 64))
    y = r.random(80)
    res = tikhonov_solve(A, y, SolverParams(lam=1e-3, cg_tol=1e-12, max_cg_iters=2000))
    assert np.max(np.abs(res.x - dense_normal_solve(A, y, 1e-3))) < 1e-6


def test_residuals_monotone_and_optimality(rng):
    op = build_operator(SMALL, 2)
    x = rng.random(64)
    y = op.matrix @ x
    p = SolverParams(lam=1e-3)
    res = tikhonov_solve(CalibratedMatrix.from_operator(op), y, p)
    assert res.converged
    assert np.all(np.diff(res.ls_residuals) <= 1e-12)
    A = op.matrix
    normal = np.linalg.norm(A.T @ A @ res.x + p.lam * res.x - A.T @ y)
    assert normal <= p.cg_tol * np.linalg.norm(A.T @ y)


def test_nonconvergence_is_flagged(rng):
    A = rng.random((50, 40))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = tikhonov_solve(A, rng.random(50), SolverParams(lam=1e-9, max_cg_iters=2, cg_tol=1e-14))
    assert not res.converged and np.isfinite(res.residual)
    assert any(issubclass(x.category, ConvergenceWarning) for x in w)


def test_clamp_is_separate(rng):
    res = tikhonov_solve(np.eye(4), np.array([-1.0, 0.5, 2.0, 0.2]), SolverParams(lam=0.0))
    assert res.x.min() < 0
    assert np.array_equal(res.clamped(), np.array([0.0, 0.5, 1.0, 0.2]))


def test_solver_params_validation():
    with pytest.raises(ValueError):
        SolverParams(lam=-1)
    with pytest.raises(ValueError):
        SolverParams(cg_tol=0)


def test_sensor_size_mismatch():
    with pytest.raises(ValueError):
        tikhonov_solve(np.eye(4), np.ones(5))


# -- SVD paths --------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(6, 6), (12, 5), (5, 9), (40, 30)])
def test_jacobi_svd_matches_numpy(shape, rng):
    A = rng.standard_normal(shape)
    U, s, Vt = jacobi_svd(A)
    assert np.allclose(s, np.linalg.svd(A, compute_uv=False), atol=1e-10)
    assert np.allclose((U * s) @ Vt, A, atol=1e-10)


def test_tsvd_orthogonal_full_rank(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    x = rng.random(10)
    assert np.max(np.abs(tsvd_solve(Q, Q @ x, 10) - x)) < 1e-8


def test_tsvd_hand_diagonal():
    assert np.allclose(tsvd_solve(np.diag([3.0, 1.0]), np.array([3.0, 1.0]), 1), [1.0, 0.0])


@pytest.mark.parametrize("k", [0, 3])
def test_tsvd_rank_out_of_range(k):
    with pytest.raises(ValueError):
        tsvd_solve(np.eye(2), np.ones(2), k)


# -- conditioning ------------------------------------------------------------------

def test_condition_identity():
    est = estimate_condition(np.eye(20))
    assert est.ratio == pytest.approx(1.0, abs=1e-6)


def test_condition_diagonal():
    est = estimate_condition(np.diag([10.0, 0.1]))
    assert est.ratio == pytest.approx(100.0, rel=0.01)


def test_condition_power_iters_minimum():
    with pytest.raises(ValueError):
        estimate_condition(np.eye(3), power_iters=5)


def test_default_operator_is_ill_conditioned():
    A = build_operator(OpticalConfig(), 2).matrix
    est = estimate_condition(A)
    s = np.linalg.svd(A, compute_uv=False)
    assert est.ratio > 10 and s[0] / s[-1] > 10
    assert est.sigma_max == pytest.approx(s[0], rel=1e-3)
