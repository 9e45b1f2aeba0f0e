"""Transfer-matrix calibration and regularized linear inversion."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .optics import TransferOperator


class NonlinearityError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class CalibratedMatrix:
    matrix: np.ndarray
    scene_dims: tuple[int, int]
    sensor_dims: tuple[int, int]
    source: str = "PROBED"

    def __post_init__(self):
        rows, cols = self.matrix.shape
        if self.scene_dims[0] * self.scene_dims[1] != cols:
            raise ValueError(f"scene dims {self.scene_dims} inconsistent with {cols} columns")
        if self.sensor_dims[0] * self.sensor_dims[1] != rows:
            raise ValueError(f"sensor dims {self.sensor_dims} inconsistent with {rows} rows")
        if not np.isfinite(self.matrix).all():
            raise ValueError("calibrated matrix has non-finite entries")
        if self.source not in ("PROBED", "LOADED"):
            raise ValueError(f"bad source {self.source}")

    @classmethod
    def from_operator(cls, op: TransferOperator) -> "CalibratedMatrix":
        return cls(np.asarray(op.matrix, dtype=np.float64), tuple(op.scene_shape), tuple(op.sensor_shape), "LOADED")

    def to_operator(self, depth_index: int = 0, seed: int = 0, config_digest: int = 0) -> TransferOperator:
        return TransferOperator(self.matrix.copy(), depth_index, seed, config_digest,
                                scene_shape=self.scene_dims, sensor_shape=self.sensor_dims)


@dataclass(frozen=True)
class SolverParams:
    lam: float = 1e-3
    max_cg_iters: int = 500
    cg_tol: float = 1e-8
    tsvd_rank: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be > 0")
        if self.max_cg_iters < 1:
            raise ValueError("max_cg_iters must be >= 1")


def calibrate(forward_fn: Callable[[np.ndarray], np.ndarray], scene_dims, verify: bool = False,
              verify_tol: float = 1e-9) -> CalibratedMatrix:
    """Probe ``forward_fn`` with every single-pixel impulse.

    With ``verify`` each column is re-probed at twice the amplitude and
    checked against superposition, which catches biased or nonlinear maps.
    """
    h, w = scene_dims
    cols = []
    out_shape = None
    for k in range(h * w):
        impulse = np.zeros((h, w))
        impulse.flat[k] = 1.0
        resp = np.asarray(forward_fn(impulse), dtype=np.float64)
        resp2d = resp.reshape(resp.shape[-2:]) if resp.ndim >= 2 else resp
        if out_shape is None:
            out_shape = resp2d.shape
        elif resp2d.shape != out_shape:
            raise ValueError(f"probe {k} returned shape {resp2d.shape}, earlier probes {out_shape}")
        col = resp2d.ravel()
        if verify:
            double = np.asarray(forward_fn(2.0 * impulse), dtype=np.float64).ravel()
            err = np.max(np.abs(double - 2.0 * col))
            if err > verify_tol * max(1.0, np.max(np.abs(col))):
                raise NonlinearityError(f"superposition fails at pixel {k}: |f(2e) - 2 f(e)| = {err:.3g}")
        cols.append(col)
    if len(out_shape) == 1:
        side = math.isqrt(out_shape[0])
        out_shape = (side, out_shape[0] // side)
    return CalibratedMatrix(np.stack(cols, axis=1), (h, w), tuple(out_shape), "PROBED")


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residual: float  # ||(A^T A + lam I) x - A^T y|| / ||A^T y||
    converged: bool
    normal_residuals: list[float] = field(default_factory=list)
    ls_residuals: list[float] = field(default_factory=list)

    def clamped(self) -> np.ndarray:
        return np.clip(self.x, 0.0, 1.0)


def _as_matrix(A) -> np.ndarray:
    return A.matrix if isinstance(A, (CalibratedMatrix, TransferOperator)) else np.asarray(A, dtype=np.float64)


def tikhonov_solve(A, y, params: SolverParams = SolverParams()) -> SolveResult:
    """argmin ||Ax - y||^2 + lam ||x||^2 by conjugate gradients on the normal equations.

    Run in CGLS form.  ``normal_residuals`` track ||A^T(y - Ax) - lam x||;
    ``ls_residuals`` track sqrt(||Ax - y||^2 + lam ||x||^2), which CG
    decreases monotonically.
    """
    M = _as_matrix(A)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != M.shape[0]:
        raise ValueError(f"y has {y.shape[0]} values, matrix has {M.shape[0]} rows")
    lam = params.lam
    x = np.zeros(M.shape[1])
    r = y.copy()
    s = M.T @ r
    norm_aty = float(np.linalg.norm(s))
    if norm_aty == 0.0:
        return SolveResult(x, 0, 0.0, True, [0.0], [float(np.linalg.norm(y))])
    p = s.copy()
    gamma = float(s @ s)
    hist_n = [math.sqrt(gamma)]
    hist_ls = [float(np.linalg.norm(r))]
    best_x, best_res = x.copy(), hist_n[0]
    converged = False
    it = 0
    for it in range(1, params.max_cg_iters + 1):
        q = M @ p
        delta = float(q @ q) + lam * float(p @ p)
        if delta <= 0.0:
            break
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * q
        s = M.T @ r - lam * x
        gamma_new = float(s @ s)
        hist_n.append(math.sqrt(gamma_new))
        hist_ls.append(math.sqrt(float(r @ r) + lam * float(x @ x)))
        if hist_n[-1] < best_res:
            best_x, best_res = x.copy(), hist_n[-1]
        if hist_n[-1] <= params.cg_tol * norm_aty:
            converged = True
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    if not converged:
        warnings.warn(
            f"CG stopped after {it} iterations at relative residual {best_res / norm_aty:.3e}",
            ConvergenceWarning, stacklevel=2,
        )
        x = best_x
    return SolveResult(x, it, (hist_n[-1] if converged else best_res) / norm_aty, converged, hist_n, hist_ls)


def jacobi_svd(A: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Pairs are visited in round-robin tournament order so each step rotates
    ``n/2`` disjoint column pairs at once.  Returns ``U, s, Vt`` with ``s``
    in descending order.
    """
    A = np.asarray(A, dtype=np.float64)
    m, n = A.shape
    if m < n:
        U, s, Vt = jacobi_svd(A.T, tol, max_sweeps)
        return Vt.T, s, U.T
    R_factor = None
    if m > n:
        # rotate the small triangular factor instead of the tall matrix
        Q, R_factor = np.linalg.qr(A)
        work = R_factor
    else:
        work = A
    Wt = np.ascontiguousarray(work.T)  # row i holds column i
    Vt = np.eye(n)
    npad = n + (n % 2)
    players = np.arange(npad)
    for _ in range(max_sweeps):
        rotated = False
        for _round in range(npad - 1):
            I = players[: npad // 2]
            J = players[npad // 2:][::-1]
            keep = (I < n) & (J < n)
            I, J = I[keep], J[keep]
            wi, wj = Wt[I], Wt[J]
            alpha = np.einsum("ij,ij->i", wi, wi)
            beta = np.einsum("ij,ij->i", wj, wj)
            gamma = np.einsum("ij,ij->i", wi, wj)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if act.any():
                rotated = True
                I, J = I[act], J[act]
                a, b, g = alpha[act], beta[act], gamma[act]
                zeta = (b - a) / (2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t[zeta == 0] = 1.0
                c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
                sn = c * t[:, None]
                for X in (Wt, Vt):
                    xi, xj = X[I], X[J]
                    X[I] = c * xi - sn * xj
                    X[J] = sn * xi + c * xj
            # rotate tournament: first player fixed
            players = np.concatenate(([players[0]], [players[-1]], players[1:-1]))
        if not rotated:
            break
    s = np.linalg.norm(Wt, axis=1)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    V = Vt[order].T
    W = Wt[order].T
    U = np.zeros_like(W)
    nz = s > 0
    U[:, nz] = W[:, nz] / s[nz]
    if R_factor is not None:
        U = Q @ U
    return U, s, V.T


_SVD_CACHE: dict[int, tuple] = {}


def _svd_of(A):
    key = id(A)
    if isinstance(A, CalibratedMatrix) and key in _SVD_CACHE and _SVD_CACHE[key][0] is A:
        return _SVD_CACHE[key][1]
    svd = jacobi_svd(_as_matrix(A))
    if isinstance(A, CalibratedMatrix):
        _SVD_CACHE[key] = (A, svd)
    return svd


def tsvd_solve(A, y, k: int) -> np.ndarray:
    """Truncated-SVD solution keeping the ``k`` largest singular triplets."""
    M = _as_matrix(A)
    if not 1 <= k <= min(M.shape):
        raise ValueError(f"rank {k} outside [1, {min(M.shape)}]")
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != M.shape[0]:
        raise ValueError(f"y has {y.shape[0]} values, matrix has {M.shape[0]} rows")
    U, s, Vt = _svd_of(A)
    if s[k - 1] == 0.0:
        raise ValueError(f"rank {k} includes a zero singular value")
    coef = (U[:, :k].T @ y) / s[:k]
    return Vt[:k].T @ coef


@dataclass
class ConditionEstimate:
    sigma_max: float
    sigma_min: float
    ratio: float
    max_rel_change: float  # last-iteration relative change of the two estimates
    min_rel_change: float


def estimate_condition(A, power_iters: int = 50, shift: float | None = None, seed: int = 0) -> ConditionEstimate:
    """Extreme singular values by power iteration and shifted inverse iteration on A^T A."""
    if power_iters < 10:
        raise ValueError("power_iters must be >= 10")
    M = _as_matrix(A)
    n = M.shape[1]
    from .rng import SplitMix64

    v = SplitMix64(seed).normal_array(n)
    v /= np.linalg.norm(v)
    lam_max = prev = 0.0
    for _ in range(power_iters):
        w = M.T @ (M @ v)
        prev, lam_max = lam_max, float(v @ w)
        v = w / np.linalg.norm(w)
    max_change = abs(lam_max - prev) / lam_max if lam_max else 0.0
    mu = lam_max * 1e-12 if shift is None else shift
    G = M.T @ M + mu * np.eye(n)
    chol = np.linalg.cholesky(G)
    u = SplitMix64(seed + 1).normal_array(n)
    u /= np.linalg.norm(u)
    lam_min = prev = 0.0
    for _ in range(power_iters):
        z = np.linalg.solve(chol.T, np.linalg.solve(chol, u))
        u = z / np.linalg.norm(z)
        prev, lam_min = lam_min, float(u @ (M.T @ (M @ u)))
    min_change = abs(lam_min - prev) / lam_min if lam_min > 0 else float("inf")
    s_max = math.sqrt(max(lam_max, 0.0))
    s_min = math.sqrt(max(lam_min, 0.0))
    ratio = s_max / s_min if s_min > 0 else float("inf")
    return ConditionEstimate(s_max, s_min, ratio, max_change, min_change)
