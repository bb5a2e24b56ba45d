"""Probabilistic fitting of one superquadric to the voxels around a VOI.

The fit is an EM loop.  The E-step assigns every voxel in the activation
band a posterior weight of being explained by the primitive (a Gaussian
around the primitive's own distance, against a uniform interior outlier
density).  The M-step solves a bounded, weighted nonlinear least-squares
problem on the truncated residuals and refreshes the Gaussian variance in
closed form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit

from .config import MarchingConfig
from .grid import VoxelGrid, primitive_block
from .superquadric import (EPS_MAX, EPS_MIN, Superquadric, approx_sdf, contains,
                           euler_zyx_to_matrix, sdf_and_jacobian, wrap_angle)

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_TINY = math.log(np.finfo(float).smallest_subnormal)


class SolverError(RuntimeError):
    """The least-squares update produced non-finite values."""

    def __init__(self, message: str, theta: Superquadric):
        super().__init__(message)
        self.theta = theta


@dataclass
class Band:
    """Voxels of the activation band with their cached quantities."""

    linear: np.ndarray
    points: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return int(self.linear.size)


@dataclass
class FittingState:
    theta: Superquadric
    sigma2: float
    p0: float
    band: Band
    weights: np.ndarray
    iteration: int = 0

    @property
    def active_set(self) -> np.ndarray:
        return self.band.linear

    @property
    def correspondences(self) -> np.ndarray:
        return self.weights

    @classmethod
    def start(cls, grid: VoxelGrid, theta: Superquadric, sigma2: float, p0: float,
              a_dist: float) -> "FittingState":
        """Band and posterior weights of ``theta`` on ``grid`` (one E-step)."""
        t = grid.truncation
        band = _band(grid, theta, a_dist)
        d_theta = np.clip(approx_sdf(theta, band.points), -t, t)
        weights = posterior(band.target, d_theta, sigma2, p0, t) if len(band) else np.empty(0)
        return cls(theta, sigma2, p0, band, np.atleast_1d(weights))


@dataclass(frozen=True)
class RemovalStats:
    n_plus: int
    n_minus: int
    n_zero: int


@dataclass
class FitResult:
    primitive: Superquadric
    converged: bool
    iterations: int
    degenerate: bool = False
    cost: float = math.nan
    sigma2: float = math.nan
    candidate: str = "base"
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# E-step pieces
# ---------------------------------------------------------------------------

def _band(grid: VoxelGrid, prim: Superquadric, a_dist: float) -> Band:
    sl, pts = primitive_block(grid, prim, a_dist)
    if pts.size == 0:
        return Band(np.empty(0, np.int64), np.empty((0, 3)), np.empty(0))
    act = grid.active[sl]
    pts = pts[act]
    d_theta = approx_sdf(prim, pts)
    keep = np.abs(d_theta) <= a_dist
    ijk = np.argwhere(act)[keep] + np.array([s.start for s in sl])
    lin = grid.linear_index(ijk)
    order = np.argsort(lin)
    return Band(lin[order], pts[keep][order], grid.values[tuple(ijk[order].T)])


def active_set(grid: VoxelGrid, theta_prev: Superquadric, a_dist: float) -> np.ndarray:
    """Linear indices of active voxels whose primitive distance lies in [-a, a]."""
    if not a_dist > 0:
        raise ValueError("activation distance must be positive")
    return _band(grid, theta_prev, a_dist).linear


def posterior(d_i, d_theta_i, sigma2: float, p0: float, t: float):
    """Posterior probability that each voxel is generated by the primitive.

    Non-negative target values are always attributed to the primitive.
    Interior values inside the truncation band compete against a uniform
    density ``1/t``.
    """
    if not sigma2 > 0 or not t > 0:
        raise ValueError("sigma2 and t must be positive")
    d_i = np.asarray(d_i, dtype=float)
    r = d_i - np.asarray(d_theta_i, dtype=float)
    log_inlier = math.log(p0) - 0.5 * (_LOG_2PI + math.log(sigma2)) - 0.5 * r * r / sigma2
    log_outlier = math.log1p(-p0) - math.log(t)
    uniform = (d_i >= -t) & (d_i < 0.0)
    # below -t only the Gaussian term remains; 0/0 after underflow counts as 0
    p = np.where(uniform, expit(log_inlier - log_outlier),
                 np.where((d_i >= 0.0) | (log_inlier > _LOG_TINY), 1.0, 0.0))
    return float(p) if p.ndim == 0 else p


def update_sigma2(weights, residuals, previous: Optional[float] = None) -> tuple[float, bool]:
    """Weighted mean squared residual; returns ``(sigma2, stagnated)``.

    With zero total weight the previous value is kept and the stagnation
    flag is raised.
    """
    w = np.asarray(weights, dtype=float)
    r = np.asarray(residuals, dtype=float)
    total = float(w.sum())
    if total <= 0.0:
        if previous is None:
            raise ValueError("zero total weight and no previous variance")
        return float(previous), True
    return float(np.dot(w, r * r) / total), False


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def _bounds(grid: VoxelGrid, t: float) -> tuple[np.ndarray, np.ndarray]:
    smin = 0.5 * grid.spacing
    smax = 1.5 * grid.diagonal
    lo = np.r_[EPS_MIN, EPS_MIN, [smin] * 3, [-np.inf] * 3, grid.origin - t]
    hi = np.r_[EPS_MAX, EPS_MAX, [smax] * 3, [np.inf] * 3, grid.upper + t]
    return lo, hi


def _clip_to_bounds(theta: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    theta = np.clip(theta, lo, hi)
    theta[5:8] = [wrap_angle(a) for a in theta[5:8]]
    return theta


def weighted_cost(theta, points, target, weights, t) -> float:
    """Weighted squared truncated residual, summed over the band."""
    d_theta = sdf_and_jacobian(np.asarray(theta, dtype=float), points)[0]
    r = np.clip(d_theta, -t, t) - np.clip(target, -t, t)
    return float(np.dot(weights, r * r))


def weighted_cost_gradient(theta, points, target, weights, t) -> np.ndarray:
    """Analytic gradient of :func:`weighted_cost`."""
    d_theta, jac = sdf_and_jacobian(np.asarray(theta, dtype=float), points)
    live = np.abs(d_theta) < t
    r = np.clip(d_theta, -t, t) - np.clip(target, -t, t)
    return 2.0 * (weights * r * live) @ jac


def _solve(theta0: np.ndarray, band: Band, weights: np.ndarray, t: float,
           lo: np.ndarray, hi: np.ndarray, max_nfev: int) -> tuple[np.ndarray, float, float]:
    keep = weights > 1e-12
    pts, target, sw = band.points[keep], np.clip(band.target[keep], -t, t), np.sqrt(weights[keep])

    def fun(th):
        d = sdf_and_jacobian(th, pts)[0]
        return sw * (np.clip(d, -t, t) - target)

    def jac(th):
        d, j = sdf_and_jacobian(th, pts)
        live = (np.abs(d) < t) * sw
        return j * live[:, None]

    r0 = fun(theta0)
    cost0 = 0.5 * float(r0 @ r0)
    if pts.shape[0] == 0 or cost0 == 0.0:
        return theta0, cost0, cost0
    res = least_squares(fun, theta0, jac=jac, bounds=(lo, hi), method="trf",
                        x_scale="jac", max_nfev=max_nfev, ftol=1e-10, xtol=1e-10, gtol=1e-12)
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.cost):
        raise SolverError("non-finite least-squares solution",
                          Superquadric.from_params(_clip_to_bounds(theta0.copy(), lo, hi)))
    if res.cost > cost0:
        return theta0, cost0, cost0
    return res.x, cost0, float(res.cost)


def update_primitive(grid: VoxelGrid, state: FittingState, t: float,
                     max_nfev: int = 30) -> Superquadric:
    """Weighted truncated least-squares update of the primitive (one M-step)."""
    if len(state.band) == 0:
        raise ValueError("empty activation band")
    lo, hi = _bounds(grid, t)
    theta0 = _clip_to_bounds(state.theta.params, lo, hi)
    theta, _, _ = _solve(theta0, state.band, state.weights, t, lo, hi, max_nfev)
    return Superquadric.from_params(_clip_to_bounds(np.array(theta), lo, hi))


# ---------------------------------------------------------------------------
# EM loop
# ---------------------------------------------------------------------------

def _normalized_change(a: np.ndarray, b: np.ndarray, diag: float) -> float:
    delta = np.empty(11)
    delta[0:2] = (a[0:2] - b[0:2]) / 2.0
    delta[2:5] = (a[2:5] - b[2:5]) / diag
    delta[5:8] = [wrap_angle(x - y) / math.pi for x, y in zip(a[5:8], b[5:8])]
    delta[8:11] = (a[8:11] - b[8:11]) / diag
    return float(np.max(np.abs(delta)))


def _em(grid: VoxelGrid, theta: Superquadric, cfg: MarchingConfig, max_iters: int,
        sigma2: Optional[float] = None) -> FitResult:
    t = grid.truncation
    a_dist = cfg.activation_ratio * t
    sigma2 = t if sigma2 is None else sigma2
    floor = (cfg.sigma2_floor_ratio * t) ** 2
    lo, hi = _bounds(grid, t)
    diag = max(grid.diagonal, grid.spacing)
    params = _clip_to_bounds(theta.params, lo, hi)
    history = [params.copy()]
    converged = degenerate = False
    cost = math.nan
    it = 0
    for it in range(1, max_iters + 1):
        prim = Superquadric.from_params(params)
        band = _band(grid, prim, a_dist)
        if len(band) == 0:
            degenerate = True
            break
        d_prev = np.clip(approx_sdf(prim, band.points), -t, t)
        weights = posterior(band.target, d_prev, sigma2, cfg.p0, t)
        new, _, cost = _solve(params, band, weights, t, lo, hi, cfg.lsq_max_nfev)
        new = _clip_to_bounds(np.array(new), lo, hi)
        d_new = np.clip(sdf_and_jacobian(new, band.points)[0], -t, t)
        resid = band.target - d_new
        sigma2, _ = update_sigma2(weights, resid, sigma2)
        sigma2 = max(sigma2, floor)
        change = _normalized_change(new, params, diag)
        params = new
        history.append(params.copy())
        if change < cfg.rel_tol:
            converged = True
            break
    prim = Superquadric.from_params(params)
    if not degenerate and _encloses_no_voxel(grid, prim):
        degenerate = True
    return FitResult(prim, converged, it, degenerate, cost, sigma2, history=history)


def _encloses_no_voxel(grid: VoxelGrid, prim: Superquadric) -> bool:
    sl, pts = primitive_block(grid, prim)
    return pts.size == 0 or not np.any(contains(prim, pts.reshape(-1, 3)))


# axis relabelling: body-frame map p_old = Q @ p_new
_SWAPS = {
    # new z <- old x
    "x": (np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]), (2, 1, 0)),
    # new z <- old y
    "y": (np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]), (0, 2, 1)),
}


def swap_axis(prim: Superquadric, axis: str) -> Superquadric:
    """Alternative starting point obtained by relabelling body axes.

    ``"x"`` and ``"y"`` turn that axis into the body z axis, permuting the
    scales and exchanging the two exponents.  ``"z45"`` turns the primitive
    by 45 degrees about its z axis and mirrors ``eps2`` around 1, which maps
    square-like cross sections onto diamond-like ones and back.  None of
    these is an identical shape in general.
    """
    if axis == "z45":
        rot = prim.rotation @ euler_zyx_to_matrix((math.pi / 4, 0.0, 0.0))
        ax, ay, az = prim.scale
        mean = 0.5 * (ax + ay)
        m = mean / math.sqrt(2.0) if prim.eps2 > 1.0 else mean * math.sqrt(2.0)
        if prim.eps2 == 1.0:
            m = mean
        eps2 = min(max(2.0 - prim.eps2, EPS_MIN), EPS_MAX)
        return Superquadric.from_rotation(prim.eps1, eps2, (m, m, az), rot,
                                          prim.translation)
    q, perm = _SWAPS[axis]
    scale = np.asarray(prim.scale)[list(perm)]
    return Superquadric.from_rotation(prim.eps2, prim.eps1, scale, prim.rotation @ q,
                                      prim.translation)


def marginal_nll(grid: VoxelGrid, prim: Superquadric, linear: np.ndarray,
                 sigma2: float, p0: float) -> float:
    """Negative log-likelihood of the target values under the mixture model."""
    t = grid.truncation
    ijk = grid.unravel(linear)
    target = grid.values[tuple(ijk.T)]
    d = np.clip(approx_sdf(prim, grid.world(ijk)), -t, t)
    r = target - d
    log_in = math.log(p0) - 0.5 * (_LOG_2PI + math.log(sigma2)) - 0.5 * r * r / sigma2
    uniform = (target >= -t) & (target < 0.0)
    log_out = np.where(uniform, math.log1p(-p0) - math.log(t), -np.inf)
    return float(-np.sum(np.logaddexp(log_in, log_out)))


def _best_candidate(grid: VoxelGrid, candidates: list[FitResult],
                    config: MarchingConfig) -> int:
    a_dist = config.activation_ratio * grid.truncation
    union = np.unique(np.concatenate([_band(grid, c.primitive, a_dist).linear
                                      for c in candidates]))
    sigma2 = max(candidates[0].sigma2, (config.sigma2_floor_ratio * grid.truncation) ** 2)
    scores = [marginal_nll(grid, c.primitive, union, sigma2, config.p0) for c in candidates]
    log.debug("restart scores %s", scores)
    return int(np.argmin(scores))


def fit(grid: VoxelGrid, theta_init: Superquadric, config: MarchingConfig) -> FitResult:
    """Fit one primitive starting from ``theta_init``.

    After the main EM loop, every configured relabelling of the current
    result is re-fitted for a few iterations.  The candidate with the lowest
    mixture negative log-likelihood (shared variance, union of the bands)
    wins; this repeats for up to ``restart_rounds`` rounds while a
    relabelled candidate keeps winning.
    """
    if not math.isfinite(grid.truncation):
        raise ValueError("grid must be truncated before fitting")
    current = _em(grid, theta_init, config, config.max_iters)
    if current.degenerate or not config.restart_axes or config.restart_iters == 0:
        return current
    total_iters = current.iterations
    for _ in range(config.restart_rounds):
        candidates = [current]
        for axis in config.restart_axes:
            res = _em(grid, swap_axis(current.primitive, axis), config, config.restart_iters)
            total_iters += res.iterations
            if not res.degenerate:
                res.candidate = f"{current.candidate}>{axis}"
                res.history = current.history + res.history
                candidates.append(res)
        best = _best_candidate(grid, candidates, config) if len(candidates) > 1 else 0
        if best == 0:
            break
        current = candidates[best]
    current.iterations = total_iters
    return current


# ---------------------------------------------------------------------------
# Removal
# ---------------------------------------------------------------------------

def removal_stats(grid: VoxelGrid, theta: Superquadric) -> RemovalStats:
    """Count exterior, interior and inactive voxels enclosed by the primitive."""
    sl, pts = primitive_block(grid, theta)
    if pts.size == 0:
        return RemovalStats(0, 0, 0)
    inside = contains(theta, pts.reshape(-1, 3)).reshape(pts.shape[:3])
    act = grid.active[sl]
    vals = grid.values[sl]
    return RemovalStats(
        n_plus=int(np.sum(inside & act & (vals > 0.0))),
        n_minus=int(np.sum(inside & act & (vals <= 0.0))),
        n_zero=int(np.sum(inside & ~act)),
    )


def should_remove(stats: RemovalStats) -> bool:
    if stats.n_minus < 1:
        return True
    total = stats.n_plus + stats.n_minus + stats.n_zero
    return stats.n_plus / total >= 0.5
