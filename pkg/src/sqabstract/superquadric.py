"""Superquadric primitive: implicit function, radial signed distance, sampling.

A primitive is parameterised by 11 numbers::

    [eps1, eps2, ax, ay, az, yaw, pitch, roll, tx, ty, tz]

with the rotation given as intrinsic Z-Y-X Euler angles, i.e.
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.  A world point ``x`` maps to the
body frame through ``p = R.T @ (x - t)``.

All evaluation routines accept a single point of shape ``(3,)`` or a batch of
shape ``(n, 3)``.  Fractional powers are evaluated in log space on absolute
values, so exponents close to ``EPS_MIN`` and points far from a tiny
primitive do not overflow.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPS_MIN = 0.05
EPS_MAX = 2.0
CENTER_RADIUS = 1e-12

PARAM_NAMES = (
    "eps1", "eps2", "ax", "ay", "az", "yaw", "pitch", "roll", "tx", "ty", "tz",
)


class InvalidPrimitive(ValueError):
    """Raised when superquadric parameters violate the shape constraints."""


def euler_zyx_to_matrix(angles: Sequence[float]) -> np.ndarray:
    a, b, c = (float(v) for v in angles)
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]])
    return rz @ ry @ rx


def _euler_zyx_derivatives(angles: Sequence[float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of the Z-Y-X rotation matrix w.r.t. each angle."""
    a, b, c = (float(v) for v in angles)
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]])
    drz = np.array([[-sa, -ca, 0.0], [ca, -sa, 0.0], [0.0, 0.0, 0.0]])
    dry = np.array([[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sc, -cc], [0.0, cc, -sc]])
    return drz @ ry @ rx, rz @ dry @ rx, rz @ ry @ drx


def matrix_to_euler_zyx(rot: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_zyx_to_matrix` (pitch in [-pi/2, pi/2])."""
    rot = np.asarray(rot, dtype=float)
    sb = -rot[2, 0]
    sb = min(1.0, max(-1.0, sb))
    pitch = math.asin(sb)
    if abs(sb) < 1.0 - 1e-12:
        yaw = math.atan2(rot[1, 0], rot[0, 0])
        roll = math.atan2(rot[2, 1], rot[2, 2])
    else:
        # gimbal lock: fold everything into yaw
        roll = 0.0
        yaw = math.atan2(-rot[0, 1], rot[1, 1])
    return yaw, pitch, roll


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Superquadric:
    eps1: float
    eps2: float
    scale: tuple[float, float, float]
    euler_zyx: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    _rot: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "eps1", float(self.eps1))
        object.__setattr__(self, "eps2", float(self.eps2))
        for name in ("scale", "euler_zyx", "translation"):
            val = tuple(float(v) for v in np.asarray(getattr(self, name), dtype=float).ravel())
            if len(val) != 3:
                raise InvalidPrimitive(f"{name} must have 3 components, got {len(val)}")
            object.__setattr__(self, name, val)
        values = (self.eps1, self.eps2) + self.scale + self.euler_zyx + self.translation
        if not all(math.isfinite(v) for v in values):
            raise InvalidPrimitive("non-finite superquadric parameter")
        for e in (self.eps1, self.eps2):
            if not (EPS_MIN - 1e-12 <= e <= EPS_MAX + 1e-12):
                raise InvalidPrimitive(f"shape exponent {e} outside [{EPS_MIN}, {EPS_MAX}]")
        if min(self.scale) <= 0.0:
            raise InvalidPrimitive(f"scales must be positive, got {self.scale}")
        object.__setattr__(self, "_rot", euler_zyx_to_matrix(self.euler_zyx))

    @property
    def rotation(self) -> np.ndarray:
        return self._rot.copy()

    @property
    def center(self) -> np.ndarray:
        return np.array(self.translation)

    @property
    def params(self) -> np.ndarray:
        return np.array((self.eps1, self.eps2) + self.scale + self.euler_zyx + self.translation)

    @classmethod
    def from_params(cls, theta: Sequence[float]) -> "Superquadric":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (11,):
            raise InvalidPrimitive(f"expected 11 parameters, got shape {theta.shape}")
        return cls(theta[0], theta[1], theta[2:5], theta[5:8], theta[8:11])

    @classmethod
    def from_rotation(cls, eps1, eps2, scale, rotation, translation) -> "Superquadric":
        return cls(eps1, eps2, scale, matrix_to_euler_zyx(rotation), translation)

    def bounding_radius(self) -> float:
        """Radius of a ball around the center that encloses the primitive."""
        # convex superquadrics (eps <= 2) lie inside their scale box
        return float(np.linalg.norm(self.scale))

    def to_body(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - np.asarray(self.translation)) @ self._rot

    def to_world(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self._rot.T + np.asarray(self.translation)

    def to_dict(self) -> dict:
        return {
            "eps": [self.eps1, self.eps2],
            "scale": list(self.scale),
            "euler_zyx": list(self.euler_zyx),
            "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Superquadric":
        try:
            eps = record["eps"]
            if len(eps) != 2:
                raise InvalidPrimitive("'eps' must hold two exponents")
            return cls(eps[0], eps[1], record["scale"],
                       record.get("euler_zyx", (0.0, 0.0, 0.0)), record["translation"])
        except (KeyError, TypeError) as exc:
            raise InvalidPrimitive(f"malformed primitive record: {exc}") from exc


# ---------------------------------------------------------------------------
# JSON records
# ---------------------------------------------------------------------------

def dumps_primitives(prims: Iterable[Superquadric]) -> str:
    return json.dumps([p.to_dict() for p in prims], indent=1)


def save_primitives(prims: Iterable[Superquadric], path) -> None:
    Path(path).write_text(dumps_primitives(prims) + "\n")


def load_primitives(path) -> list[Superquadric]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidPrimitive(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise InvalidPrimitive(f"{path}: expected a JSON array of primitive records")
    return [Superquadric.from_dict(r) for r in data]


# ---------------------------------------------------------------------------
# Evaluation kernels
# ---------------------------------------------------------------------------

def _log_terms(p: np.ndarray, eps1: float, eps2: float, scale):
    ax, ay, az = scale
    with np.errstate(divide="ignore"):
        lu = (2.0 / eps2) * np.log(np.abs(p[..., 0]) / ax)
        lv = (2.0 / eps2) * np.log(np.abs(p[..., 1]) / ay)
        lw = (2.0 / eps1) * np.log(np.abs(p[..., 2]) / az)
    ls = np.logaddexp(lu, lv)
    lt = (eps2 / eps1) * ls
    log_f = np.logaddexp(lt, lw)
    return lu, lv, lw, ls, lt, log_f


def log_implicit(prim: Superquadric, x) -> np.ndarray:
    """``log f`` of the inside-outside function at world points."""
    p = prim.to_body(x)
    return _log_terms(p, prim.eps1, prim.eps2, prim.scale)[-1]


def implicit_value(prim: Superquadric, x):
    """Inside-outside function: 1 on the surface, <1 inside, >1 outside."""
    with np.errstate(over="ignore"):
        val = np.exp(log_implicit(prim, x))
    return float(val) if np.ndim(val) == 0 else val


def contains(prim: Superquadric, x):
    """Boundary counts as inside."""
    inside = log_implicit(prim, x) <= 0.0
    return bool(inside) if np.ndim(inside) == 0 else inside


def approx_sdf(prim: Superquadric, x):
    """Signed radial distance to the surface.

    ``d = (1 - f**(-eps1/2)) * |p|`` with ``p`` the body-frame point.  Exact
    for spheres and along the principal axes; inside the ``CENTER_RADIUS``
    ball around the center the formula is singular and ``-min(scale)`` is
    returned instead.
    """
    x = np.asarray(x, dtype=float)
    p = prim.to_body(x)
    log_f = _log_terms(p, prim.eps1, prim.eps2, prim.scale)[-1]
    r = np.linalg.norm(p, axis=-1)
    with np.errstate(over="ignore", invalid="ignore"):
        d = r * -np.expm1(-0.5 * prim.eps1 * log_f)
    d = np.where(r < CENTER_RADIUS, -min(prim.scale), d)
    return float(d) if d.ndim == 0 else d


def truncated_sdf(prim: Superquadric, x, t: float):
    if t <= 0:
        raise ValueError(f"truncation must be positive, got {t}")
    d = np.clip(approx_sdf(prim, x), -t, t)
    return float(d) if np.ndim(d) == 0 else d


def sdf_and_jacobian(theta: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radial distance at ``x`` (n, 3) and its Jacobian w.r.t. the 11 parameters.

    ``theta`` is the raw parameter vector (see module docstring); it is not
    validated, which lets optimisers probe it freely.
    """
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eps1, eps2 = theta[0], theta[1]
    scale = theta[2:5]
    angles = theta[5:8]
    rot = euler_zyx_to_matrix(angles)
    v = x - theta[8:11]
    p = v @ rot

    lu, lv, lw, ls, lt, log_f = _log_terms(p, eps1, eps2, scale)
    r = np.linalg.norm(p, axis=-1)
    center = r < CENTER_RADIUS
    r_safe = np.where(center, 1.0, r)

    with np.errstate(invalid="ignore", over="ignore"):
        g = np.exp(-0.5 * eps1 * log_f)
        d = r * (1.0 - g)
        # mixture weights of the log-sum-exp terms
        w_t = np.where(np.isneginf(lt), 0.0, np.exp(lt - log_f))
        w_w = np.where(np.isneginf(lw), 0.0, np.exp(lw - log_f))
        s_u = np.where(np.isneginf(lu), 0.0, np.exp(lu - ls))
        s_v = np.where(np.isneginf(lv), 0.0, np.exp(lv - ls))
        su_lu = np.where(s_u > 0.0, s_u * lu, 0.0)
        sv_lv = np.where(s_v > 0.0, s_v * lv, 0.0)
        wt_lt = np.where(w_t > 0.0, w_t * lt, 0.0)
        ww_lw = np.where(w_w > 0.0, w_w * lw, 0.0)
        ls_fin = np.where(np.isneginf(ls), 0.0, ls)

        # derivatives of eps1 * log f
        de1 = log_f - (wt_lt + ww_lw)
        de2 = w_t * (ls_fin - su_lu - sv_lv)
        dax = -2.0 * w_t * s_u / scale[0]
        day = -2.0 * w_t * s_v / scale[1]
        daz = -2.0 * w_w / scale[2]
        zeros = np.zeros_like(r)
        gp = np.stack([
            2.0 * w_t * np.divide(s_u, p[:, 0], out=zeros.copy(), where=p[:, 0] != 0.0),
            2.0 * w_t * np.divide(s_v, p[:, 1], out=zeros.copy(), where=p[:, 1] != 0.0),
            2.0 * np.divide(w_w, p[:, 2], out=zeros.copy(), where=p[:, 2] != 0.0),
        ], axis=1)

        half_rg = 0.5 * r * g
        dd_dp = half_rg[:, None] * gp + ((1.0 - g) / r_safe)[:, None] * p

    jac = np.empty((x.shape[0], 11))
    jac[:, 0] = half_rg * de1
    jac[:, 1] = half_rg * de2
    jac[:, 2] = half_rg * dax
    jac[:, 3] = half_rg * day
    jac[:, 4] = half_rg * daz
    for k, drot in enumerate(_euler_zyx_derivatives(angles)):
        jac[:, 5 + k] = np.einsum("ij,ij->i", dd_dp, v @ drot)
    jac[:, 8:11] = -dd_dp @ rot.T

    d = np.where(center, -np.min(scale), d)
    jac[center] = 0.0
    return d, jac


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def _unit_superellipse(psi: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Points (C, S) with |C|^(2/eps) + |S|^(2/eps) = 1 along polar angle psi."""
    c, s = np.cos(psi), np.sin(psi)
    with np.errstate(divide="ignore"):
        log_rho = -0.5 * eps * np.logaddexp((2.0 / eps) * np.log(np.abs(c)),
                                            (2.0 / eps) * np.log(np.abs(s)))
    rho = np.exp(log_rho)
    return rho * c, rho * s


def _equal_arc_samples(lo: float, hi: float, eps: float, sx: float, sy: float,
                       step: float, closed: bool) -> tuple[np.ndarray, np.ndarray]:
    """Sample the curve (sx*C, sy*S) at equal arc-length intervals <= step."""
    bound = (hi - lo) * math.hypot(sx, sy)
    n_dense = int(min(2_000_000, max(4096, math.ceil(50.0 * bound / step))))
    psi = np.linspace(lo, hi, n_dense + 1)
    c, s = _unit_superellipse(psi, eps)
    seg = np.hypot(np.diff(sx * c), np.diff(sy * s))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    length = arc[-1]
    n = max(int(math.ceil(length / step)), 2 if closed else 1)
    if closed:
        targets = np.arange(n) * (length / n)
    else:
        targets = np.linspace(0.0, length, n + 1)
    psi_k = np.interp(targets, arc, psi)
    return _unit_superellipse(psi_k, eps)


def sample_surface(prim: Superquadric, target_spacing: float) -> np.ndarray:
    """Equal-distance samples on the surface, as world points (n, 3).

    The azimuthal curve and the meridian profile are each sampled at equal
    arc length with step ``target_spacing / sqrt(2)``, so the diagonal of
    every cell of the resulting (eta, omega) lattice is at most
    ``target_spacing``.
    """
    if target_spacing <= 0:
        raise ValueError("target_spacing must be positive")
    ax, ay, az = prim.scale
    step = target_spacing / math.sqrt(2.0)
    c2, s2 = _equal_arc_samples(-math.pi, math.pi, prim.eps2, ax, ay, step, closed=True)
    r_max = float(np.max(np.hypot(ax * c2, ay * s2)))
    c1, s1 = _equal_arc_samples(-0.5 * math.pi, 0.5 * math.pi, prim.eps1, r_max, az, step,
                                closed=False)
    c1 = np.abs(c1)
    ring = c1 > 1e-12
    body = np.stack([
        ax * np.outer(c1[ring], c2).ravel(),
        ay * np.outer(c1[ring], s2).ravel(),
        az * np.repeat(s1[ring], c2.size),
    ], axis=1)
    poles = np.stack([np.zeros(2), np.zeros(2), np.array([-az, az])], axis=1)
    body = np.concatenate([poles[:1], body, poles[1:]], axis=0)
    return prim.to_world(body)
