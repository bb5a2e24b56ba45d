"""Shared fixtures: reference shapes, independent oracles and generators."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from sqabstract.grid import VoxelGrid
from sqabstract.sdf_io import TriangleMesh, gen_superquadric_sdf
from sqabstract.superquadric import Superquadric, sample_surface


def unit_grid(n: int) -> tuple[tuple[int, int, int], np.ndarray, float]:
    """dims, origin and spacing of an n^3 grid spanning [-0.5, 0.5]^3."""
    return (n, n, n), np.full(3, -0.5), 1.0 / (n - 1)


def random_superquadric(rng, eps=(0.3, 1.8), scale=(0.1, 0.3), shift=0.15,
                        limit=None) -> Superquadric:
    """Random pose and shape; with ``limit`` the surface stays inside that box."""
    while True:
        e = rng.uniform(*eps, size=2)
        s = rng.uniform(*scale, size=3)
        angles = Rotation.random(random_state=rng).as_euler("ZYX")
        tr = rng.uniform(-shift, shift, size=3)
        q = Superquadric(e[0], e[1], s, angles, tr)
        if limit is None or np.abs(sample_surface(q, 0.02)).max() < limit:
            return q


def sq_grid(prims, n: int = 64) -> VoxelGrid:
    return gen_superquadric_sdf(prims, *unit_grid(n))


def lattice_points(n: int, lo=-0.5, hi=0.5) -> np.ndarray:
    g = lo + (hi - lo) * (np.arange(n) + 0.5) / n
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Exact distance to a superquadric by brute-force surface search
# ---------------------------------------------------------------------------

def _radial_surface_point(prim: Superquadric, u: np.ndarray) -> np.ndarray:
    """Body-frame surface point along unit directions ``u`` (..., 3)."""
    a = np.asarray(prim.scale)
    q = np.abs(u) / a
    with np.errstate(divide="ignore"):
        lq = np.log(q)
    e1, e2 = prim.eps1, prim.eps2
    xy = np.logaddexp(2.0 / e2 * lq[..., 0], 2.0 / e2 * lq[..., 1])
    log_f = np.logaddexp(e2 / e1 * xy, 2.0 / e1 * lq[..., 2])
    return u * np.exp(-0.5 * e1 * log_f)[..., None]


def exact_distance(prim: Superquadric, x: np.ndarray, window: float = 0.3,
                   n: int = 21, levels: int = 7) -> np.ndarray:
    """Unsigned distance from world points to the surface.

    Minimises ``|q(u) - p|`` over surface points ``q(u)`` parameterised by
    direction in a tangent window around the direction of ``p``, refining
    the window coarse-to-fine.  Intended for points near the surface.
    """
    p = prim.to_body(np.asarray(x, dtype=float))
    u0 = p / np.linalg.norm(p, axis=1, keepdims=True)
    helper = np.where(np.abs(u0[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(u0, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u0, e1)
    center = np.zeros((len(p), 2))
    offs = np.linspace(-1.0, 1.0, n)
    ga, gb = np.meshgrid(offs, offs, indexing="ij")
    ga, gb = ga.ravel(), gb.ravel()
    w = window
    best = None
    for _ in range(levels):
        a = center[:, [0]] + w * ga
        b = center[:, [1]] + w * gb
        u = u0[:, None, :] + a[..., None] * e1[:, None, :] + b[..., None] * e2[:, None, :]
        u /= np.linalg.norm(u, axis=2, keepdims=True)
        q = _radial_surface_point(prim, u)
        dist = np.linalg.norm(q - p[:, None, :], axis=2)
        k = np.argmin(dist, axis=1)
        best = dist[np.arange(len(p)), k]
        center = np.stack([a[np.arange(len(p)), k], b[np.arange(len(p)), k]], axis=1)
        w *= 2.5 / (n - 1)
    return best


def near_surface_points(prim: Superquadric, rng, count: int, band: float) -> tuple[np.ndarray, np.ndarray]:
    """World points whose radial distance is uniform in ``[-band, band]``.

    Returns the points and their radial distances.
    """
    u = rng.normal(size=(count, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    q = _radial_surface_point(prim, u)
    d = rng.uniform(-band, band, size=count)
    r = np.linalg.norm(q, axis=1)
    p = q * (1.0 + d / r)[:, None]
    return prim.to_world(p), d


# ---------------------------------------------------------------------------
# Exact composite SDF: box + capped cylinder + sphere
# ---------------------------------------------------------------------------

def sd_box(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(q.max(axis=-1), 0.0)


def sd_cylinder_z(p, center, radius, half_height):
    d = p - center
    dr = np.hypot(d[..., 0], d[..., 1]) - radius
    dz = np.abs(d[..., 2]) - half_height
    outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
    return outside + np.minimum(np.maximum(dr, dz), 0.0)


def sd_sphere(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def composite_sdf(p: np.ndarray) -> np.ndarray:
    """A table-lamp-like union: flat slab, vertical post and a ball on top."""
    return np.minimum.reduce([
        sd_box(p, np.array([0.0, 0.0, -0.22]), np.array([0.3, 0.2, 0.06])),
        sd_cylinder_z(p, np.array([0.0, 0.0, 0.02]), 0.07, 0.2),
        sd_sphere(p, np.array([0.0, 0.0, 0.3]), 0.13),
    ])


def composite_grid(n: int) -> VoxelGrid:
    dims, origin, h = unit_grid(n)
    grid = VoxelGrid(dims, origin, h, np.zeros(dims))
    grid.values = composite_sdf(grid.points())
    return grid


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

def icosphere(radius: float = 1.0, subdivisions: int = 3) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache, new_faces = {}, []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(radius * np.array(verts), np.array(faces))


def cube_mesh(half: float = 0.5) -> TriangleMesh:
    v = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
         (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    return TriangleMesh(v, np.array(f))
