"""Procedural meshes for tests, CI fixtures, and the synthetic benchmark suite."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh, compute_vertex_normals

# Canonical unit cube: 8 vertices, 12 CCW faces, outward winding.
_CUBE_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ],
    dtype=np.int64,
)


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), name="box") -> TriMesh:
    """Axis-aligned closed box (watertight, outward winding)."""
    sx, sy, sz = (float(s) / 2.0 for s in size)
    cx, cy, cz = (float(c) for c in center)
    verts = np.array(
        [
            [cx - sx, cy - sy, cz - sz],
            [cx + sx, cy - sy, cz - sz],
            [cx + sx, cy + sy, cz - sz],
            [cx - sx, cy + sy, cz - sz],
            [cx - sx, cy - sy, cz + sz],
            [cx + sx, cy - sy, cz + sz],
            [cx + sx, cy + sy, cz + sz],
            [cx - sx, cy + sy, cz + sz],
        ]
    )
    return TriMesh(verts, _CUBE_FACES.copy(), name=name)


def unit_cube(name="cube") -> TriMesh:
    return box((1.0, 1.0, 1.0), name=name)


def flat_plate(width=2.0, depth=2.0, nx=8, nz=8, y=0.0, center=(0.0, 0.0), name="plate") -> TriMesh:
    """Single-sided horizontal grid at height y, normals facing +y (open mesh)."""
    xs = np.linspace(center[0] - width / 2, center[0] + width / 2, nx + 1)
    zs = np.linspace(center[1] - depth / 2, center[1] + depth / 2, nz + 1)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    verts = np.stack([gx.ravel(), np.full(gx.size, float(y)), gz.ravel()], axis=1)
    faces = []
    for i in range(nx):
        for j in range(nz):
            a = i * (nz + 1) + j
            b = (i + 1) * (nz + 1) + j
            # CCW as seen from +y
            faces.append([a, a + 1, b + 1])
            faces.append([a, b + 1, b])
    return TriMesh(verts, np.array(faces, dtype=np.int64), name=name)


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0), name="sphere") -> TriMesh:
    """Watertight sphere by icosahedron subdivision and radial projection."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key in cache:
                return cache[key]
            pa, pb = verts[a], verts[b]
            m = np.array([(pa[0] + pb[0]) / 2, (pa[1] + pb[1]) / 2, (pa[2] + pb[2]) / 2])
            m /= np.linalg.norm(m)
            verts.append(tuple(m))
            cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    arr = np.array(verts) * float(radius) + np.asarray(center, dtype=np.float64)
    return TriMesh(arr, np.array(faces, dtype=np.int64), name=name)


def bumpy_blob(radius=1.0, subdivisions=2, bump=0.25, seed=0, name="blob") -> TriMesh:
    """Asymmetric smooth solid: icosphere with deterministic radial noise.

    Useful where rotational symmetry would make pose recovery ambiguous.
    """
    sphere = icosphere(radius=1.0, subdivisions=subdivisions)
    rng = np.random.default_rng(seed)
    # low-frequency deterministic perturbation from a few random harmonics
    dirs = rng.normal(size=(4, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.uniform(0.3, 1.0, size=4)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    r = np.ones(sphere.vertex_count)
    for d, a, p in zip(dirs, amps, phases):
        r += bump * a * np.sin(3.0 * sphere.vertices @ d + p)
    verts = sphere.vertices * (r[:, None] * float(radius))
    return TriMesh(verts, sphere.faces, name=name)
