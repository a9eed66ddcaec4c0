"""Procedural meshes and textures used by demos and tests."""
from __future__ import annotations

import numpy as np

from .geometry import Mesh, subdivide


def plane(size: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Two-triangle square in the xy plane, facing +z, unit uv square."""
    h = 0.5 * size
    cx, cy, cz = center
    positions = np.array(
        [[cx - h, cy - h, cz], [cx + h, cy - h, cz], [cx + h, cy + h, cz], [cx - h, cy + h, cz]]
    )
    uvs = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return Mesh(positions=positions, faces=faces, uvs=uvs, uv_faces=faces.copy())


def uv_sphere(n_lat: int = 16, n_lon: int = 32, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Latitude/longitude sphere with shared seam positions.

    Positions are unique (no seam duplication, so optimized shapes stay
    crack-free); texture coordinates use their own index space with a
    duplicated seam column.
    """
    if n_lat < 3 or n_lon < 3:
        raise ValueError("need at least 3 segments in each direction")
    center = np.asarray(center, dtype=np.float64)

    positions = [np.array([0.0, radius, 0.0])]
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            phi = 2.0 * np.pi * j / n_lon
            positions.append(
                radius * np.array([np.sin(theta) * np.cos(phi), np.cos(theta), np.sin(theta) * np.sin(phi)])
            )
    bottom = len(positions)
    positions.append(np.array([0.0, -radius, 0.0]))
    positions = np.array(positions) + center

    uv = lambda i, j: i * (n_lon + 1) + j
    uvs = np.array(
        [[j / n_lon, i / n_lat] for i in range(n_lat + 1) for j in range(n_lon + 1)]
    )

    faces = []
    uv_faces = []
    for j in range(n_lon):
        faces.append([0, ring(1, j + 1), ring(1, j)])
        uv_faces.append([uv(0, j), uv(1, j + 1), uv(1, j)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j + 1), ring(i + 1, j)
            faces.append([a, c, d])
            uv_faces.append([uv(i, j), uv(i + 1, j + 1), uv(i + 1, j)])
            faces.append([a, b, c])
            uv_faces.append([uv(i, j), uv(i, j + 1), uv(i + 1, j + 1)])
    for j in range(n_lon):
        faces.append([bottom, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)])
        uv_faces.append([uv(n_lat, j), uv(n_lat - 1, j), uv(n_lat - 1, j + 1)])

    return Mesh(positions=positions, faces=np.array(faces), uvs=uvs, uv_faces=np.array(uv_faces))


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Subdivided icosahedron reprojected to the sphere; no uv atlas."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    mesh = Mesh(positions=verts, faces=faces)
    for _ in range(subdivisions):
        mesh = subdivide(mesh)
        mesh.positions /= np.linalg.norm(mesh.positions, axis=1, keepdims=True)
    if subdivisions == 0:
        mesh.positions /= np.linalg.norm(mesh.positions, axis=1, keepdims=True)
    mesh.positions = mesh.positions * radius + np.asarray(center, dtype=np.float64)
    return mesh


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> Mesh:
    """Axis-aligned box; each face owns its own uv square."""
    sx, sy, sz = np.asarray(size, dtype=np.float64) * 0.5
    cx, cy, cz = center
    corners = np.array(
        [
            [cx - sx, cy - sy, cz - sz], [cx + sx, cy - sy, cz - sz],
            [cx + sx, cy + sy, cz - sz], [cx - sx, cy + sy, cz - sz],
            [cx - sx, cy - sy, cz + sz], [cx + sx, cy - sy, cz + sz],
            [cx + sx, cy + sy, cz + sz], [cx - sx, cy + sy, cz + sz],
        ]
    )
    # quads with outward winding
    quads = [
        (4, 5, 6, 7),  # +z
        (1, 0, 3, 2),  # -z
        (5, 1, 2, 6),  # +x
        (0, 4, 7, 3),  # -x
        (7, 6, 2, 3),  # +y
        (0, 1, 5, 4),  # -y
    ]
    faces = []
    uvs = []
    uv_faces = []
    for a, b, c, d in quads:
        base = len(uvs)
        uvs.extend([[0, 1], [1, 1], [1, 0], [0, 0]])
        faces.append([a, b, c])
        uv_faces.append([base, base + 1, base + 2])
        faces.append([a, c, d])
        uv_faces.append([base, base + 2, base + 3])
    return Mesh(
        positions=corners,
        faces=np.array(faces),
        uvs=np.array(uvs, dtype=np.float64),
        uv_faces=np.array(uv_faces),
    )


def checkerboard(height: int, width: int, squares: int = 8, low: float = 0.1, high: float = 0.9, channels: int = 3) -> np.ndarray:
    """Checker texture values in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    cell_h = max(1, height // squares)
    cell_w = max(1, width // squares)
    check = ((yy // cell_h + xx // cell_w) % 2).astype(np.float64)
    img = low + (high - low) * check
    return np.repeat(img[:, :, None], channels, axis=2)


def bumpy_sphere(n_lat: int = 32, n_lon: int = 64, radius: float = 1.0, amplitude: float = 0.05, freq_lat: int = 6, freq_lon: int = 6) -> Mesh:
    """Sphere with a smooth radial bump field; a reference target for fits."""
    mesh = uv_sphere(n_lat=n_lat, n_lon=n_lon, radius=1.0)
    p = mesh.positions
    r = np.linalg.norm(p, axis=1)
    theta = np.arccos(np.clip(p[:, 1] / r, -1.0, 1.0))
    phi = np.arctan2(p[:, 2], p[:, 0])
    bump = 1.0 + amplitude * np.sin(freq_lat * theta) * np.cos(freq_lon * phi)
    mesh.positions = p * (radius * bump / r)[:, None]
    return mesh
