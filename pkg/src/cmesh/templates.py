"""Built-in mesh templates.

``icosphere`` is the desk-scale template (subdivision 3 gives 642
vertices).  ``dome_grid`` is an open face-like surface with an exact
vertex count; the default 117 x 243 grid has 28431 vertices, matching
the full-scale decoder output, since no face scan template ships with
the package.
"""

from __future__ import annotations

import numpy as np

from .mesh import ColouredMesh


def icosphere(subdivisions=3) -> ColouredMesh:
    """Subdivided icosahedron on the unit sphere; 10 * 4^s + 2 vertices."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        index = {v: i for i, v in enumerate(verts)}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key in cache:
                return cache[key]
            m = np.add(verts[i], verts[j]) / 2.0
            m = tuple(m / np.linalg.norm(m))
            idx = index.get(m)
            if idx is None:
                idx = len(verts)
                verts.append(m)
                index[m] = idx
            cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    positions = np.array(verts)
    colours = _default_colours(positions)
    return ColouredMesh(positions, colours, np.array(faces, dtype=np.int64),
                        landmark_pair=(0, 1))


def dome_grid(rows=117, cols=243) -> ColouredMesh:
    """Open spherical patch with bumps, rows * cols vertices exactly."""
    r = np.linspace(0.0, 1.0, rows)
    c = np.linspace(0.0, 1.0, cols)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    theta = (0.25 + 0.5 * rr) * np.pi          # polar angle band
    phi = (-0.45 + 0.9 * cc) * np.pi           # azimuth band
    radius = (1.0
              + 0.08 * np.exp(-((rr - 0.62) ** 2 + (cc - 0.5) ** 2) / 0.01)
              + 0.03 * np.cos(3.0 * phi) * np.sin(2.0 * theta))
    x = radius * np.sin(theta) * np.sin(phi)
    y = radius * np.cos(theta)
    z = radius * np.sin(theta) * np.cos(phi)
    positions = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    tris = []
    def vid(i, j):
        return i * cols + j
    for i in range(rows - 1):
        for j in range(cols - 1):
            tris.append((vid(i, j), vid(i + 1, j), vid(i, j + 1)))
            tris.append((vid(i, j + 1), vid(i + 1, j), vid(i + 1, j + 1)))
    colours = _default_colours(positions)
    eye_l = vid(int(rows * 0.4), int(cols * 0.35))
    eye_r = vid(int(rows * 0.4), int(cols * 0.65))
    return ColouredMesh(positions, colours, np.array(tris, dtype=np.int64),
                        landmark_pair=(eye_l, eye_r))


def paper_scale_template() -> ColouredMesh:
    """The 28431-vertex template used by the full-scale benchmark."""
    return dome_grid(117, 243)


def _default_colours(positions):
    unit = positions / np.linalg.norm(positions, axis=1, keepdims=True)
    colours = np.empty_like(positions)
    colours[:, 0] = 0.55 + 0.25 * unit[:, 0]
    colours[:, 1] = 0.45 + 0.25 * unit[:, 1]
    colours[:, 2] = 0.45 + 0.20 * unit[:, 2]
    return np.clip(colours, 0.0, 1.0)
