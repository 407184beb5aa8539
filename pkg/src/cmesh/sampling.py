"""Quadric-error mesh decimation and the sampling maps it produces.

Down-sampling selects a subset of the original vertices (the map is
binary), so every collapse moves an edge onto one of its endpoints.
Each discarded vertex remembers barycentric coordinates on a coarse
triangle, which is all up-sampling needs: the fine signal is recovered
by one sparse product.
"""

from __future__ import annotations

import heapq

import numpy as np
from scipy.sparse import csr_matrix

from .mesh import ColouredMesh, MeshError, triangle_normals

BOUNDARY_WEIGHT = 1000.0


class DecimationError(MeshError):
    pass


class DownsampleMap:
    """Binary coarse-from-fine selection: row i picks fine vertex retained[i]."""

    __slots__ = ("retained", "n_fine")

    def __init__(self, retained, n_fine):
        self.retained = np.asarray(retained, dtype=np.int64)
        self.n_fine = int(n_fine)
        if len(np.unique(self.retained)) != len(self.retained):
            raise DecimationError("retained vertex list has duplicates")

    @property
    def shape(self):
        return (len(self.retained), self.n_fine)

    def matrix(self) -> csr_matrix:
        m = len(self.retained)
        return csr_matrix((np.ones(m), (np.arange(m), self.retained)),
                          shape=self.shape)

    def apply(self, values):
        """Gather the retained rows of an n x F array."""
        values = np.asarray(values)
        if values.shape[0] != self.n_fine:
            raise DecimationError(
                f"expected {self.n_fine} rows, got {values.shape[0]}")
        return values[self.retained]


class UpsampleMap:
    """Sparse fine-from-coarse interpolation; rows sum to one."""

    __slots__ = ("_matrix",)

    def __init__(self, matrix: csr_matrix):
        self._matrix = matrix.tocsr()
        self._matrix.sort_indices()
        sums = np.asarray(self._matrix.sum(axis=1)).ravel()
        if not np.allclose(sums, 1.0, atol=1e-9):
            worst = int(np.argmax(np.abs(sums - 1.0)))
            raise DecimationError(
                f"up-sample row {worst} sums to {sums[worst]!r}, not 1")

    @property
    def shape(self):
        return self._matrix.shape

    def matrix(self) -> csr_matrix:
        return self._matrix

    def apply(self, values):
        values = np.asarray(values)
        if values.shape[0] != self.shape[1]:
            raise DecimationError(
                f"expected {self.shape[1]} rows, got {values.shape[0]}")
        return self._matrix @ values


def apply_down(values, dmap: DownsampleMap):
    return dmap.apply(values)


def apply_up(values, umap: UpsampleMap):
    return umap.apply(values)


# ------------------------------------------------------------- quadrics --

def vertex_quadrics(mesh: ColouredMesh, boundary_weight=BOUNDARY_WEIGHT):
    """Per-vertex 4x4 plane quadrics summed over incident triangles.

    Boundary edges (edges in exactly one triangle) contribute an extra
    constraint quadric through a plane perpendicular to the triangle,
    weighted heavily so open borders resist shrinking.
    """
    pos = mesh.positions
    tris = mesh.triangles
    normals = triangle_normals(pos, tris, normalize=False)
    areas2 = np.linalg.norm(normals, axis=1)
    if (areas2 < 1e-300).any():
        raise DecimationError(
            f"triangle {int(np.argmax(areas2 < 1e-300))} has zero area")
    unit = normals / areas2[:, None]
    d = -np.einsum("ij,ij->i", unit, pos[tris[:, 0]])
    planes = np.hstack([unit, d[:, None]])          # (t, 4), a^2+b^2+c^2 = 1
    kp = planes[:, :, None] * planes[:, None, :]    # (t, 4, 4) outer products

    quads = np.zeros((mesh.n_vertices, 4, 4))
    for k in range(3):
        np.add.at(quads, tris[:, k], kp)

    for (i, j), tri_idx in _boundary_edges(tris).items():
        edge = pos[j] - pos[i]
        elen = np.linalg.norm(edge)
        if elen < 1e-300:
            continue
        perp = np.cross(edge / elen, unit[tri_idx])
        nrm = np.linalg.norm(perp)
        if nrm < 1e-300:
            continue
        perp /= nrm
        plane = np.append(perp, -perp @ pos[i])
        q = boundary_weight * np.outer(plane, plane)
        quads[i] += q
        quads[j] += q
    return quads


def quadric_error(quadric, point):
    """Squared point-to-planes distance sum: [p;1]^T Q [p;1]."""
    h = np.append(point, 1.0)
    return float(h @ quadric @ h)


def _boundary_edges(tris):
    count = {}
    for t, tri in enumerate(tris):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            if key in count:
                count[key] = (count[key][0] + 1, count[key][1])
            else:
                count[key] = (1, t)
    return {k: t for k, (c, t) in count.items() if c == 1}


# ------------------------------------------------------------ decimation --

class _MeshState:
    """Mutable connectivity during greedy collapse."""

    def __init__(self, mesh: ColouredMesh):
        self.pos = mesh.positions.copy()
        self.quads = vertex_quadrics(mesh)
        self.alive = np.ones(mesh.n_vertices, dtype=bool)
        self.version = np.zeros(mesh.n_vertices, dtype=np.int64)
        self.tris = {}            # tid -> (a, b, c) with original vertex ids
        self.vert_tris = [set() for _ in range(mesh.n_vertices)]
        for tid, tri in enumerate(mesh.triangles):
            tri = tuple(int(v) for v in tri)
            self.tris[tid] = tri
            for v in tri:
                self.vert_tris[v].add(tid)
        self.n_alive = mesh.n_vertices
        # merged[v] = vertex that absorbed v (chase for final representative)
        self.merged = np.arange(mesh.n_vertices)

    def neighbours(self, v):
        out = set()
        for tid in self.vert_tris[v]:
            out.update(self.tris[tid])
        out.discard(v)
        return out

    def representative(self, v):
        while self.merged[v] != v:
            v = self.merged[v]
        return v


def _edge_cost(state, a, b):
    """Cost of collapsing edge (a,b) onto its cheaper endpoint."""
    q = state.quads[a] + state.quads[b]
    ca = quadric_error(q, state.pos[a])
    cb = quadric_error(q, state.pos[b])
    if ca <= cb:
        return ca, a, b
    return cb, b, a


def _collapse_flips_normal(state, keep, gone):
    """Would moving `gone` onto `keep` invert any surviving triangle?"""
    for tid in state.vert_tris[gone]:
        tri = state.tris[tid]
        if keep in tri:
            continue  # triangle vanishes
        ps = [state.pos[keep] if v == gone else state.pos[v] for v in tri]
        before = np.cross(state.pos[tri[1]] - state.pos[tri[0]],
                          state.pos[tri[2]] - state.pos[tri[0]])
        after = np.cross(ps[1] - ps[0], ps[2] - ps[0])
        if before @ after <= 0:
            return True
    return False


def _link_condition(state, a, b):
    """Shared neighbours of (a, b) must all be opposite a shared triangle."""
    shared_tris = state.vert_tris[a] & state.vert_tris[b]
    opposite = set()
    for tid in shared_tris:
        for v in state.tris[tid]:
            if v != a and v != b:
                opposite.add(v)
    common = state.neighbours(a) & state.neighbours(b)
    return common == opposite and len(shared_tris) >= 1


def decimate(mesh: ColouredMesh, m_target: int):
    """Greedy minimum-quadric-cost edge collapse down to ``m_target`` vertices.

    Returns ``(coarse_mesh, down_map, records)`` where ``records`` maps each
    discarded fine vertex to ``(coarse_triangle_index, barycentric_weights)``
    for building the up-sampling map.
    """
    n = mesh.n_vertices
    if not 0 < m_target < n:
        raise DecimationError(f"m_target {m_target} not in (0, {n})")

    state = _MeshState(mesh)
    heap = []
    seen = set()
    for tri in state.tris.values():
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[0], tri[2])):
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                cost, keep, gone = _edge_cost(state, *key)
                heapq.heappush(heap, (cost, key[0], key[1],
                                      state.version[key[0]],
                                      state.version[key[1]]))
    del seen

    while state.n_alive > m_target:
        if not heap:
            raise DecimationError(
                f"collapse queue exhausted at {state.n_alive} vertices "
                f"(target {m_target}); mesh cannot be decimated further")
        cost, a, b, va, vb = heapq.heappop(heap)
        if (not state.alive[a] or not state.alive[b]
                or state.version[a] != va or state.version[b] != vb):
            continue
        if not state.vert_tris[a] & state.vert_tris[b]:
            continue  # no longer an edge of any triangle
        cost, keep, gone = _edge_cost(state, a, b)
        if not _link_condition(state, a, b):
            continue
        if _collapse_flips_normal(state, keep, gone):
            continue
        # triangle count guard: keep must stay on a triangle afterwards
        dead_tris = state.vert_tris[keep] & state.vert_tris[gone]
        if len(state.vert_tris[keep] | state.vert_tris[gone]) - len(dead_tris) == 0:
            continue

        state.quads[keep] = state.quads[keep] + state.quads[gone]
        state.alive[gone] = False
        state.merged[gone] = keep
        state.n_alive -= 1
        for tid in dead_tris:
            tri = state.tris.pop(tid)
            for v in tri:
                state.vert_tris[v].discard(tid)
        retris = list(state.vert_tris[gone])
        for tid in retris:
            tri = state.tris[tid]
            new_tri = tuple(keep if v == gone else v for v in tri)
            state.tris[tid] = new_tri
            state.vert_tris[gone].discard(tid)
            state.vert_tris[keep].add(tid)
        state.version[keep] += 1

        for nb in sorted(state.neighbours(keep)):
            cost2, _, _ = _edge_cost(state, keep, nb)
            key = (min(keep, nb), max(keep, nb))
            heapq.heappush(heap, (cost2, key[0], key[1],
                                  state.version[key[0]],
                                  state.version[key[1]]))

    return _extract_coarse(mesh, state)


def _extract_coarse(mesh, state):
    retained = np.flatnonzero(state.alive)
    old2new = -np.ones(mesh.n_vertices, dtype=np.int64)
    old2new[retained] = np.arange(len(retained))

    tri_rows = []
    tri_seen = set()
    for tid in sorted(state.tris):
        tri = state.tris[tid]
        key = tuple(sorted(tri))
        if key in tri_seen:
            continue
        tri_seen.add(key)
        tri_rows.append([old2new[v] for v in tri])
    coarse_tris = np.array(tri_rows, dtype=np.int64)

    coarse = ColouredMesh(mesh.positions[retained], mesh.colours[retained],
                          coarse_tris, landmark_pair=None, validate=False)
    dmap = DownsampleMap(retained, mesh.n_vertices)
    records = _project_discarded(mesh, state, coarse, old2new)
    return coarse, dmap, records


def _project_discarded(mesh, state, coarse, old2new):
    """Barycentric records for discarded vertices on the coarse surface.

    Search is local first: the coarse triangles around the vertex that
    absorbed this one, widened by one ring.  A global scan is the fallback
    for the rare vertex whose representative lost all its triangles.
    """
    records = {}
    coarse_pos = coarse.positions
    coarse_tris = coarse.triangles
    coarse_row = {tuple(sorted(int(v) for v in tri)): row
                  for row, tri in enumerate(coarse_tris)}
    for v in np.flatnonzero(~state.alive):
        rep = state.representative(v)
        rows = []
        for tid in sorted(state.vert_tris[rep]):
            tri = state.tris[tid]
            key = tuple(sorted(int(old2new[u]) for u in tri))
            row = coarse_row.get(key)
            if row is not None:
                rows.append(row)
        if not rows:
            rows = range(coarse.n_triangles)
        point = mesh.positions[v]
        best = _scan(point, coarse_pos, coarse_tris, rows)
        records[int(v)] = (best[0], best[2])
    return records


def _scan(point, pos, tris, rows):
    best = None
    for row in rows:
        tri = tris[row]
        bary = _project_point_triangle(point, pos[tri[0]], pos[tri[1]],
                                       pos[tri[2]])
        proj = bary @ pos[tri]
        d2 = float(np.sum((proj - point) ** 2))
        if best is None or d2 < best[1] - 1e-15:
            best = (row, d2, bary)
    return best


def _project_point_triangle(p, a, b, c):
    """Barycentric coordinates of the closest point on triangle abc to p.

    Clamped to the simplex, so the weights are non-negative and sum to 1.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3) if d1 != d3 else 0.0
        return np.array([1.0 - t, t, 0.0])
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6) if d2 != d6 else 0.0
        return np.array([1.0 - t, 0.0, t])
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.array([0.0, 1.0 - t, t])
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return np.array([1.0 - v - w, v, w])


# ---------------------------------------------------------------- maps --

def build_upsample(records, dmap: DownsampleMap, coarse: ColouredMesh):
    """Assemble the fine-from-coarse interpolation matrix.

    Retained fine vertices get one-hot rows; every discarded vertex gets
    its recorded barycentric weights on a coarse triangle.
    """
    n, m = dmap.n_fine, len(dmap.retained)
    rows, cols, vals = [], [], []
    fine_of = {int(f): i for i, f in enumerate(dmap.retained)}
    for i, f in enumerate(dmap.retained):
        rows.append(int(f))
        cols.append(i)
        vals.append(1.0)
    for v, (tri_idx, bary) in records.items():
        if v in fine_of:
            raise DecimationError(f"vertex {v} is both retained and discarded")
        if not 0 <= tri_idx < coarse.n_triangles:
            raise DecimationError(
                f"record for vertex {v} references missing triangle {tri_idx}")
        bary = np.maximum(np.asarray(bary, dtype=np.float64), 0.0)
        s = bary.sum()
        if s <= 0:
            raise DecimationError(f"record for vertex {v} has zero weights")
        bary = bary / s
        for c, w in zip(coarse.triangles[tri_idx], bary):
            rows.append(v)
            cols.append(int(c))
            vals.append(float(w))
    mat = csr_matrix((vals, (rows, cols)), shape=(n, m))
    mat.sum_duplicates()
    return UpsampleMap(mat)
