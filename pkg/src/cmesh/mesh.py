"""Coloured triangle meshes and the evaluation metrics defined on them.

A coloured mesh carries one 6-channel signal per vertex: the Cartesian
position (x, y, z) and an RGB colour in [0, 1].  The triangle list doubles
as the graph topology used by every other module.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import csgraph, csr_matrix


class MeshError(ValueError):
    """Raised for invalid mesh data or mismatched mesh operands."""


class ColouredMesh:
    """Triangle mesh with per-vertex position and colour channels.

    Parameters
    ----------
    positions : (n, 3) float array
        Object-centred Cartesian coordinates, roughly unit-sphere scale.
    colours : (n, 3) float array
        Per-vertex RGB in [0, 1].
    triangles : (t, 3) int array
        Vertex indices; each triangle must have three distinct indices.
    landmark_pair : (int, int), optional
        Two vertex indices whose distance normalizes shape errors
        (the inter-ocular distance for face templates).
    validate : bool
        Skip invariant checks when building from already-trusted data.
    """

    __slots__ = ("positions", "colours", "triangles", "landmark_pair")

    def __init__(self, positions, colours, triangles, landmark_pair=None,
                 validate=True):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.colours = np.ascontiguousarray(colours, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.landmark_pair = tuple(landmark_pair) if landmark_pair else None
        if validate:
            self._check()

    def _check(self):
        n = len(self.positions)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise MeshError(f"positions must be (n, 3), got {self.positions.shape}")
        if self.colours.shape != (n, 3):
            raise MeshError(
                f"colours shape {self.colours.shape} does not match {n} vertices")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError(f"triangles must be (t, 3), got {self.triangles.shape}")
        if len(self.triangles) == 0:
            raise MeshError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= n:
            bad = int(np.argmax((self.triangles < 0) | (self.triangles >= n)))
            raise MeshError(
                f"triangle {bad // 3} references vertex outside [0, {n})")
        same = ((self.triangles[:, 0] == self.triangles[:, 1])
                | (self.triangles[:, 1] == self.triangles[:, 2])
                | (self.triangles[:, 0] == self.triangles[:, 2]))
        if same.any():
            raise MeshError(
                f"degenerate triangle {int(np.argmax(same))} repeats a vertex")
        key = np.sort(self.triangles, axis=1)
        _, counts = np.unique(key, axis=0, return_counts=True)
        if (counts > 1).any():
            raise MeshError("duplicate triangles present")
        if not np.isfinite(self.positions).all() or not np.isfinite(self.colours).all():
            raise MeshError("non-finite vertex data")
        if self.colours.min() < -1e-9 or self.colours.max() > 1 + 1e-9:
            raise MeshError(
                f"colours outside [0, 1]: range "
                f"[{self.colours.min():.4g}, {self.colours.max():.4g}]")
        adj = build_adjacency(self.triangles, n)
        ncomp = csgraph.connected_components(adj, directed=False,
                                             return_labels=False)
        if ncomp != 1:
            raise MeshError(f"mesh graph has {ncomp} connected components")
        if self.landmark_pair is not None:
            i, j = self.landmark_pair
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise MeshError(f"invalid landmark pair ({i}, {j})")

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def features(self):
        """The n x 6 signal (positions then colours) fed to the networks."""
        return np.hstack([self.positions, self.colours])

    @classmethod
    def from_features(cls, feats, triangles, landmark_pair=None,
                      clamp_colours=False, validate=True):
        """Rebuild a mesh from an n x 6 feature matrix on a known topology."""
        feats = np.asarray(feats, dtype=np.float64)
        cols = feats[:, 3:6]
        if clamp_colours:
            cols = np.clip(cols, 0.0, 1.0)
        return cls(feats[:, :3], cols, triangles,
                   landmark_pair=landmark_pair, validate=validate)

    def with_vertex_data(self, positions=None, colours=None, validate=True):
        return ColouredMesh(
            self.positions if positions is None else positions,
            self.colours if colours is None else colours,
            self.triangles, landmark_pair=self.landmark_pair,
            validate=validate)

    def interocular_distance(self) -> float:
        if self.landmark_pair is None:
            raise MeshError("mesh has no landmark pair")
        i, j = self.landmark_pair
        d = float(np.linalg.norm(self.positions[i] - self.positions[j]))
        if d <= 0:
            raise MeshError("landmark vertices coincide")
        return d

    def vertex_normals(self):
        """Area-weighted vertex normals (unit length, zero for isolated)."""
        return vertex_normals(self.positions, self.triangles)

    def __repr__(self):
        return (f"ColouredMesh(n={self.n_vertices}, t={self.n_triangles}, "
                f"landmarks={self.landmark_pair})")


def build_adjacency(triangles, n) -> csr_matrix:
    """Binary symmetric adjacency from triangle edges.

    E[i, j] = 1 iff vertices i and j share a triangle edge.  The diagonal
    is zero.  Duplicate triangles cannot change the result.
    """
    triangles = np.asarray(triangles, dtype=np.int64)
    if len(triangles) and (triangles.min() < 0 or triangles.max() >= n):
        raise MeshError(f"triangle index outside [0, {n})")
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]],
                   triangles[:, [2, 0]]])
    e = np.vstack([e, e[:, ::-1]])
    adj = csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.setdiag(0)
    adj.eliminate_zeros()
    adj.sort_indices()
    return adj


def degrees(adj) -> np.ndarray:
    return np.asarray(adj.sum(axis=1)).ravel()


def triangle_normals(positions, triangles, normalize=True):
    """Per-triangle normals; unnormalized magnitude is twice the area."""
    p = positions[triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    if normalize:
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        n = n / lens
    return n


def vertex_normals(positions, triangles):
    fn = triangle_normals(positions, triangles, normalize=False)
    vn = np.zeros_like(positions)
    for k in range(3):
        np.add.at(vn, triangles[:, k], fn)
    lens = np.linalg.norm(vn, axis=1, keepdims=True)
    safe = np.where(lens > 1e-300, lens, 1.0)
    return vn / safe


def nme_shape(pred: ColouredMesh, gt: ColouredMesh) -> float:
    """Mean per-vertex position error normalized by inter-ocular distance.

    The normalizer is always taken from the ground-truth mesh, which must
    carry a landmark pair.
    """
    if pred.n_vertices != gt.n_vertices:
        raise MeshError(
            f"vertex count mismatch: {pred.n_vertices} vs {gt.n_vertices}")
    iod = gt.interocular_distance()
    err = np.linalg.norm(pred.positions - gt.positions, axis=1)
    return float(err.mean() / iod)


def mae_texture(pred: ColouredMesh, gt: ColouredMesh) -> float:
    """Mean absolute colour error over all n x 3 channel entries."""
    if pred.colours.shape != gt.colours.shape:
        raise MeshError(
            f"colour shape mismatch: {pred.colours.shape} vs {gt.colours.shape}")
    return float(np.abs(pred.colours - gt.colours).mean())
