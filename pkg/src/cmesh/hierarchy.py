"""Multi-level sampling hierarchies and their binary cache format.

A hierarchy holds the mesh topology at every level (level 0 finest), the
Laplacian per level, and the down/up sampling map pair between adjacent
levels.  Vertex counts shrink by ``ceil(n / factor)`` per level.

The cache container ("CMDH") stores per-level topology plus the sparse
maps as little-endian coordinate triplets.  It is regenerated
deterministically from the input mesh, so the file is a cache, not a
source of truth.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np
from scipy.sparse import csr_matrix

from .graph import NORMALIZED, laplacian_for_mesh
from .mesh import ColouredMesh, MeshError
from .sampling import DownsampleMap, UpsampleMap, build_upsample, decimate

MAGIC = b"CMDH"
VERSION = 1


class HierarchyError(MeshError):
    pass


class MeshHierarchy:
    """Decimation pyramid: meshes, Laplacians, and sampling map pairs."""

    def __init__(self, meshes, laplacians, maps, factor):
        self.meshes = list(meshes)
        self.laplacians = list(laplacians)
        self.maps = list(maps)          # [(DownsampleMap, UpsampleMap), ...]
        self.factor = int(factor)

    @property
    def levels(self) -> int:
        return len(self.maps)

    @property
    def sizes(self):
        return [m.n_vertices for m in self.meshes]

    def down(self, level, values):
        return self.maps[level][0].apply(values)

    def up(self, level, values):
        return self.maps[level][1].apply(values)

    def fingerprint(self) -> int:
        """64-bit hash of the topology and maps; guards checkpoint reuse."""
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<II", len(self.meshes), self.factor))
        for mesh in self.meshes:
            h.update(struct.pack("<q", mesh.n_vertices))
            h.update(np.ascontiguousarray(mesh.triangles, dtype="<i8").tobytes())
        for dmap, umap in self.maps:
            h.update(np.ascontiguousarray(dmap.retained, dtype="<i8").tobytes())
            mat = umap.matrix().tocoo()
            h.update(np.ascontiguousarray(mat.row, dtype="<i4").tobytes())
            h.update(np.ascontiguousarray(mat.col, dtype="<i4").tobytes())
            h.update(np.ascontiguousarray(mat.data, dtype="<f8").tobytes())
        return int.from_bytes(h.digest(), "little")


def build_hierarchy(mesh: ColouredMesh, levels=4, factor=4,
                    kind=NORMALIZED) -> MeshHierarchy:
    """Repeatedly decimate ``mesh`` by ``factor`` and collect the maps."""
    if levels < 0:
        raise HierarchyError(f"levels must be >= 0, got {levels}")
    if factor < 2:
        raise HierarchyError(f"factor must be >= 2, got {factor}")
    if levels and mesh.n_vertices < factor ** levels:
        raise HierarchyError(
            f"mesh with {mesh.n_vertices} vertices is too small for "
            f"{levels} levels at factor {factor}")
    meshes = [mesh]
    laplacians = [laplacian_for_mesh(mesh.triangles, mesh.n_vertices, kind)]
    maps = []
    current = mesh
    for _ in range(levels):
        target = math.ceil(current.n_vertices / factor)
        coarse, dmap, records = decimate(current, target)
        umap = build_upsample(records, dmap, coarse)
        maps.append((dmap, umap))
        laplacians.append(
            laplacian_for_mesh(coarse.triangles, coarse.n_vertices, kind))
        meshes.append(coarse)
        current = coarse
    return MeshHierarchy(meshes, laplacians, maps, factor)


# ------------------------------------------------------------ container --

def _write_array(fh, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    fh.write(struct.pack("<q", arr.size))
    fh.write(arr.tobytes())


def _read_array(fh, dtype, shape=None):
    (size,) = struct.unpack("<q", fh.read(8))
    itemsize = np.dtype(dtype).itemsize
    buf = fh.read(size * itemsize)
    if len(buf) != size * itemsize:
        raise HierarchyError("truncated hierarchy file")
    arr = np.frombuffer(buf, dtype=dtype).copy()
    return arr.reshape(shape) if shape else arr


def save_hierarchy(hier: MeshHierarchy, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<II", len(hier.meshes), hier.factor))
        lm = hier.meshes[0].landmark_pair or (-1, -1)
        fh.write(struct.pack("<qq", *lm))
        for mesh in hier.meshes:
            fh.write(struct.pack("<qq", mesh.n_vertices, mesh.n_triangles))
            _write_array(fh, mesh.positions, "<f8")
            _write_array(fh, mesh.colours, "<f8")
            _write_array(fh, mesh.triangles, "<i8")
        for dmap, umap in hier.maps:
            fh.write(struct.pack("<qq", *dmap.shape))
            _write_array(fh, dmap.retained, "<i8")
            mat = umap.matrix().tocoo()
            fh.write(struct.pack("<qqq", mat.shape[0], mat.shape[1], mat.nnz))
            _write_array(fh, mat.row, "<i4")
            _write_array(fh, mat.col, "<i4")
            _write_array(fh, mat.data, "<f8")


def load_hierarchy(path, kind=NORMALIZED) -> MeshHierarchy:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise HierarchyError(f"{path}: not a hierarchy container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise HierarchyError(
                f"{path}: unsupported container version {version}")
        n_meshes, factor = struct.unpack("<II", fh.read(8))
        lm = struct.unpack("<qq", fh.read(16))
        landmark = None if lm[0] < 0 else (int(lm[0]), int(lm[1]))
        meshes = []
        for i in range(n_meshes):
            n, t = struct.unpack("<qq", fh.read(16))
            pos = _read_array(fh, "<f8", (n, 3))
            col = _read_array(fh, "<f8", (n, 3))
            tris = _read_array(fh, "<i8", (t, 3))
            meshes.append(ColouredMesh(
                pos, col, tris,
                landmark_pair=landmark if i == 0 else None, validate=False))
        maps = []
        for _ in range(n_meshes - 1):
            m, n_fine = struct.unpack("<qq", fh.read(16))
            retained = _read_array(fh, "<i8")
            if len(retained) != m:
                raise HierarchyError(f"{path}: inconsistent retained list")
            dmap = DownsampleMap(retained, n_fine)
            rows_, cols_, nnz = struct.unpack("<qqq", fh.read(24))
            r = _read_array(fh, "<i4")
            c = _read_array(fh, "<i4")
            d = _read_array(fh, "<f8")
            if not (len(r) == len(c) == len(d) == nnz):
                raise HierarchyError(f"{path}: inconsistent up-sample triplets")
            umap = UpsampleMap(csr_matrix((d, (r, c)), shape=(rows_, cols_)))
            maps.append((dmap, umap))
    laplacians = [laplacian_for_mesh(m.triangles, m.n_vertices, kind)
                  for m in meshes]
    return MeshHierarchy(meshes, laplacians, maps, factor)
