import numpy as np
import pytest

from cmesh.hierarchy import (HierarchyError, build_hierarchy, load_hierarchy,
                             save_hierarchy)
from cmesh.mesh import ColouredMesh
from cmesh.sampling import (DecimationError, apply_down, apply_up,
                            build_upsample, decimate, quadric_error,
                            vertex_quadrics, _project_point_triangle)
from cmesh.templates import icosphere


def flat_grid(rows, cols, z=0.0):
    """Open planar grid mesh in the z=z plane."""
    r, c = np.meshgrid(np.linspace(0, 1, rows), np.linspace(0, 1, cols),
                       indexing="ij")
    pos = np.stack([r.ravel(), c.ravel(), np.full(rows * cols, z)], axis=1)
    tris = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a, b, cc, d = (i * cols + j, (i + 1) * cols + j,
                           i * cols + j + 1, (i + 1) * cols + j + 1)
            tris += [(a, b, cc), (cc, b, d)]
    col = np.full((rows * cols, 3), 0.5)
    return ColouredMesh(pos, col, np.array(tris, dtype=np.int64))


class TestQuadrics:
    def test_flat_patch_zero_error_in_plane(self):
        mesh = flat_grid(4, 4, z=0.25)
        quads = vertex_quadrics(mesh, boundary_weight=0.0)
        rng = np.random.default_rng(0)
        for v in range(mesh.n_vertices):
            p = np.array([rng.random(), rng.random(), 0.25])
            assert abs(quadric_error(quads[v], p)) < 1e-10

    def test_own_position_zero_error(self):
        mesh = icosphere(1)
        quads = vertex_quadrics(mesh, boundary_weight=0.0)
        for v in range(mesh.n_vertices):
            assert abs(quadric_error(quads[v], mesh.positions[v])) < 1e-10

    def test_right_triangle_plane_quadric(self):
        # unit right triangle in the z=1 plane: plane vector (0,0,1,-1)
        pos = np.array([[0, 0, 1], [1, 0, 1], [0, 1, 1]], float)
        mesh = ColouredMesh(pos, np.full((3, 3), 0.5), np.array([[0, 1, 2]]))
        quads = vertex_quadrics(mesh, boundary_weight=0.0)
        plane = np.array([0, 0, 1, -1.0])
        expect = np.outer(plane, plane)
        for v in range(3):
            assert np.allclose(quads[v], expect, atol=1e-12)

    def test_displacement_error_scales_with_h_squared(self):
        mesh = flat_grid(3, 3)
        quads = vertex_quadrics(mesh, boundary_weight=0.0)
        centre = 4  # interior vertex of the 3x3 grid
        tri_count = sum(1 for t in mesh.triangles if centre in t)
        for h in (0.1, 0.02):
            p = mesh.positions[centre] + np.array([0, 0, h])
            err = quadric_error(quads[centre], p)
            assert abs(err - h * h * tri_count) < 1e-10

    def test_zero_area_triangle_rejected(self):
        pos = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], float)
        mesh = ColouredMesh(pos, np.full((4, 3), 0.5),
                            np.array([[0, 1, 3], [0, 1, 2]]))
        with pytest.raises(DecimationError, match="zero area"):
            vertex_quadrics(mesh)


class TestPointTriangleProjection:
    def test_interior_point(self):
        a, b, c = np.eye(3)
        p = (a + b + c) / 3
        bary = _project_point_triangle(p, a, b, c)
        assert np.allclose(bary, [1 / 3] * 3)

    def test_clamps_outside_point(self):
        a = np.array([0.0, 0, 0]); b = np.array([1.0, 0, 0])
        c = np.array([0.0, 1, 0])
        bary = _project_point_triangle(np.array([-1.0, -1, 0]), a, b, c)
        assert np.allclose(bary, [1, 0, 0])

    def test_random_points_match_bruteforce(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b, c = rng.standard_normal((3, 3))
            p = rng.standard_normal(3)
            bary = _project_point_triangle(p, a, b, c)
            assert bary.min() >= -1e-12 and abs(bary.sum() - 1) < 1e-12
            proj = bary @ np.vstack([a, b, c])
            # brute-force grid over the simplex cannot beat the projection
            best = np.inf
            for u in np.linspace(0, 1, 41):
                for v in np.linspace(0, 1 - u, max(2, int(41 * (1 - u)) + 1)):
                    q = a * (1 - u - v) + b * u + c * v
                    best = min(best, np.sum((q - p) ** 2))
            assert np.sum((proj - p) ** 2) <= best + 1e-9


class TestDecimate:
    def test_coarse_positions_are_retained_fine_positions(self):
        mesh = icosphere(1)
        coarse, dmap, _ = decimate(mesh, 11)
        assert np.array_equal(coarse.positions, mesh.positions[dmap.retained])
        assert np.array_equal(coarse.colours, mesh.colours[dmap.retained])

    def test_icosphere_factor_four(self):
        mesh = icosphere(1)  # 42 vertices
        coarse, _, _ = decimate(mesh, int(np.ceil(42 / 4)))
        assert coarse.n_vertices == 11

    def test_downsample_map_is_binary_selection(self):
        mesh = icosphere(1)
        _, dmap, _ = decimate(mesh, 11)
        mat = dmap.matrix().toarray()
        assert np.array_equal(np.sort(np.unique(mat)), [0, 1])
        assert (mat.sum(axis=1) == 1).all()        # one 1 per row
        assert (mat.sum(axis=0) <= 1).all()        # at most one per column

    def test_coarse_mesh_is_valid(self):
        mesh = icosphere(2)
        coarse, _, _ = decimate(mesh, 41)
        # re-validate through the constructor
        ColouredMesh(coarse.positions, coarse.colours, coarse.triangles)

    def test_greedy_matches_rescan_oracle(self):
        """First collapse must be a minimum-cost edge (re-scan oracle)."""
        from cmesh.sampling import _edge_cost, _MeshState

        mesh = icosphere(1)
        state = _MeshState(mesh)
        costs = {}
        for tri in mesh.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[0], tri[2])):
                key = (min(int(a), int(b)), max(int(a), int(b)))
                costs[key] = _edge_cost(state, *key)[0]
        best = min(costs.values())

        coarse, dmap, _ = decimate(mesh, mesh.n_vertices - 1)
        gone = set(range(mesh.n_vertices)) - set(dmap.retained.tolist())
        assert len(gone) == 1
        gone = gone.pop()
        # the discarded vertex must participate in some minimum-cost edge
        eligible = {k for k, v in costs.items() if abs(v - best) < 1e-12}
        assert any(gone in k for k in eligible)

    def test_flat_interior_collapses_before_corners(self):
        mesh = flat_grid(5, 5)
        coarse, dmap, _ = decimate(mesh, 13)
        corners = {0, 4, 20, 24}
        # corner vertices carry boundary quadrics in two directions: kept
        assert corners <= set(dmap.retained.tolist())

    def test_target_too_small(self):
        mesh = icosphere(1)
        with pytest.raises(DecimationError):
            decimate(mesh, 0)


class TestUpsample:
    def test_rows_sum_to_one(self):
        mesh = icosphere(2)
        coarse, dmap, records = decimate(mesh, 41)
        umap = build_upsample(records, dmap, coarse)
        sums = np.asarray(umap.matrix().sum(axis=1)).ravel()
        assert np.abs(sums - 1).max() < 1e-9

    def test_retained_rows_one_hot(self):
        mesh = icosphere(1)
        coarse, dmap, records = decimate(mesh, 11)
        umap = build_upsample(records, dmap, coarse).matrix()
        for i, f in enumerate(dmap.retained):
            row = umap.getrow(int(f)).toarray().ravel()
            assert row[i] == 1.0 and row.sum() == 1.0

    def test_discarded_rows_at_most_three_nonzeros(self):
        mesh = icosphere(2)
        coarse, dmap, records = decimate(mesh, 41)
        umap = build_upsample(records, dmap, coarse).matrix()
        nnz_per_row = np.diff(umap.indptr)
        assert nnz_per_row.max() <= 3
        data = umap.matrix() if hasattr(umap, "matrix") else umap
        assert umap.data.min() >= 0 and umap.data.max() <= 1 + 1e-12

    def test_explicit_barycentric_record(self):
        mesh = icosphere(1)
        coarse, dmap, records = decimate(mesh, 11)
        v, (tri_idx, bary) = next(iter(records.items()))
        umap = build_upsample(records, dmap, coarse).matrix()
        row = umap.getrow(v).toarray().ravel()
        for c, w in zip(coarse.triangles[tri_idx], bary):
            assert abs(row[c] - w) < 1e-12

    def test_up_of_down_identity_on_retained(self):
        mesh = icosphere(2)
        rng = np.random.default_rng(0)
        coarse, dmap, records = decimate(mesh, 41)
        umap = build_upsample(records, dmap, coarse)
        v = rng.standard_normal((mesh.n_vertices, 6))
        rec = apply_up(apply_down(v, dmap), umap)
        assert np.array_equal(rec[dmap.retained], v[dmap.retained])

    def test_constant_field_preserved(self):
        mesh = icosphere(1)
        coarse, dmap, records = decimate(mesh, 11)
        umap = build_upsample(records, dmap, coarse)
        up = apply_up(np.full((11, 2), 3.25), umap)
        assert np.abs(up - 3.25).max() < 1e-9

    def test_one_hot_extracts_column(self):
        mesh = icosphere(1)
        coarse, dmap, records = decimate(mesh, 11)
        umap = build_upsample(records, dmap, coarse)
        e3 = np.zeros((11, 1)); e3[3] = 1.0
        col = umap.matrix()[:, [3]].toarray()
        assert np.allclose(apply_up(e3, umap), col)

    def test_matches_dense_product(self):
        mesh = icosphere(2)
        rng = np.random.default_rng(7)
        coarse, dmap, records = decimate(mesh, 41)
        umap = build_upsample(records, dmap, coarse)
        vd = rng.standard_normal((41, 5))
        assert np.abs(apply_up(vd, umap)
                      - umap.matrix().toarray() @ vd).max() < 1e-12

    def test_affine_field_exact_on_coplanar_regions(self):
        mesh = flat_grid(6, 6)
        coarse, dmap, records = decimate(mesh, 12)
        umap = build_upsample(records, dmap, coarse)
        A = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
        b = np.array([0.25, -0.5])
        field = mesh.positions @ A + b
        rec = apply_up(apply_down(field, dmap), umap)
        assert np.abs(rec[dmap.retained] - field[dmap.retained]).max() == 0
        # coplanar discarded vertices are barycentric blends of an affine
        # field over the same plane, hence exact up to roundoff
        assert np.abs(rec - field).max() < 1e-9


class TestApplyDown:
    def test_identity_features(self):
        mesh = icosphere(1)
        _, dmap, _ = decimate(mesh, 11)
        eye = np.eye(42)
        sel = apply_down(eye, dmap)
        assert np.array_equal(sel, eye[dmap.retained])

    def test_six_channels(self):
        mesh = icosphere(1)
        _, dmap, _ = decimate(mesh, 11)
        coarse_feats = apply_down(mesh.features(), dmap)
        assert coarse_feats.shape == (11, 6)

    def test_matches_gather_loop(self):
        mesh = icosphere(1)
        rng = np.random.default_rng(3)
        _, dmap, _ = decimate(mesh, 11)
        v = rng.standard_normal((42, 4))
        out = apply_down(v, dmap)
        for i, f in enumerate(dmap.retained):
            assert np.array_equal(out[i], v[f])

    def test_shape_mismatch(self):
        mesh = icosphere(1)
        _, dmap, _ = decimate(mesh, 11)
        with pytest.raises(DecimationError):
            apply_down(np.zeros((41, 3)), dmap)


class TestHierarchy:
    def test_level_sizes_follow_ceil_chain(self):
        mesh = icosphere(3)  # 642
        h = build_hierarchy(mesh, levels=2, factor=4)
        assert h.sizes == [642, 161, 41]

    def test_zero_levels(self):
        mesh = icosphere(1)
        h = build_hierarchy(mesh, levels=0)
        assert h.sizes == [42] and h.maps == []

    def test_too_small_mesh(self):
        mesh = icosphere(1)
        with pytest.raises(HierarchyError, match="too small"):
            build_hierarchy(mesh, levels=4, factor=4)

    def test_laplacians_match_levels(self):
        mesh = icosphere(2)
        h = build_hierarchy(mesh, levels=2, factor=4)
        for m, lap in zip(h.meshes, h.laplacians):
            assert lap.shape == (m.n_vertices, m.n_vertices)

    def test_roundtrip_container(self, tmp_path):
        mesh = icosphere(2)
        h = build_hierarchy(mesh, levels=2, factor=4)
        p = tmp_path / "h.cmdh"
        save_hierarchy(h, p)
        h2 = load_hierarchy(p)
        assert h2.sizes == h.sizes
        assert h2.fingerprint() == h.fingerprint()
        assert h2.meshes[0].landmark_pair == mesh.landmark_pair
        for (d1, u1), (d2, u2) in zip(h.maps, h2.maps):
            assert np.array_equal(d1.retained, d2.retained)
            assert (u1.matrix() != u2.matrix()).nnz == 0

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.cmdh"
        p.write_bytes(b"NOPE1234")
        with pytest.raises(HierarchyError, match="container"):
            load_hierarchy(p)

    def test_deterministic_rebuild(self):
        mesh = icosphere(2)
        f1 = build_hierarchy(mesh, levels=2).fingerprint()
        f2 = build_hierarchy(mesh, levels=2).fingerprint()
        assert f1 == f2
