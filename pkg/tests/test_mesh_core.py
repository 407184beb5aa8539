import numpy as np
import pytest

from cmesh.graph import (COMBINATORIAL, NORMALIZED, LaplacianError,
                         build_laplacian, estimate_lambda_max,
                         laplacian_for_mesh, scale_laplacian)
from cmesh.mesh import (ColouredMesh, MeshError, build_adjacency, degrees,
                        mae_texture, nme_shape)
from cmesh.templates import icosphere
from scipy.sparse import csr_matrix, identity


def tiny_mesh():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    col = np.full((4, 3), 0.5)
    tris = np.array([[0, 1, 2], [1, 3, 2]])
    return ColouredMesh(pos, col, tris, landmark_pair=(0, 3))


def random_connected_adjacency(rng, n):
    # random spanning tree plus extra edges keeps the graph connected
    rows, cols = [], []
    for v in range(1, n):
        u = int(rng.integers(0, v))
        rows += [u, v]
        cols += [v, u]
    for _ in range(n):
        u, v = rng.integers(0, n, 2)
        if u != v:
            rows += [int(u), int(v)]
            cols += [int(v), int(u)]
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.setdiag(0)
    adj.eliminate_zeros()
    return adj


class TestColouredMesh:
    def test_valid_mesh(self):
        m = tiny_mesh()
        assert m.n_vertices == 4 and m.n_triangles == 2

    def test_rejects_out_of_range_index(self):
        with pytest.raises(MeshError, match="outside"):
            ColouredMesh(np.zeros((3, 3)), np.zeros((3, 3)),
                         np.array([[0, 1, 5]]))

    def test_rejects_degenerate_triangle(self):
        pos = np.eye(3)
        with pytest.raises(MeshError, match="degenerate"):
            ColouredMesh(pos, np.zeros((3, 3)), np.array([[0, 1, 1]]))

    def test_rejects_duplicate_triangles(self):
        pos = np.eye(3)
        with pytest.raises(MeshError, match="duplicate"):
            ColouredMesh(pos, np.zeros((3, 3)),
                         np.array([[0, 1, 2], [2, 1, 0]]))

    def test_rejects_colour_out_of_range(self):
        pos = np.eye(3)
        with pytest.raises(MeshError, match="colours"):
            ColouredMesh(pos, np.full((3, 3), 1.5), np.array([[0, 1, 2]]))

    def test_rejects_disconnected(self):
        pos = np.vstack([np.eye(3), np.eye(3) + 5])
        tris = np.array([[0, 1, 2], [3, 4, 5]])
        with pytest.raises(MeshError, match="connected"):
            ColouredMesh(pos, np.full((6, 3), 0.5), tris)

    def test_features_roundtrip(self):
        m = tiny_mesh()
        m2 = ColouredMesh.from_features(m.features(), m.triangles,
                                        landmark_pair=m.landmark_pair)
        assert np.array_equal(m2.positions, m.positions)
        assert np.array_equal(m2.colours, m.colours)


class TestAdjacency:
    def test_single_triangle_is_k3(self):
        adj = build_adjacency(np.array([[0, 1, 2]]), 3)
        expect = np.ones((3, 3)) - np.eye(3)
        assert np.array_equal(adj.toarray(), expect)

    def test_two_triangles_degree_vector(self):
        # triangles (0,1,2) and (1,3,2) share edge (1,2)
        adj = build_adjacency(np.array([[0, 1, 2], [1, 3, 2]]), 4)
        assert np.array_equal(degrees(adj), [2, 3, 3, 2])

    def test_duplicate_triangles_idempotent(self):
        t = np.array([[0, 1, 2]])
        a1 = build_adjacency(t, 3)
        a2 = build_adjacency(np.vstack([t, t]), 3)
        assert np.array_equal(a1.toarray(), a2.toarray())

    def test_index_out_of_range(self):
        with pytest.raises(MeshError):
            build_adjacency(np.array([[0, 1, 9]]), 3)


def three_cycle():
    return build_adjacency(np.array([[0, 1, 2]]), 3)


class TestLaplacian:
    def test_combinatorial_three_cycle(self):
        lap = build_laplacian(three_cycle(), COMBINATORIAL)
        expect = np.array([[2, -1, -1], [-1, 2, -1], [-1, -1, 2]], float)
        assert np.allclose(lap.matrix.toarray(), expect)

    def test_normalized_single_edge(self):
        adj = csr_matrix(np.array([[0, 1], [1, 0]], float))
        lap = build_laplacian(adj, NORMALIZED)
        assert np.allclose(lap.matrix.toarray(), [[1, -1], [-1, 1]])

    def test_normalized_three_cycle_eigenvalues(self):
        lap = build_laplacian(three_cycle(), NORMALIZED)
        eig = np.sort(np.linalg.eigvalsh(lap.matrix.toarray()))
        assert np.allclose(eig, [0.0, 1.5, 1.5], atol=1e-12)
        assert abs(lap.lambda_max - 1.5) < 1e-6

    def test_isolated_vertex_rejected_for_normalized(self):
        adj = csr_matrix((np.ones(2), ([0, 1], [1, 0])), shape=(3, 3))
        with pytest.raises(LaplacianError, match="isolated"):
            build_laplacian(adj, NORMALIZED)

    def test_combinatorial_row_sums_and_psd(self):
        rng = np.random.default_rng(3)
        for n in (5, 12, 30):
            adj = random_connected_adjacency(rng, n)
            lap = build_laplacian(adj, COMBINATORIAL)
            rows = np.asarray(lap.matrix.sum(axis=1)).ravel()
            assert np.abs(rows).max() < 1e-12
            for _ in range(100):
                x = rng.standard_normal(n)
                assert x @ (lap.matrix @ x) >= -1e-12

    def test_normalized_spectrum_in_zero_two(self):
        rng = np.random.default_rng(4)
        for n in (6, 18, 30):
            adj = random_connected_adjacency(rng, n)
            lap = build_laplacian(adj, NORMALIZED)
            eig = np.linalg.eigvalsh(lap.matrix.toarray())
            assert eig.min() > -1e-10 and eig.max() < 2 + 1e-10


class TestLambdaMax:
    def test_single_edge_combinatorial(self):
        adj = csr_matrix(np.array([[0, 1], [1, 0]], float))
        lap = build_laplacian(adj, COMBINATORIAL)
        assert abs(lap.lambda_max - 2.0) < 1e-6

    def test_matches_dense_solver(self):
        rng = np.random.default_rng(5)
        for n in (10, 40, 80):
            adj = random_connected_adjacency(rng, n)
            lap = build_laplacian(adj, NORMALIZED)
            truth = np.linalg.eigvalsh(lap.matrix.toarray())[-1]
            assert abs(lap.lambda_max - truth) <= 1e-6 * truth
            assert lap.lambda_max <= 2 + 1e-6


class TestScaleLaplacian:
    def test_identity_with_lambda_two(self):
        eye = identity(4, format="csr")
        out = scale_laplacian(eye, 2.0)
        assert np.allclose(out.toarray(), np.zeros((4, 4)))

    def test_zero_matrix(self):
        out = scale_laplacian(csr_matrix((3, 3)), 1.0)
        assert np.allclose(out.toarray(), -np.eye(3))

    def test_three_cycle_dense_oracle(self):
        lap = build_laplacian(three_cycle(), NORMALIZED)
        out = scale_laplacian(lap.matrix, 1.5)
        expect = 2.0 * lap.matrix.toarray() / 1.5 - np.eye(3)
        assert np.allclose(out.toarray(), expect, atol=1e-14)

    def test_rejects_nonpositive_lambda(self):
        with pytest.raises(LaplacianError):
            scale_laplacian(identity(3, format="csr"), 0.0)

    def test_scaled_spectrum_in_unit_interval(self):
        rng = np.random.default_rng(6)
        for n in (8, 20, 30):
            adj = random_connected_adjacency(rng, n)
            lap = build_laplacian(adj, NORMALIZED)
            truth = np.linalg.eigvalsh(lap.matrix.toarray())[-1]
            eig = np.linalg.eigvalsh(scale_laplacian(lap.matrix,
                                                     truth).toarray())
            assert eig.min() >= -1 - 1e-9 and eig.max() <= 1 + 1e-9


class TestMetrics:
    def test_nme_identity_is_zero(self):
        m = tiny_mesh()
        assert nme_shape(m, m) == 0.0

    def test_nme_single_offset(self):
        rng = np.random.default_rng(0)
        mesh = icosphere(1)
        gt = ColouredMesh(mesh.positions, mesh.colours, mesh.triangles,
                          landmark_pair=(0, 1))
        iod = gt.interocular_distance()
        pred_pos = gt.positions.copy()
        # one of n vertices offset by exactly iod -> NME = 1/n
        pred_pos[5] += np.array([iod, 0, 0])
        pred = gt.with_vertex_data(positions=pred_pos, validate=False)
        assert abs(nme_shape(pred, gt) - 1.0 / gt.n_vertices) < 1e-12

    def test_nme_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        gt = icosphere(1)
        pred = gt.with_vertex_data(
            positions=gt.positions + 0.01 * rng.standard_normal((42, 3)),
            validate=False)
        iod = gt.interocular_distance()
        total = 0.0
        for i in range(42):
            d = 0.0
            for k in range(3):
                d += (pred.positions[i, k] - gt.positions[i, k]) ** 2
            total += np.sqrt(d)
        expect = total / 42 / iod
        assert abs(nme_shape(pred, gt) - expect) < 1e-12

    def test_nme_requires_landmarks(self):
        m = tiny_mesh()
        bare = ColouredMesh(m.positions, m.colours, m.triangles)
        with pytest.raises(MeshError):
            nme_shape(m, bare)

    def test_mae_constant_offset(self):
        m = tiny_mesh()
        shifted = m.with_vertex_data(colours=m.colours + 0.5, validate=False)
        assert abs(mae_texture(shifted, m) - 0.5) < 1e-12

    def test_mae_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        gt = tiny_mesh()
        pred = gt.with_vertex_data(colours=rng.random((4, 3)), validate=False)
        total = sum(abs(pred.colours[i, k] - gt.colours[i, k])
                    for i in range(4) for k in range(3))
        assert abs(mae_texture(pred, gt) - total / 12) < 1e-12

    def test_metrics_permutation_invariant(self):
        rng = np.random.default_rng(9)
        gt = icosphere(1)
        pred = gt.with_vertex_data(
            positions=gt.positions + 0.01 * rng.standard_normal((42, 3)),
            colours=np.clip(gt.colours + 0.05 * rng.standard_normal((42, 3)),
                            0, 1),
            validate=False)
        perm = rng.permutation(42)
        inv = np.argsort(perm)
        remap = inv[gt.triangles]
        lm = (int(inv[gt.landmark_pair[0]]), int(inv[gt.landmark_pair[1]]))
        gt_p = ColouredMesh(gt.positions[perm], gt.colours[perm], remap,
                            landmark_pair=lm)
        pred_p = ColouredMesh(pred.positions[perm], pred.colours[perm], remap,
                              landmark_pair=lm, validate=False)
        assert abs(nme_shape(pred, gt) - nme_shape(pred_p, gt_p)) < 1e-12
        assert abs(mae_texture(pred, gt) - mae_texture(pred_p, gt_p)) < 1e-12

    def test_metrics_zero_iff_equal(self):
        m = tiny_mesh()
        other = m.with_vertex_data(positions=m.positions + 1e-9,
                                   validate=False)
        assert nme_shape(other, m) > 0
        assert nme_shape(m, m) == 0.0


class TestLaplacianForMesh:
    def test_matches_manual_path(self):
        m = icosphere(1)
        lap = laplacian_for_mesh(m.triangles, m.n_vertices, NORMALIZED)
        adj = build_adjacency(m.triangles, m.n_vertices)
        lap2 = build_laplacian(adj, NORMALIZED)
        assert np.allclose(lap.matrix.toarray(), lap2.matrix.toarray())

    def test_lambda_max_estimator_direct(self):
        m = icosphere(2)
        lap = laplacian_for_mesh(m.triangles, m.n_vertices, NORMALIZED)
        truth = np.linalg.eigvalsh(lap.matrix.toarray())[-1]
        est = estimate_lambda_max(lap.matrix)
        assert abs(est - truth) <= 1e-6 * truth
