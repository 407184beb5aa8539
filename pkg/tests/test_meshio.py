import numpy as np
import pytest

from cmesh.mesh import ColouredMesh
from cmesh.meshio import MeshParseError, load_mesh, save_mesh
from cmesh.templates import dome_grid, icosphere


@pytest.fixture
def mesh():
    return icosphere(1)


def assert_meshes_close(a, b, tol=1e-6):
    assert np.array_equal(a.triangles, b.triangles)
    assert np.abs(a.positions - b.positions).max() <= tol
    assert np.abs(a.colours - b.colours).max() <= tol


class TestPly:
    def test_ascii_roundtrip(self, mesh, tmp_path):
        p = tmp_path / "m.ply"
        save_mesh(mesh, p, binary=False)
        assert_meshes_close(load_mesh(p), mesh)

    def test_binary_roundtrip(self, mesh, tmp_path):
        p = tmp_path / "m.ply"
        save_mesh(mesh, p, binary=True)
        assert_meshes_close(load_mesh(p), mesh, tol=0)

    def test_small_handwritten_ply(self, tmp_path):
        txt = """ply
format ascii 1.0
element vertex 4
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
element face 2
property list uchar int vertex_indices
end_header
0 0 0 255 0 0
1 0 0 0 255 0
0 1 0 0 0 255
1 1 0 255 255 255
3 0 1 2
3 1 3 2
"""
        p = tmp_path / "hand.ply"
        p.write_text(txt)
        m = load_mesh(p)
        assert m.n_vertices == 4 and m.n_triangles == 2
        # uchar 255 normalizes to exactly 1.0
        assert m.colours[0, 0] == 1.0
        assert m.colours[3].tolist() == [1.0, 1.0, 1.0]

    def test_missing_colour_channels(self, tmp_path):
        txt = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
0 1 0
3 0 1 2
"""
        p = tmp_path / "nocolour.ply"
        p.write_text(txt)
        with pytest.raises(MeshParseError, match="colour"):
            load_mesh(p)

    def test_not_a_ply(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_text("hello world")
        with pytest.raises(MeshParseError, match="header"):
            load_mesh(p)

    def test_out_of_range_face_index(self, tmp_path):
        txt = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
element face 1
property list uchar int vertex_indices
end_header
0 0 0 1 1 1
1 0 0 1 1 1
0 1 0 1 1 1
3 0 1 7
"""
        p = tmp_path / "badidx.ply"
        p.write_text(txt)
        with pytest.raises(MeshParseError, match="outside"):
            load_mesh(p)

    def test_large_binary_preserves_count(self, tmp_path):
        mesh = dome_grid(33, 41)
        p = tmp_path / "grid.ply"
        save_mesh(mesh, p)
        m = load_mesh(p)
        assert m.n_vertices == 33 * 41


class TestObj:
    def test_roundtrip(self, mesh, tmp_path):
        p = tmp_path / "m.obj"
        save_mesh(mesh, p)
        assert_meshes_close(load_mesh(p), mesh)

    def test_vertex_line_parse(self, tmp_path):
        p = tmp_path / "t.obj"
        p.write_text("v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nf 1 2 3\n")
        m = load_mesh(p)
        assert np.array_equal(m.positions[0], [0, 0, 0])
        assert np.array_equal(m.colours[0], [1, 0, 0])
        assert np.array_equal(m.triangles, [[0, 1, 2]])

    def test_short_vertex_line_rejected(self, tmp_path):
        p = tmp_path / "t.obj"
        p.write_text("v 0 0 0\n")
        with pytest.raises(MeshParseError, match="6 values"):
            load_mesh(p)

    def test_error_names_line(self, tmp_path):
        p = tmp_path / "t.obj"
        p.write_text("v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv oops 1 0 0 0 1\n")
        with pytest.raises(MeshParseError, match=":3"):
            load_mesh(p)

    def test_zero_based_face_rejected(self, tmp_path):
        p = tmp_path / "t.obj"
        p.write_text("v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nf 0 1 2\n")
        with pytest.raises(MeshParseError, match="1-based"):
            load_mesh(p)


class TestSaveErrors:
    def test_empty_triangles_rejected(self, tmp_path):
        with pytest.raises(Exception):
            m = ColouredMesh(np.eye(3), np.zeros((3, 3)),
                             np.empty((0, 3), dtype=np.int64))
            save_mesh(m, tmp_path / "x.ply")

    def test_unknown_extension(self, mesh, tmp_path):
        with pytest.raises(MeshParseError, match="format"):
            save_mesh(mesh, tmp_path / "m.stl")
