"""Geometry IO, normalization, k-NN and sampling tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfenc.geometry import (
    Box,
    GeometryError,
    ParseError,
    PointCloud,
    TriangleMesh,
    build_knn_graph,
    load_geometry,
    normalize_to_unit_box,
    perturb_along_normals,
    sample_near_surface,
    sample_offsurface_uniform,
    sample_surface,
)

rng = np.random.default_rng(3)

CUBE_OBJ = """\
# unit cube
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 2 3
f 1 3 4
f 5 7 6
f 5 8 7
f 1 5 6
f 1 6 2
f 2 6 7
f 2 7 3
f 3 7 8
f 3 8 4
f 4 8 5
f 4 5 1
"""


class TestLoad:
    def test_xyz_two_points(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("0 0 0\n1 0 0\n")
        cloud = load_geometry(p)
        assert isinstance(cloud, PointCloud)
        assert len(cloud) == 2 and cloud.normals is None

    def test_xyz_with_normals_renormalized(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("0 0 0 0 0 2\n1 1 1 3 0 0\n")
        cloud = load_geometry(p)
        np.testing.assert_allclose(cloud.normals, [[0, 0, 1], [1, 0, 0]])

    def test_xyz_comments_and_blank_lines(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("# header\n\n1 2 3  # trailing\n")
        assert len(load_geometry(p)) == 1

    def test_xyz_malformed_reports_line(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("0 0 0\n1 2\n")
        with pytest.raises(ParseError, match=":2:"):
            load_geometry(p)

    def test_obj_cube(self, tmp_path):
        p = tmp_path / "cube.obj"
        p.write_text(CUBE_OBJ)
        mesh = load_geometry(p)
        assert isinstance(mesh, TriangleMesh)
        assert mesh.vertices.shape == (8, 3)
        assert mesh.triangles.shape == (12, 3)

    def test_obj_quad_fan_triangulated(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = load_geometry(p)
        assert mesh.triangles.shape == (2, 3)

    def test_obj_unsupported_element(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\ncurv 1 2\n")
        with pytest.raises(ParseError, match="curv"):
            load_geometry(p)

    def test_ply_roundtrip_of_vertices(self, tmp_path):
        p = tmp_path / "tri.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 3\n"
            "property float x\nproperty float y\nproperty float z\n"
            "element face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"
        )
        mesh = load_geometry(p)
        assert mesh.vertices.shape == (3, 3) and mesh.triangles.shape == (1, 3)

    def test_ply_non_triangle_face_rejected(self, tmp_path):
        p = tmp_path / "quad.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 4\n"
            "property float x\nproperty float y\nproperty float z\n"
            "element face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
        )
        with pytest.raises(ParseError, match="triangle"):
            load_geometry(p)


class TestNormalize:
    def test_span_maps_to_margin_box(self):
        pts = np.array([[0.0, 0, 0], [10, 10, 10]])
        cloud, tf = normalize_to_unit_box(PointCloud(pts))
        np.testing.assert_allclose(cloud.positions.min(0), [-0.95] * 3)
        np.testing.assert_allclose(cloud.positions.max(0), [0.95] * 3)

    def test_near_idempotent(self):
        pts = rng.uniform(-0.95, 0.95, size=(50, 3))
        pts[0] = [-0.95, -0.95, -0.95]
        pts[1] = [0.95, 0.95, 0.95]
        _, tf = normalize_to_unit_box(PointCloud(pts))
        assert 0.9 <= tf.scale <= 1.0

    def test_roundtrip(self):
        pts = rng.uniform(-5, 17, size=(100, 3))
        cloud, tf = normalize_to_unit_box(PointCloud(pts))
        back = tf.invert(cloud.positions)
        assert np.max(np.abs(back - pts)) <= 1e-9

    def test_degenerate_rejected(self):
        with pytest.raises(GeometryError, match="coincide"):
            normalize_to_unit_box(PointCloud(np.ones((4, 3))))


def brute_knn(pos: np.ndarray, k: int) -> np.ndarray:
    n = pos.shape[0]
    out = np.zeros((n, k), dtype=np.int64)
    for i in range(n):
        d = np.linalg.norm(pos - pos[i], axis=1)
        d[i] = np.inf
        order = np.lexsort((np.arange(n), d))
        out[i] = order[:k]
    return out


class TestKnn:
    def test_collinear_three_points(self):
        pos = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
        g = build_knn_graph(pos, k=1)
        np.testing.assert_array_equal(g.neighbors.ravel(), [1, 0, 1])

    def test_k_clamped_to_complete_graph(self):
        pos = rng.normal(size=(5, 3))
        with pytest.warns(UserWarning, match="clamped"):
            g = build_knn_graph(pos, k=10)
        assert g.k == 4
        for i in range(5):
            assert set(g.neighbors[i]) == set(range(5)) - {i}

    def test_matches_bruteforce_random(self):
        pos = rng.normal(size=(200, 3))
        g = build_knn_graph(pos, k=8)
        np.testing.assert_array_equal(np.sort(g.neighbors, 1), np.sort(brute_knn(pos, 8), 1))

    def test_no_self_edges_and_out_degree(self):
        pos = rng.normal(size=(40, 3))
        g = build_knn_graph(pos, k=5)
        assert g.neighbors.shape == (40, 5)
        assert np.all(g.neighbors != np.arange(40)[:, None])

    def test_duplicate_points_tie_rule(self):
        pos = np.array([[0.0, 0, 0], [0, 0, 0], [0, 0, 0], [5, 0, 0]])
        g = build_knn_graph(pos, k=1)
        # all three coincident points tie; lowest index (excluding self) wins
        np.testing.assert_array_equal(g.neighbors.ravel(), [1, 0, 0, 0])

    @settings(deadline=None, max_examples=20)
    @given(st.integers(min_value=5, max_value=60), st.integers(min_value=1, max_value=8),
           st.integers(min_value=0, max_value=2**31 - 1))
    def test_property_matches_bruteforce(self, n, k, seed):
        r = np.random.default_rng(seed)
        pos = r.normal(size=(n, 3))
        k = min(k, n - 1)
        g = build_knn_graph(pos, k=k)
        np.testing.assert_array_equal(np.sort(g.neighbors, 1), np.sort(brute_knn(pos, k), 1))


def sphere_mesh(radius=0.5, subdivisions=3) -> TriangleMesh:
    """Icosphere by subdivision; vertices projected onto the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    faces = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = verts_list[i] + verts_list[j]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces)
    return TriangleMesh(radius * verts, faces)


class TestSampling:
    def test_single_triangle(self):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        pts, nrm = sample_surface(mesh, 500, seed=0)
        assert np.all(pts[:, 2] == 0)
        assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 1] >= 0)
        assert np.all(pts[:, 0] + pts[:, 1] <= 1 + 1e-12)
        np.testing.assert_allclose(nrm, np.tile([0, 0, 1.0], (500, 1)))

    def test_area_weighting(self):
        # two right triangles with legs (1,1) and (2,3): areas 0.5 and 3
        mesh = TriangleMesh(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [7, 0, 0], [5, 3, 0]],
            [[0, 1, 2], [3, 4, 5]],
        )
        pts, _ = sample_surface(mesh, 10**5, seed=1)
        frac2 = np.mean(pts[:, 0] >= 4)
        expected = 3.0 / 3.5
        assert abs(frac2 - expected) <= 0.02

    def test_sphere_radius_statistic(self):
        mesh = sphere_mesh(radius=1.0, subdivisions=3)
        pts, _ = sample_surface(mesh, 20000, seed=2)
        assert abs(np.mean(np.linalg.norm(pts, axis=1)) - 1.0) <= 0.01

    def test_zero_area_rejected(self):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
        with pytest.warns(UserWarning):
            with pytest.raises(GeometryError, match="zero total area"):
                sample_surface(mesh, 10, seed=0)

    def test_uniform_count_zero(self):
        assert sample_offsurface_uniform(Box.unit(), 0, seed=0).shape == (0, 3)

    def test_uniform_statistics_and_containment(self):
        pts = sample_offsurface_uniform(Box.unit(), 10**5, seed=3)
        assert Box.unit().contains(pts)
        assert np.all(np.abs(pts.mean(axis=0)) <= 0.01)

    def test_near_surface_delta_zero(self):
        pts = rng.uniform(-0.5, 0.5, size=(20, 3))
        nrm = np.tile([0, 0, 1.0], (20, 1))
        out = sample_near_surface(pts, nrm, 0.0, seed=0)
        np.testing.assert_array_equal(out, pts)

    def test_near_surface_plane_band(self):
        pts = np.column_stack([rng.uniform(-0.5, 0.5, (300, 2)), np.zeros(300)])
        nrm = np.tile([0, 0, 1.0], (300, 1))
        out = sample_near_surface(pts, nrm, 0.1, seed=4)
        assert np.all(np.abs(out[:, 2]) <= 0.1)

    def test_near_surface_sphere_band(self):
        mesh = sphere_mesh(radius=0.5, subdivisions=2)
        pts, nrm = sample_surface(mesh, 2000, seed=5)
        out = sample_near_surface(pts, nrm, 0.1, seed=6)
        radii = np.linalg.norm(out, axis=1)
        # icosphere triangles are slightly inside the analytic sphere
        assert np.all(np.abs(radii - 0.5) <= 0.1 + 0.01)

    def test_near_surface_requires_normals(self):
        with pytest.raises(GeometryError, match="normals"):
            sample_near_surface(np.zeros((3, 3)), None, 0.1, seed=0)

    def test_perturb_sigma_zero_is_identity(self):
        pts = rng.normal(size=(10, 3))
        out = perturb_along_normals(pts, None, 0.0, seed=0)
        np.testing.assert_array_equal(out, pts)
        assert out is not pts

    def test_perturb_max_displacement(self):
        pts = rng.uniform(-0.5, 0.5, size=(1000, 3))
        nrm = rng.normal(size=(1000, 3))
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
        out = perturb_along_normals(pts, nrm, 5e-2, seed=1)
        assert np.max(np.linalg.norm(out - pts, axis=1)) <= 5e-2 + 1e-12

    def test_perturb_displacement_uniform(self):
        # flat plane far from the boundary, so no clamping interferes
        pts = np.column_stack([rng.uniform(-0.5, 0.5, (10**5, 2)), np.zeros(10**5)])
        nrm = np.tile([0, 0, 1.0], (10**5, 1))
        sigma = 5e-2
        disp = perturb_along_normals(pts, nrm, sigma, seed=2)[:, 2]
        u = np.sort((disp + sigma) / (2 * sigma))
        ecdf = np.arange(1, u.size + 1) / u.size
        ks = np.max(np.abs(ecdf - u))
        assert ks < 0.01

    def test_reproducible(self):
        mesh = sphere_mesh(subdivisions=2)
        a, na = sample_surface(mesh, 100, seed=42)
        b, nb = sample_surface(mesh, 100, seed=42)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(na, nb)

    def test_triangle_frequencies_multinomial(self):
        mesh = TriangleMesh(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 0, 0], [4, 0, 0], [3, 1, 0]],
            [[0, 1, 2], [3, 4, 5]],
        )
        areas, _ = mesh.face_areas_normals()
        p = areas / areas.sum()
        n = 20000
        pts, _ = sample_surface(mesh, n, seed=9)
        count1 = int(np.sum(pts[:, 0] >= 2))
        sigma = np.sqrt(n * p[1] * (1 - p[1]))
        assert abs(count1 - n * p[1]) <= 3 * sigma
