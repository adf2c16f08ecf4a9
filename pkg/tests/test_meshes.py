import math

import numpy as np
import pytest

from advmesh import autodiff as ad
from advmesh.geom import Box3D, apply_mat4, mat4_identity, mat4_rot_z, mat4_translate
from advmesh.meshes import (
    AdvMesh,
    IsolatedVertex,
    Placement,
    deform,
    deform_tensor,
    laplacian_loss,
    laplacian_loss_tensor,
    make_icosphere,
    mesh_size_extent,
    place_on_roof,
)


def triangle_mesh(verts):
    verts = np.asarray(verts, dtype=np.float64)
    return AdvMesh(
        base_vertices=verts,
        displacements=np.zeros_like(verts),
        colors=np.full_like(verts, 0.5),
        faces=np.array([[0, 1, 2]]),
    )


class TestIcosphere:
    @pytest.mark.parametrize(
        "sub,nv,nf", [(0, 12, 20), (1, 42, 80), (2, 162, 320)]
    )
    def test_counts(self, sub, nv, nf):
        m = make_icosphere(0.4, sub)
        assert m.n_vertices == nv
        assert m.n_faces == nf

    def test_on_sphere_grey_zero_disp(self):
        m = make_icosphere(0.4, 2)
        r = np.linalg.norm(m.base_vertices, axis=1)
        assert np.allclose(r, 0.4, atol=1e-12)
        assert np.all(m.displacements == 0.0)
        assert np.all(m.colors == 0.5)

    def test_every_vertex_referenced_adjacency_symmetric(self):
        m = make_icosphere(0.4, 1)
        assert set(m.faces.ravel()) == set(range(m.n_vertices))
        adj = m.adjacency()
        for i, nb in enumerate(adj):
            for j in nb:
                assert i in adj[j]

    def test_bad_args(self):
        with pytest.raises(ValueError):
            make_icosphere(-1.0, 0)
        with pytest.raises(ValueError):
            make_icosphere(1.0, 7)


class TestDeform:
    def test_identity(self):
        m = make_icosphere(0.4, 1)
        p = Placement(mat4_identity(), Box3D((0, 0, 0), (1, 1, 1), 0.0))
        assert np.allclose(deform(m, p), m.base_vertices)

    def test_translation(self):
        m = make_icosphere(0.4, 1)
        p = Placement(mat4_translate([1, 2, 3]), Box3D((0, 0, 0), (1, 1, 1), 0.0))
        assert np.allclose(deform(m, p), m.base_vertices + [1, 2, 3])

    def test_rotated_displacement_matches_hand_multiply(self):
        m = make_icosphere(0.4, 0)
        disp = np.zeros((12, 3))
        disp[3] = [0.1, 0.0, 0.0]
        m = m.with_params(displacements=disp)
        T = mat4_rot_z(math.pi / 2)
        got = deform(m, Placement(T, Box3D((0, 0, 0), (1, 1, 1), 0.0)))
        expect = (m.base_vertices + disp) @ T[:3, :3].T
        assert np.allclose(got, expect, atol=1e-12)

    def test_linearity_in_displacement(self):
        # deform(a+b) = deform(a) + R @ b
        rng = np.random.default_rng(0)
        m = make_icosphere(0.4, 1)
        a = rng.normal(size=(m.n_vertices, 3)) * 0.05
        b = rng.normal(size=(m.n_vertices, 3)) * 0.05
        T = mat4_rot_z(0.7) @ mat4_translate([1, -2, 0.5])
        p = Placement(T, Box3D((0, 0, 0), (1, 1, 1), 0.0))
        lhs = deform(m.with_params(displacements=a + b), p)
        rhs = deform(m.with_params(displacements=a), p) + b @ T[:3, :3].T
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_deform_tensor_matches(self):
        rng = np.random.default_rng(1)
        m = make_icosphere(0.4, 1)
        disp = rng.normal(size=(m.n_vertices, 3)) * 0.05
        T = mat4_rot_z(0.3) @ mat4_translate([2, 1, 0])
        p = Placement(T, Box3D((0, 0, 0), (1, 1, 1), 0.0))
        got = deform_tensor(m, p, ad.Tensor(disp)).values
        assert np.allclose(got, deform(m.with_params(displacements=disp), p), atol=1e-12)


class TestPlacement:
    def test_tangency(self):
        box = Box3D((0, 0, 0.75), (3.9, 1.6, 1.5), 0.0)
        m = make_icosphere(0.4, 2)
        p = place_on_roof(box, m)
        world = deform(m, p)
        assert world[:, 2].min() == pytest.approx(box.top, abs=1e-9)
        assert np.allclose(world[:, :2].mean(axis=0), [0, 0], atol=1e-6)

    def test_yaw_rotation(self):
        box = Box3D((5, 2, 0.75), (3.9, 1.6, 1.5), math.pi / 2)
        m = make_icosphere(0.4, 1)
        p = place_on_roof(box, m)
        r = p.transform[:3, :3]
        assert np.allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_clearance_and_deformed_tangency(self):
        rng = np.random.default_rng(2)
        box = Box3D((8, -1, 0.6), (3.5, 1.7, 1.4), 0.4)
        m = make_icosphere(0.4, 1)
        m = m.with_params(displacements=rng.normal(size=(m.n_vertices, 3)) * 0.1)
        p = place_on_roof(box, m, clearance=0.05)
        world = deform(m, p)
        assert world[:, 2].min() == pytest.approx(box.top + 0.05, abs=1e-9)


class TestLaplacian:
    def test_coincident_zero(self):
        m = triangle_mesh(np.zeros((3, 3)))
        assert laplacian_loss(m) == pytest.approx(0.0, abs=1e-15)

    def test_equilateral_triangle(self):
        s = 1.0
        verts = [[0, 0, 0], [s, 0, 0], [s / 2, s * math.sqrt(3) / 2, 0]]
        assert laplacian_loss(triangle_mesh(verts)) == pytest.approx(9.0 / 4.0, abs=1e-12)

    def test_regular_tetrahedron(self):
        r = 0.7
        verts = np.array(
            [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
        )
        verts = verts / np.linalg.norm(verts[0]) * r
        m = AdvMesh(
            base_vertices=verts,
            displacements=np.zeros((4, 3)),
            colors=np.full((4, 3), 0.5),
            faces=np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]),
        )
        assert laplacian_loss(m) == pytest.approx(64 * r**2 / 9, abs=1e-9)

    def test_translation_invariance_and_scaling(self):
        rng = np.random.default_rng(3)
        m = make_icosphere(0.4, 1)
        m = m.with_params(displacements=rng.normal(size=(m.n_vertices, 3)) * 0.05)
        base = laplacian_loss(m)
        shifted = m.with_params(displacements=m.displacements + [1.0, -2.0, 3.0])
        assert abs(laplacian_loss(shifted) - base) < 1e-9
        s = 1.7
        scaled = AdvMesh(
            base_vertices=m.base_vertices * s,
            displacements=m.displacements * s,
            colors=m.colors,
            faces=m.faces,
        )
        assert laplacian_loss(scaled) == pytest.approx(s**2 * base, rel=1e-9)

    def test_isolated_vertex(self):
        m = AdvMesh(
            base_vertices=np.zeros((4, 3)),
            displacements=np.zeros((4, 3)),
            colors=np.full((4, 3), 0.5),
            faces=np.array([[0, 1, 2]]),
        )
        with pytest.raises(IsolatedVertex):
            laplacian_loss(m)

    def test_gradient_finite_diff(self):
        rng = np.random.default_rng(4)
        m = make_icosphere(0.4, 1)
        disp0 = rng.normal(size=(m.n_vertices, 3)) * 0.05

        def f(t):
            return laplacian_loss_tensor(m, t["disp"])

        report = ad.finite_diff_check(f, {"disp": disp0})
        assert report["max_rel_err"] <= 1e-6


class TestExtent:
    def test_sphere_diameter(self):
        m = make_icosphere(1.0, 2)
        ext = mesh_size_extent(m)
        assert np.allclose(ext, (2, 2, 2), atol=1e-9)

    def test_pushed_vertex(self):
        m = make_icosphere(0.4, 1)
        # push the vertex with the largest x by +0.5 along x
        i = int(np.argmax(m.base_vertices[:, 0]))
        disp = np.zeros((m.n_vertices, 3))
        disp[i] = [0.5, 0, 0]
        ext = mesh_size_extent(m.with_params(displacements=disp))
        assert ext[0] == pytest.approx(1.3, abs=1e-9)

    def test_random_matches_scan_oracle(self):
        rng = np.random.default_rng(5)
        m = make_icosphere(0.4, 1)
        m = m.with_params(displacements=rng.normal(size=(m.n_vertices, 3)) * 0.2)
        local = m.base_vertices + m.displacements
        oracle = tuple(
            max(p[k] for p in local) - min(p[k] for p in local) for k in range(3)
        )
        assert np.allclose(mesh_size_extent(m), oracle, atol=1e-12)
