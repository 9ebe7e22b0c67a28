import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from piescat.basis import (
    BcBasis,
    PulseBasis,
    RwgBasis,
    build_bc,
    divergence_map,
    eval_bc_on_tri,
    eval_rwg,
    gram_matrices,
)
from piescat.errors import OutOfSupport, RefinementMismatch
from piescat.mesh import TriangleMesh, barycentric_refine, make_box, make_sphere
from piescat.quadrature import triangle_rule


@pytest.fixture(scope="module")
def cube():
    return make_box(1.0, 1.0, 1.0, 1.0)


@pytest.fixture(scope="module")
def cube_rwg(cube):
    return RwgBasis(cube)


@pytest.fixture(scope="module")
def sphere2():
    return make_sphere(1.0, 2)


@pytest.fixture(scope="module")
def cube_bc(cube, cube_rwg):
    bary = barycentric_refine(cube)
    return bary, build_bc(cube_rwg, bary)


class TestRwg:
    def test_counts_closed_mesh(self, cube, cube_rwg):
        # closed surface: every edge interior, one function per edge
        assert cube_rwg.n_functions == cube.n_edges == 18

    def test_free_vertices_not_on_edge(self, cube, cube_rwg):
        for n in range(cube_rwg.n_functions):
            a, b = cube.edges[cube_rwg.edge_ids[n]]
            assert cube_rwg.free_plus[n] not in (a, b)
            assert cube_rwg.free_minus[n] not in (a, b)
            assert cube_rwg.tri_plus[n] < cube_rwg.tri_minus[n]

    def test_divergence_values(self, cube, cube_rwg):
        # div f = d/dr . (r - p)/(2A) = 2/(2A) on the plus side
        d = divergence_map(cube_rwg)
        for n in range(cube_rwg.n_functions):
            col = d.getcol(n).toarray().ravel()
            tp, tm = cube_rwg.tri_plus[n], cube_rwg.tri_minus[n]
            assert col[tp] == pytest.approx(1.0 / cube.areas[tp], rel=1e-14)
            assert col[tm] == pytest.approx(-1.0 / cube.areas[tm], rel=1e-14)
            mask = np.ones(cube.n_triangles, bool)
            mask[[tp, tm]] = False
            assert np.all(col[mask] == 0.0)

    def test_charge_neutrality(self, cube, cube_rwg):
        d = divergence_map(cube_rwg)
        sums = cube.areas @ d
        assert np.max(np.abs(sums)) < 1e-14

    def test_edge_flux_is_one(self, cube, cube_rwg):
        # integrate the cross-edge normal component along the shared edge
        xs, ws = np.polynomial.legendre.leggauss(6)
        for n in [0, 5, 11]:
            a, b = cube.vertices[cube.edges[cube_rwg.edge_ids[n]]]
            tang = b - a
            length = np.linalg.norm(tang)
            pts = a + np.outer((xs + 1) / 2, tang)
            tp = cube_rwg.tri_plus[n]
            outward = np.cross(tang / length, cube.normals[tp])
            # orient from plus triangle toward the edge
            if outward @ (0.5 * (a + b) - cube.centroids[tp]) < 0:
                outward = -outward
            vals = eval_rwg(cube_rwg, n, pts)
            flux = (length / 2) * np.sum(ws * (vals @ outward))
            assert flux == pytest.approx(1.0, abs=1e-12)

    def test_eval_off_support_zero_or_raises(self, cube, cube_rwg):
        far = np.array([[10.0, 10.0, 10.0]])
        assert np.all(eval_rwg(cube_rwg, 0, far) == 0.0)
        with pytest.raises(OutOfSupport):
            eval_rwg(cube_rwg, 0, far, strict=True)

    def test_eval_single_point_shape(self, cube, cube_rwg):
        c = cube.centroids[cube_rwg.tri_plus[0]]
        v = eval_rwg(cube_rwg, 0, c)
        assert v.shape == (3,)

    def test_normal_component_continuity(self, cube, cube_rwg):
        # the jump in the cross-edge component across the edge vanishes
        for n in [2, 7, 16]:
            a, b = cube.vertices[cube.edges[cube_rwg.edge_ids[n]]]
            mid = 0.37 * a + 0.63 * b
            tang = (b - a) / np.linalg.norm(b - a)
            tp, tm = cube_rwg.tri_plus[n], cube_rwg.tri_minus[n]
            for tri in (tp, tm):
                toward = cube.centroids[tri] - mid
                toward -= (toward @ tang) * tang
                toward /= np.linalg.norm(toward)
                v = eval_rwg(cube_rwg, n, mid + 1e-8 * toward)
                comp = v @ toward
                # leaving the plus side, entering the minus side
                expected = -1.0 if tri == tp else 1.0
                expected /= np.linalg.norm(b - a)
                assert comp == pytest.approx(expected, rel=1e-6)

    def test_value_scales_inversely_with_size(self, cube):
        s = 3.5
        big = TriangleMesh(cube.vertices * s, cube.triangles)
        rb = RwgBasis(big)
        rs = RwgBasis(cube)
        pt = cube.centroids[rs.tri_plus[4]]
        v1 = eval_rwg(rs, 4, pt)
        v2 = eval_rwg(rb, 4, pt * s)
        assert np.allclose(v2, v1 / s, rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(0, 17), u=st.floats(0.05, 0.9), v=st.floats(0.05, 0.9))
    def test_magnitude_bound(self, cube, cube_rwg, n, u, v):
        # |f| <= (largest vertex-opposite distance)/(2A) on its support
        if u + v > 0.95:
            u, v = 0.95 - v, 0.95 - u
        tri = cube_rwg.tri_plus[n]
        pts = cube.triangle_points(tri)
        p = (1 - u - v) * pts[0] + u * pts[1] + v * pts[2]
        val = eval_rwg(cube_rwg, n, p)
        diam = cube.triangle_diameters()[tri]
        assert np.linalg.norm(val) <= diam / (2 * cube.areas[tri]) + 1e-12


class TestPulse:
    def test_unit_and_normalized(self, cube):
        unit = PulseBasis(cube)
        norm = PulseBasis(cube, normalized=True)
        assert unit.n_functions == cube.n_triangles
        assert unit.value(3) == 1.0
        assert norm.value(3) == pytest.approx(1.0 / cube.areas[3])


class TestDivergenceMap:
    def test_shape_and_sparsity(self, cube, cube_rwg):
        d = divergence_map(cube_rwg)
        assert d.shape == (cube.n_triangles, cube_rwg.n_functions)
        assert d.nnz == 2 * cube_rwg.n_functions

    def test_scaling(self, cube, cube_rwg):
        s = 2.0
        big = RwgBasis(TriangleMesh(cube.vertices * s, cube.triangles))
        d1 = divergence_map(cube_rwg).toarray()
        d2 = divergence_map(big).toarray()
        assert np.allclose(d2, d1 / s**2, rtol=1e-12)


class TestBcConstruction:
    def test_count(self, cube_rwg, cube_bc):
        _, bc = cube_bc
        assert bc.n_functions == cube_rwg.n_functions

    def test_divergence_pattern(self, cube, cube_rwg, cube_bc):
        # +-1/|dual cell| on the two vertex fans, zero elsewhere
        bary, bc = cube_bc
        bary_rwg = RwgBasis(bary)
        d = divergence_map(bary_rwg)
        # vertex -> dual cell area
        cell = np.zeros(len(cube.vertices))
        for t, tri in enumerate(cube.triangles):
            cell[tri] += cube.areas[t] / 3.0
        for n in range(bc.n_functions):
            beta = bc.coeffs.getrow(n).toarray().ravel()
            div = d @ beta
            v1, v2 = cube.edges[cube_rwg.edge_ids[n]]
            expect = np.zeros(bary.n_triangles)
            for child in range(bary.n_triangles):
                verts = bary.triangles[child]
                if v1 in verts:
                    expect[child] = 1.0 / cell[v1]
                elif v2 in verts:
                    expect[child] = -1.0 / cell[v2]
            assert np.max(np.abs(div - expect)) < 1e-12

    def test_total_transported_charge(self, cube, cube_rwg, cube_bc):
        bary, bc = cube_bc
        bary_rwg = RwgBasis(bary)
        d = divergence_map(bary_rwg)
        for n in [0, 9, 17]:
            beta = bc.coeffs.getrow(n).toarray().ravel()
            charge = bary.areas * (d @ beta)
            pos = charge[charge > 0].sum()
            assert pos == pytest.approx(1.0, abs=1e-12)
            assert charge.sum() == pytest.approx(0.0, abs=1e-13)

    def test_support_is_two_fans(self, cube, cube_rwg, cube_bc):
        bary, bc = cube_bc
        for n in [1, 8]:
            v1, v2 = cube.edges[cube_rwg.edge_ids[n]]
            row = bc.coeffs.getrow(n)
            for j in row.indices:
                a, b = bary.edges[j]
                touching = {int(a), int(b)} & {int(v1), int(v2)}
                if not touching:
                    # only the two crossing edges avoid both endpoints
                    ei = cube_rwg.edge_ids[n]
                    m_e = bary.midpoint_of_edge[ei]
                    assert m_e in (a, b)

    def test_crossing_flux_half(self, cube, cube_rwg, cube_bc):
        bary, bc = cube_bc
        for n in [0, 13]:
            ei = cube_rwg.edge_ids[n]
            m_e = int(bary.midpoint_of_edge[ei])
            row = bc.coeffs.getrow(n).toarray().ravel()
            for tri in (cube.edge_tri_plus[ei], cube.edge_tri_minus[ei]):
                g = int(bary.centroid_of_tri[tri])
                a, b = min(m_e, g), max(m_e, g)
                (j,) = [jj for jj, e in enumerate(bary.edges)
                        if e[0] == a and e[1] == b]
                assert abs(row[j]) == pytest.approx(0.5, abs=1e-13)

    def test_refinement_mismatch(self, cube, cube_rwg):
        other = barycentric_refine(make_box(1.0, 1.0, 1.0, 0.5))
        with pytest.raises(RefinementMismatch):
            build_bc(cube_rwg, other)

    def test_eval_matches_coefficients(self, cube, cube_rwg, cube_bc):
        # pointwise evaluation agrees with summing refinement edge elements
        bary, bc = cube_bc
        bary_rwg = RwgBasis(bary)
        n = 5
        row = bc.coeffs.getrow(n).toarray().ravel()
        child = int(bary.edge_tri_plus[bary_rwg.edge_ids[
            np.flatnonzero(row)[0]]])
        pts = bary.centroids[child][None, :]
        direct = eval_bc_on_tri(bc, n, child, pts)
        summed = np.zeros((1, 3))
        for j in np.flatnonzero(row):
            summed += row[j] * eval_rwg(bary_rwg, j, pts)
        assert np.allclose(direct, summed, atol=1e-13)


class TestGram:
    def test_pulse_gram_identity(self, cube, cube_rwg):
        bary = barycentric_refine(cube)
        bc = build_bc(cube_rwg, bary)
        _, p = gram_matrices(cube_rwg, bc)
        assert (p != sp.identity(cube.n_triangles)).nnz == 0

    def test_mixed_gram_well_conditioned(self, sphere2):
        rwg = RwgBasis(sphere2)
        bary = barycentric_refine(sphere2)
        bc = build_bc(rwg, bary)
        ix, _ = gram_matrices(rwg, bc)
        assert ix.shape == (480, 480)
        cond = np.linalg.cond(ix.toarray())
        assert cond < 100.0

    def test_gram_against_quadrature(self, cube, cube_rwg):
        # brute-force the (n x f_m) . g_n product on each refinement child
        bary = barycentric_refine(cube)
        bc = build_bc(cube_rwg, bary)
        ix, _ = gram_matrices(cube_rwg, bc)
        rule = triangle_rule(10)
        m, n = 3, 3
        acc = 0.0
        for child in range(bary.n_triangles):
            parent = int(bary.parent_triangle[child])
            pts = rule.map_to(bary.vertices[bary.triangles[child]])
            try:
                fm = eval_rwg(cube_rwg, m, pts, strict=True)
            except OutOfSupport:
                continue
            gv = eval_bc_on_tri(bc, n, child, pts)
            rot = np.cross(cube.normals[parent], fm)
            acc += bary.areas[child] * np.einsum(
                "q,qi,qi->", rule.weights, rot, gv)
        assert ix[m, n] == pytest.approx(acc, rel=1e-12, abs=1e-14)
