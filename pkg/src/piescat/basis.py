"""Surface basis functions: edge elements, pulses, and dual edge elements.

Conventions, fixed once and used everywhere:

  * Edge elements (one per interior mesh edge) carry no edge-length factor:
    on the plus triangle f(r) = (r - p_plus) / (2 A_plus) and the negative
    of the analogous expression on the minus side. Surface divergence is
    +-1/A on the two triangles and the total flux through the edge is 1.
    The plus triangle is the one with the lower triangle index.
  * Pulses are 1 on their triangle; their area-normalized variants divide
    by the triangle area so that <normalized pulse_s, pulse_t> = delta_st.
  * Dual edge elements live on the barycentric refinement. Each is a
    divergence-conforming current that moves unit charge from the dual
    cell of the edge's lower-index endpoint to that of the other endpoint,
    built by solving the per-cell flux balance around each endpoint.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import OutOfSupport, RefinementMismatch, TopologyError
from .mesh import BarycentricMesh, TriangleMesh
from .quadrature import triangle_rule


class RwgBasis:
    """Divergence-conforming edge elements on a triangle mesh."""

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        ids = mesh.interior_edges
        self.edge_ids = ids
        self.tri_plus = mesh.edge_tri_plus[ids]
        self.tri_minus = mesh.edge_tri_minus[ids]
        self.lengths = mesh.edge_lengths[ids]
        edge_sum = mesh.edges[ids].sum(axis=1)
        self.free_plus = mesh.triangles[self.tri_plus].sum(axis=1) - edge_sum
        self.free_minus = mesh.triangles[self.tri_minus].sum(axis=1) - edge_sum

    @property
    def n_functions(self) -> int:
        return len(self.edge_ids)

    def triangle_term(self, n: int, tri: int):
        """(sign, free vertex position) of function n on triangle `tri`."""
        if self.tri_plus[n] == tri:
            return 1.0, self.mesh.vertices[self.free_plus[n]]
        if self.tri_minus[n] == tri:
            return -1.0, self.mesh.vertices[self.free_minus[n]]
        raise OutOfSupport(f"function {n} has no support on triangle {tri}")


def _barycentric_coords(tri_pts, pts):
    """Affine coordinates of pts w.r.t. a triangle, plus plane distance."""
    e1 = tri_pts[1] - tri_pts[0]
    e2 = tri_pts[2] - tri_pts[0]
    nvec = np.cross(e1, e2)
    nn = np.linalg.norm(nvec)
    nhat = nvec / nn
    rel = pts - tri_pts[0]
    h = rel @ nhat
    # solve [e1 e2] [u v]^T = in-plane component
    g11, g12, g22 = e1 @ e1, e1 @ e2, e2 @ e2
    det = g11 * g22 - g12 * g12
    b1 = rel @ e1
    b2 = rel @ e2
    u = (g22 * b1 - g12 * b2) / det
    v = (g11 * b2 - g12 * b1) / det
    lam = np.column_stack([1.0 - u - v, u, v])
    return lam, h


def eval_rwg(basis: RwgBasis, n: int, points, strict: bool = False):
    """Evaluate edge element n at points; zero (or raise) off-support.

    With strict=True an observation point outside the two supporting
    triangles raises OutOfSupport instead of contributing zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros((len(pts), 3))
    mesh = basis.mesh
    scale = np.sqrt(mesh.areas[basis.tri_plus[n]])
    covered = np.zeros(len(pts), dtype=bool)
    for tri, free, sign in (
        (basis.tri_plus[n], basis.free_plus[n], 1.0),
        (basis.tri_minus[n], basis.free_minus[n], -1.0),
    ):
        tri_pts = mesh.triangle_points(tri)
        lam, h = _barycentric_coords(tri_pts, pts)
        inside = (np.abs(h) < 1e-9 * scale) & np.all(lam > -1e-9, axis=1)
        take = inside & ~covered
        out[take] = sign * (pts[take] - mesh.vertices[free]) / (
            2.0 * mesh.areas[tri])
        covered |= inside
    if strict and not covered.all():
        raise OutOfSupport(
            f"{(~covered).sum()} point(s) outside the support of function {n}")
    if np.asarray(points).ndim == 1:
        return out[0]
    return out


class PulseBasis:
    """Per-triangle pulses; `normalized` divides by triangle area."""

    def __init__(self, mesh: TriangleMesh, normalized: bool = False):
        self.mesh = mesh
        self.normalized = bool(normalized)

    @property
    def n_functions(self) -> int:
        return self.mesh.n_triangles

    def value(self, t: int) -> float:
        return 1.0 / self.mesh.areas[t] if self.normalized else 1.0


def divergence_map(basis: RwgBasis) -> sp.csr_matrix:
    """Sparse (n_triangles x n_functions) surface-divergence matrix.

    Column n holds +1/A on the plus triangle and -1/A on the minus one, so
    multiplying by edge-element coefficients yields per-triangle charge
    densities. Rows weighted by areas sum to zero (charge neutrality).
    """
    mesh = basis.mesh
    ne = basis.n_functions
    rows = np.concatenate([basis.tri_plus, basis.tri_minus])
    cols = np.concatenate([np.arange(ne), np.arange(ne)])
    vals = np.concatenate([1.0 / mesh.areas[basis.tri_plus],
                           -1.0 / mesh.areas[basis.tri_minus]])
    return sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_triangles, ne))


# ---------------------------------------------------------------------------
# dual (barycentric-refinement) basis
# ---------------------------------------------------------------------------


class BcBasis:
    """Dual edge elements expressed in the refinement's edge elements.

    coeffs[n, j] is the coefficient of barycentric edge element j (indexed
    by refinement interior edge) in dual function n; function n is attached
    to parent interior edge n in `RwgBasis` ordering.
    """

    def __init__(self, parent_basis: RwgBasis, bary: BarycentricMesh,
                 coeffs: sp.csr_matrix):
        self.parent_basis = parent_basis
        self.bary = bary
        self.coeffs = coeffs

    @property
    def n_functions(self) -> int:
        return self.coeffs.shape[0]


def _children_at_vertex(bary: BarycentricMesh, tri: int, vertex: int):
    """The two refinement children of `tri` containing parent vertex."""
    a, b, c = bary.parent.triangles[tri]
    base = 6 * tri
    if vertex == a:
        return base + 0, base + 5
    if vertex == b:
        return base + 1, base + 2
    if vertex == c:
        return base + 3, base + 4
    raise ValueError(f"vertex {vertex} not in triangle {tri}")


def _child_with_midpoint(bary: BarycentricMesh, tri: int, vertex: int,
                         mid_vertex: int) -> int:
    for child in _children_at_vertex(bary, tri, vertex):
        if mid_vertex in bary.triangles[child]:
            return int(child)
    raise ValueError("no child holds the requested midpoint")


def build_bc(parent_basis: RwgBasis, bary: BarycentricMesh) -> BcBasis:
    """Construct the dual basis by balancing fluxes around each dual cell.

    For parent edge (v1, v2) (v1 the lower vertex index), the function
    carries divergence +1/|cell(v1)| on the refinement triangles of the
    dual cell around v1 and -1/|cell(v2)| around v2. Half the unit charge
    crosses each of the two midpoint-centroid edges separating the cells;
    the in-fan spoke fluxes follow from per-triangle conservation with the
    circulation nullspace fixed to zero mean.
    """
    mesh = parent_basis.mesh
    if bary.parent is not mesh:
        raise RefinementMismatch(
            "refinement was not built from this basis's mesh")
    if len(mesh.interior_edges) != mesh.n_edges:
        raise TopologyError("dual basis requires a closed surface")

    bary_edge_index = {(int(a), int(b)): i for i, (a, b) in enumerate(bary.edges)}

    def edge_of(u, w):
        return bary_edge_index[(u, w) if u < w else (w, u)]

    # parent edge key -> parent edge index, and vertex fans
    parent_edge_of = {}
    for ei, (a, b) in enumerate(mesh.edges):
        parent_edge_of[(int(a), int(b))] = ei
        parent_edge_of[(int(b), int(a))] = ei

    def other_edge_at(tri: int, vertex: int, edge: int):
        a, b = mesh.edges[edge]
        third = int(mesh.triangles[tri].sum() - a - b)
        return parent_edge_of[(int(vertex), third)]

    def other_tri_of(edge: int, tri: int) -> int:
        tp, tm = mesh.edge_tri_plus[edge], mesh.edge_tri_minus[edge]
        return int(tm if tp == tri else tp)

    rows, cols, vals = [], [], []

    def add(n, bary_edge, flux, from_child):
        # coefficient sign: positive flux runs plus -> minus triangle
        if bary.edge_tri_plus[bary_edge] == from_child:
            vals.append(flux)
        else:
            vals.append(-flux)
        rows.append(n)
        cols.append(bary_edge)

    n_parent = parent_basis.n_functions
    for n in range(n_parent):
        edge = int(parent_basis.edge_ids[n])
        v1, v2 = (int(x) for x in mesh.edges[edge])
        tri_p = int(mesh.edge_tri_plus[edge])
        tri_m = int(mesh.edge_tri_minus[edge])
        m_e = int(bary.midpoint_of_edge[edge])

        # half the charge crosses each midpoint-centroid edge, v1 -> v2 side
        for tri in (tri_p, tri_m):
            g = int(bary.centroid_of_tri[tri])
            sender = _child_with_midpoint(bary, tri, v1, m_e)
            add(n, edge_of(m_e, g), 0.5, sender)

        for vertex, charge_sign in ((v1, 1.0), (v2, -1.0)):
            # walk the triangle fan around the vertex starting across `edge`
            fan: list[tuple[int, int, int]] = []  # (tri, entry edge, exit edge)
            tri, entry = tri_p, edge
            for _ in range(3 * mesh.n_triangles):
                exit_e = other_edge_at(tri, vertex, entry)
                fan.append((tri, entry, exit_e))
                tri = other_tri_of(exit_e, tri)
                entry = exit_e
                if tri == tri_p and entry == edge:
                    break
            else:
                raise TopologyError("vertex fan failed to close")

            cell_area = sum(mesh.areas[t] for t, _, _ in fan) / 3.0

            children: list[int] = []
            spokes: list[int] = []  # spoke i sits between child i and i+1
            for tri, entry, exit_e in fan:
                first = _child_with_midpoint(
                    bary, tri, vertex, int(bary.midpoint_of_edge[entry]))
                second = _child_with_midpoint(
                    bary, tri, vertex, int(bary.midpoint_of_edge[exit_e]))
                children.extend((first, second))
                spokes.append(edge_of(vertex, int(bary.centroid_of_tri[tri])))
                spokes.append(
                    edge_of(vertex, int(bary.midpoint_of_edge[exit_e])))

            balance = charge_sign * bary.areas[children] / cell_area
            balance[0] -= charge_sign * 0.5     # crossing flux at the ends
            balance[-1] -= charge_sign * 0.5
            x = np.cumsum(balance)
            x -= x.mean()
            for i, spoke in enumerate(spokes):
                add(n, spoke, x[i], children[i])

    coeffs = sp.csr_matrix(
        (vals, (rows, cols)), shape=(n_parent, bary.n_edges))
    coeffs.sum_duplicates()
    return BcBasis(parent_basis, bary, coeffs)


def eval_bc_on_tri(bc: BcBasis, n: int, bary_tri: int, points):
    """Evaluate dual function n at points lying on one refinement triangle."""
    bary = bc.bary
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros((len(pts), 3), dtype=float)
    tri_verts = bary.triangles[bary_tri]
    area = bary.areas[bary_tri]
    row = bc.coeffs.getrow(n)
    for j, beta in zip(row.indices, row.data):
        a, b = bary.edges[j]
        if bary.edge_tri_plus[j] == bary_tri:
            sign = 1.0
        elif bary.edge_tri_minus[j] == bary_tri:
            sign = -1.0
        else:
            continue
        free = int(tri_verts.sum() - a - b)
        out += beta * sign * (pts - bary.vertices[free]) / (2.0 * area)
    return out


# ---------------------------------------------------------------------------
# Gram matrices
# ---------------------------------------------------------------------------


def gram_matrices(rwg: RwgBasis, bc: BcBasis, order: int = 5):
    """Identity-operator pairings between the surface function families.

    Returns three matrices: the rotated pairing with entries
    int (n x f_m) . g_n, the plain overlap with entries int f_m . g_n
    (both assembled exactly per refinement triangle), and the
    normalized-pulse x pulse Gram, which is the identity by the
    normalization choice.
    """
    mesh = rwg.mesh
    bary = bc.bary
    if bary.parent is not mesh:
        raise RefinementMismatch("dual basis refinement mismatch")
    rule = triangle_rule(order)

    # parent triangle -> edge elements with support there
    tri_rwg: list[list[tuple[int, float, int]]] = [[] for _ in range(mesh.n_triangles)]
    for m in range(rwg.n_functions):
        tri_rwg[rwg.tri_plus[m]].append((m, 1.0, rwg.free_plus[m]))
        tri_rwg[rwg.tri_minus[m]].append((m, -1.0, rwg.free_minus[m]))

    coeffs_by_edge = bc.coeffs.tocsc()
    edge_index = {(int(a), int(b)): j for j, (a, b) in enumerate(bary.edges)}

    rows, cols, vals = [], [], []
    for t in range(bary.n_triangles):
        parent = int(bary.parent_triangle[t])
        nhat = mesh.normals[parent]
        tri_pts = bary.vertices[bary.triangles[t]]
        pts = rule.map_to(tri_pts)
        area = bary.areas[t]
        tvs = int(bary.triangles[t].sum())

        # dual functions overlapping this refinement triangle
        locals_: dict[int, np.ndarray] = {}
        for a, b in ((0, 1), (1, 2), (2, 0)):
            u, w = int(bary.triangles[t][a]), int(bary.triangles[t][b])
            j = edge_index[(u, w) if u < w else (w, u)]
            sign = 1.0 if bary.edge_tri_plus[j] == t else -1.0
            free = bary.vertices[tvs - u - w]
            fvals = sign * (pts - free) / (2.0 * area)
            col = coeffs_by_edge.getcol(j)
            for nfun, beta in zip(col.indices, col.data):
                cur = locals_.get(nfun)
                contrib = beta * fvals
                locals_[nfun] = contrib if cur is None else cur + contrib

        for m, sgn, fv in tri_rwg[parent]:
            fm = sgn * (pts - mesh.vertices[fv]) / (2.0 * mesh.areas[parent])
            rot = np.cross(nhat, fm)
            for nfun, gv in locals_.items():
                val = area * np.einsum("q,qi,qi->", rule.weights, rot, gv)
                rows.append(m)
                cols.append(nfun)
                vals.append(val)

    ix = sp.csr_matrix((vals, (rows, cols)),
                       shape=(rwg.n_functions, bc.n_functions))
    ix.sum_duplicates()
    p = sp.identity(mesh.n_triangles, format="csr")
    return ix, p
