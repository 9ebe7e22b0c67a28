"""Closed oriented triangle meshes: ingestion, validation, refinement, generators.

Conventions:
  * triangles are counterclockwise as seen from outside (outward normals),
  * edges are stored with vertex pair (v1, v2), v1 < v2,
  * for interior edges, the "plus" triangle is the adjacent one with the
    lower triangle index (this fixes the RWG current direction downstream).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateError, InvalidGeometry, ParseError, TopologyError

_AREA_EPS = 1e-14  # relative to squared bbox diagonal


class TriangleMesh:
    """An immutable triangulated surface with edge connectivity.

    Parameters
    ----------
    vertices : (Nv, 3) float array-like
    triangles : (Nt, 3) int array-like, CCW seen from outside
    allow_open : accept meshes with boundary edges (unit-test mode only;
        the scattering formulation itself requires a closed surface)
    """

    def __init__(self, vertices, triangles, allow_open: bool = False):
        v = np.ascontiguousarray(vertices, dtype=float)
        t = np.ascontiguousarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ParseError(f"vertices must be (Nv, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ParseError(f"triangles must be (Nt, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ParseError("triangle indices out of range")
        self.vertices = v
        self.triangles = t
        self.allow_open = bool(allow_open)
        self._build()
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)

    # -- construction ----------------------------------------------------

    def _build(self):
        v, t = self.vertices, self.triangles
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        cross = np.cross(p1 - p0, p2 - p0)
        two_area = np.linalg.norm(cross, axis=1)
        bbox = v.max(axis=0) - v.min(axis=0) if len(v) else np.zeros(3)
        diag2 = float(np.dot(bbox, bbox))
        if np.any(two_area * two_area <= _AREA_EPS * diag2 * diag2) or np.any(two_area == 0.0):
            bad = int(np.argmin(two_area))
            raise DegenerateError(f"triangle {bad} has (near-)zero area")
        self.areas = 0.5 * two_area
        self.normals = cross / two_area[:, None]
        self.centroids = (p0 + p1 + p2) / 3.0

        # edge table: key (min, max) -> [(tri, +1 if traversed (min->max))]
        edge_map: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for ti, (a, b, c) in enumerate(t):
            for va, vb in ((a, b), (b, c), (c, a)):
                key = (va, vb) if va < vb else (vb, va)
                sense = 1 if va < vb else -1
                edge_map.setdefault(key, []).append((ti, sense))

        for key, adj in edge_map.items():
            if len(adj) > 2:
                raise TopologyError(f"non-manifold edge {key}: {len(adj)} triangles")
            if len(adj) == 2 and adj[0][1] == adj[1][1]:
                raise TopologyError(f"inconsistent orientation across edge {key}")
        boundary = [key for key, adj in edge_map.items() if len(adj) == 1]
        if boundary and not self.allow_open:
            raise TopologyError(
                f"open surface: {len(boundary)} boundary edges (e.g. {boundary[0]})")

        keys = sorted(edge_map)
        self.edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
        self.edge_lengths = np.linalg.norm(
            v[self.edges[:, 1]] - v[self.edges[:, 0]], axis=1)
        ne = len(keys)
        self.edge_tri_plus = np.full(ne, -1, dtype=np.int64)
        self.edge_tri_minus = np.full(ne, -1, dtype=np.int64)
        for ei, key in enumerate(keys):
            adj = sorted(edge_map[key])  # lower triangle index first -> plus side
            self.edge_tri_plus[ei] = adj[0][0]
            if len(adj) == 2:
                self.edge_tri_minus[ei] = adj[1][0]
        self.interior_edges = np.flatnonzero(self.edge_tri_minus >= 0)

        if not boundary and len(t):
            vol = self.signed_volume()
            if vol < 0.0:
                # consistently oriented but inward: flip in place and rebuild
                self.triangles = np.ascontiguousarray(self.triangles[:, ::-1])
                self._build()
                return
            if vol == 0.0:
                raise TopologyError("closed mesh with zero signed volume")

    # -- derived quantities ----------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def signed_volume(self) -> float:
        t, v = self.triangles, self.vertices
        return float(np.einsum(
            "ij,ij->", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])) / 6.0)

    def total_area(self) -> float:
        return float(self.areas.sum())

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def triangle_points(self, ti):
        return self.vertices[self.triangles[ti]]

    def triangle_diameters(self) -> np.ndarray:
        v, t = self.vertices, self.triangles
        d01 = np.linalg.norm(v[t[:, 1]] - v[t[:, 0]], axis=1)
        d12 = np.linalg.norm(v[t[:, 2]] - v[t[:, 1]], axis=1)
        d20 = np.linalg.norm(v[t[:, 0]] - v[t[:, 2]], axis=1)
        return np.max(np.stack([d01, d12, d20]), axis=0)

    def connected_components(self) -> int:
        parent = list(range(self.n_triangles))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for ei in self.interior_edges:
            a, b = find(self.edge_tri_plus[ei]), find(self.edge_tri_minus[ei])
            if a != b:
                parent[a] = b
        return len({find(i) for i in range(self.n_triangles)})


def avg_edge_length(mesh: TriangleMesh) -> float:
    """Arithmetic mean of all edge lengths (the system's xi)."""
    return float(mesh.edge_lengths.mean())


# ---------------------------------------------------------------------------
# barycentric refinement
# ---------------------------------------------------------------------------


class BarycentricMesh(TriangleMesh):
    """6-way (median) subdivision of a parent mesh.

    Children of parent triangle (a, b, c) are emitted in the fixed order
    (a,m_ab,g), (m_ab,b,g), (b,m_bc,g), (m_bc,c,g), (c,m_ca,g), (m_ca,a,g),
    where m_* are edge midpoints and g the centroid.
    """

    def __init__(self, parent: TriangleMesh, vertices, triangles,
                 parent_triangle, midpoint_of_edge, centroid_of_tri):
        self.parent = parent
        self.parent_triangle = np.asarray(parent_triangle, dtype=np.int64)
        self.midpoint_of_edge = np.asarray(midpoint_of_edge, dtype=np.int64)
        self.centroid_of_tri = np.asarray(centroid_of_tri, dtype=np.int64)
        super().__init__(vertices, triangles, allow_open=parent.allow_open)
        self.parent_edge = self._parent_edge_map()

    def _parent_edge_map(self) -> dict[int, tuple[int, int]]:
        """Parent edge index -> indices of its two half child edges."""
        child_index = {(int(a), int(b)): i for i, (a, b) in enumerate(self.edges)}
        out = {}
        for ei, (va, vb) in enumerate(self.parent.edges):
            m = int(self.midpoint_of_edge[ei])
            ka = (min(int(va), m), max(int(va), m))
            kb = (min(int(vb), m), max(int(vb), m))
            out[ei] = (child_index[ka], child_index[kb])
        return out


def barycentric_refine(mesh: TriangleMesh) -> BarycentricMesh:
    v, t = mesh.vertices, mesh.triangles
    nv, ne, nt = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
    midpoints = 0.5 * (v[mesh.edges[:, 0]] + v[mesh.edges[:, 1]])
    centroids = mesh.centroids
    verts = np.vstack([v, midpoints, centroids])

    edge_of = {}
    for ei, (a, b) in enumerate(mesh.edges):
        edge_of[(int(a), int(b))] = ei
        edge_of[(int(b), int(a))] = ei

    tris = np.empty((6 * nt, 3), dtype=np.int64)
    parent_tri = np.repeat(np.arange(nt), 6)
    for ti, (a, b, c) in enumerate(t):
        g = nv + ne + ti
        m_ab = nv + edge_of[(int(a), int(b))]
        m_bc = nv + edge_of[(int(b), int(c))]
        m_ca = nv + edge_of[(int(c), int(a))]
        tris[6 * ti:6 * ti + 6] = [
            (a, m_ab, g), (m_ab, b, g),
            (b, m_bc, g), (m_bc, c, g),
            (c, m_ca, g), (m_ca, a, g),
        ]
    return BarycentricMesh(
        mesh, verts, tris, parent_tri,
        midpoint_of_edge=nv + np.arange(ne),
        centroid_of_tri=nv + ne + np.arange(nt),
    )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

NATIVE_HEADER = "pie-mesh 1"


def write_mesh(mesh: TriangleMesh, path) -> None:
    """Write the native ASCII format (round-trips bit-identically)."""
    lines = [NATIVE_HEADER, f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines += [f"t {int(i)} {int(j)} {int(k)}" for i, j, k in mesh.triangles]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_native(text: str):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != NATIVE_HEADER:
        raise ParseError(f"bad header; expected {NATIVE_HEADER!r}")
    try:
        nv, nt = (int(x) for x in lines[1].split())
    except (IndexError, ValueError) as e:
        raise ParseError(f"bad count line: {e}") from None
    if len(lines) != 2 + nv + nt:
        raise ParseError(f"expected {2 + nv + nt} lines, found {len(lines)}")
    verts = np.empty((nv, 3))
    tris = np.empty((nt, 3), dtype=np.int64)
    try:
        for i, ln in enumerate(lines[2:2 + nv]):
            tag, *xyz = ln.split()
            if tag != "v" or len(xyz) != 3:
                raise ValueError(f"bad vertex line {ln!r}")
            verts[i] = [float(x) for x in xyz]
        for i, ln in enumerate(lines[2 + nv:]):
            tag, *ijk = ln.split()
            if tag != "t" or len(ijk) != 3:
                raise ValueError(f"bad triangle line {ln!r}")
            tris[i] = [int(x) for x in ijk]
    except ValueError as e:
        raise ParseError(str(e)) from None
    return verts, tris


def _parse_stl_ascii(text: str):
    verts = []
    lines = iter(text.splitlines())
    first = next(lines, "")
    if not first.lstrip().startswith("solid"):
        raise ParseError("not an ASCII STL file (missing 'solid')")
    for ln in lines:
        parts = ln.split()
        if parts[:1] == ["vertex"]:
            if len(parts) != 4:
                raise ParseError(f"bad vertex line {ln!r}")
            try:
                verts.append([float(x) for x in parts[1:]])
            except ValueError as e:
                raise ParseError(str(e)) from None
    if not verts or len(verts) % 3:
        raise ParseError(f"vertex count {len(verts)} not a multiple of 3")
    verts = np.array(verts)
    tris = np.arange(len(verts), dtype=np.int64).reshape(-1, 3)
    return _weld(verts, tris)


def _weld(verts: np.ndarray, tris: np.ndarray, rel_tol: float = 1e-9):
    """Merge duplicate vertices within rel_tol x bbox diagonal."""
    diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
    tol = rel_tol * (diag if diag > 0 else 1.0)
    tree = cKDTree(verts)
    parent = np.arange(len(verts))

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for i, j in tree.query_pairs(tol):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(verts))])
    uniq, new_index = np.unique(roots, return_inverse=True)
    return verts[uniq], new_index[tris]


def load_mesh(path, format: str | None = None, allow_open: bool = False) -> TriangleMesh:
    """Load and validate a mesh file.

    format: 'native-ascii' or 'stl-ascii'; guessed from the extension when
    omitted ('.stl' -> STL, anything else -> native).
    """
    path = str(path)
    if format is None:
        format = "stl-ascii" if path.lower().endswith(".stl") else "native-ascii"
    with open(path) as f:
        text = f.read()
    if format == "native-ascii":
        verts, tris = _parse_native(text)
    elif format == "stl-ascii":
        verts, tris = _parse_stl_ascii(text)
    else:
        raise ParseError(f"unknown mesh format {format!r}")
    return TriangleMesh(verts, tris, allow_open=allow_open)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def make_sphere(diameter: float, refinement_level: int) -> TriangleMesh:
    """Icosphere: subdivided icosahedron projected to the exact sphere.

    Triangle count is 20 * 4**refinement_level.
    """
    if diameter <= 0:
        raise InvalidGeometry(f"diameter must be positive, got {diameter}")
    if refinement_level < 0:
        raise InvalidGeometry("refinement_level must be >= 0")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=float)
    tris = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ], dtype=np.int64)

    for _ in range(refinement_level):
        cache: dict[tuple[int, int], int] = {}
        new_verts = list(verts)

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                cache[key] = len(new_verts)
                new_verts.append(0.5 * (verts[a] + verts[b]))
            return cache[key]

        out = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            out += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        verts = np.array(new_verts)
        tris = np.array(out, dtype=np.int64)

    radius = 0.5 * diameter
    verts = verts * (radius / np.linalg.norm(verts, axis=1))[:, None]
    return TriangleMesh(verts, tris)


def _voxel_surface(filled: np.ndarray, cell: tuple[float, float, float],
                   origin: tuple[float, float, float]) -> TriangleMesh:
    """Boundary surface of an axis-aligned voxel solid, outward oriented.

    Every face between a filled cell and an empty (or out-of-grid) neighbor
    becomes two triangles. Vertices are welded exactly via grid indices.
    """
    nx, ny, nz = filled.shape
    dx, dy, dz = cell
    ox, oy, oz = origin
    vert_index: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[float, float, float]] = []
    tris: list[tuple[int, int, int]] = []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in vert_index:
            vert_index[key] = len(verts)
            verts.append((ox + i * dx, oy + j * dy, oz + k * dz))
        return vert_index[key]

    def emit_quad(c00, c10, c11, c01):
        a, b, c, d = vid(*c00), vid(*c10), vid(*c11), vid(*c01)
        tris.append((a, b, c))
        tris.append((a, c, d))

    padded = np.zeros((nx + 2, ny + 2, nz + 2), dtype=bool)
    padded[1:-1, 1:-1, 1:-1] = filled.astype(bool)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not filled[i, j, k]:
                    continue
                p = (i + 1, j + 1, k + 1)
                # -x face (normal -x): CCW seen from -x
                if not padded[p[0] - 1, p[1], p[2]]:
                    emit_quad((i, j, k), (i, j, k + 1), (i, j + 1, k + 1), (i, j + 1, k))
                if not padded[p[0] + 1, p[1], p[2]]:
                    emit_quad((i + 1, j, k), (i + 1, j + 1, k),
                              (i + 1, j + 1, k + 1), (i + 1, j, k + 1))
                if not padded[p[0], p[1] - 1, p[2]]:
                    emit_quad((i, j, k), (i + 1, j, k), (i + 1, j, k + 1), (i, j, k + 1))
                if not padded[p[0], p[1] + 1, p[2]]:
                    emit_quad((i, j + 1, k), (i, j + 1, k + 1),
                              (i + 1, j + 1, k + 1), (i + 1, j + 1, k))
                if not padded[p[0], p[1], p[2] - 1]:
                    emit_quad((i, j, k), (i, j + 1, k), (i + 1, j + 1, k), (i + 1, j, k))
                if not padded[p[0], p[1], p[2] + 1]:
                    emit_quad((i, j, k + 1), (i + 1, j, k + 1),
                              (i + 1, j + 1, k + 1), (i, j + 1, k + 1))
    return TriangleMesh(np.array(verts), np.array(tris, dtype=np.int64))


def make_box(lx: float, ly: float, lz: float, target_edge: float) -> TriangleMesh:
    """Closed structured triangulation of an axis-aligned box at the origin corner."""
    if min(lx, ly, lz) <= 0.0:
        raise InvalidGeometry(f"box dimensions must be positive, got {(lx, ly, lz)}")
    if target_edge <= 0.0:
        raise InvalidGeometry("target_edge must be positive")
    n = [max(1, int(round(l / target_edge))) for l in (lx, ly, lz)]
    filled = np.ones(n, dtype=bool)
    return _voxel_surface(filled, (lx / n[0], ly / n[1], lz / n[2]), (0.0, 0.0, 0.0))


@dataclass(frozen=True)
class SrrParams:
    """2 x 2 split-ring-resonator array layout (lengths in meters)."""

    size: float = 2e-6        # outer side length of each square ring
    width: float = 0.2e-6     # arm width
    height: float = 0.1e-6    # extrusion height
    gap: float = 0.2e-6       # opening cut through one arm
    pitch: float = 4e-6       # center-to-center spacing
    resolution: float | None = None  # in-plane cell size; default width/2


def _ring_footprint(params: SrrParams, res: float) -> np.ndarray:
    """Boolean footprint (cells) of one C-shaped ring in its local frame."""
    def cells(x):
        c = x / res
        r = round(c)
        if abs(c - r) > 1e-6:
            raise InvalidGeometry(
                f"dimension {x:g} is not a multiple of the cell size {res:g}")
        return r

    ns, nw, ng = cells(params.size), cells(params.width), cells(params.gap)
    grid = np.zeros((ns, ns), dtype=bool)
    grid[:, :] = True
    grid[nw:ns - nw, nw:ns - nw] = False          # hollow the ring
    lo = (ns - ng) // 2
    grid[lo:lo + ng, 0:nw] = False                # gap through the y-min arm
    return grid


def make_srr_array(params: SrrParams = SrrParams()) -> TriangleMesh:
    """2 x 2 array of split rings, centered on the origin in the z = 0 plane.

    Each element sits in z in [0, height]; gaps face the -y direction.
    """
    p = params
    if min(p.size, p.width, p.height, p.gap, p.pitch) <= 0:
        raise InvalidGeometry("all SRR dimensions must be positive")
    if p.width >= p.size / 2:
        raise InvalidGeometry(f"width {p.width:g} must be < half size {p.size / 2:g}")
    if p.gap >= 4 * p.size:
        raise InvalidGeometry(f"gap {p.gap:g} exceeds the ring perimeter")
    if p.gap > p.size - 2 * p.width:
        raise InvalidGeometry(
            f"gap {p.gap:g} does not fit within the inner span "
            f"{p.size - 2 * p.width:g} of one arm")
    if p.pitch < p.size:
        raise InvalidGeometry(f"pitch {p.pitch:g} < element size {p.size:g}: rings touch")
    res = p.resolution if p.resolution is not None else p.width / 2
    ring = _ring_footprint(p, res)
    ns = ring.shape[0]
    npitch = p.pitch / res
    if abs(npitch - round(npitch)) > 1e-6:
        raise InvalidGeometry(f"pitch {p.pitch:g} is not a multiple of cell size {res:g}")
    npitch = round(npitch)

    span = npitch + ns  # cells from first ring x-min to last ring x-max
    grid = np.zeros((span, span), dtype=bool)
    for ix in (0, npitch):
        for iy in (0, npitch):
            grid[ix:ix + ns, iy:iy + ns] |= ring

    nzc = round(p.height / res) or 1
    filled = np.repeat(grid[:, :, None], nzc, axis=2)
    half = span * res / 2.0
    return _voxel_surface(filled, (res, res, p.height / nzc), (-half, -half, 0.0))
