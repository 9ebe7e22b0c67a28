"""Coupled potential-trace system for one penetrable object in free space.

Six block equations on the surface mesh tie the interior and exterior
potential traces together: the rotated-tangential vector equation on each
side of the surface, the divergence of the exterior vector equation, the
normal component of the interior one, and the scalar equation on each
side.  The unknown column groups, in order, are

    1. rotated curl trace of the exterior vector potential   (edge, Ne)
    2. shared tangential vector potential / edge_scale       (edge, Ne)
    3. shared scalar potential / c0                          (cell, Nt)
    4. interior normal vector potential                      (cell, Nt)
    5. exterior normal vector potential                      (cell, Nt)
    6. exterior normal derivative of the scalar potential    (cell, Nt)

so N = 2 Ne + 4 Nt.  The interior normal gradient of the scalar potential
is not an unknown: the gauge link between the two regions eliminates it in
favor of groups 4-6, which is what keeps highly conductive interiors
well-posed.  Row and column scalings (edge_scale, c0) keep all blocks of
comparable magnitude so a plain LU factorization is stable from the
quasi-static regime up to tens of wavelengths.

Assembly adds the half-Gram interface terms to the principal-value blocks
produced by the operator assembler; on-surface limits differ between the
two sides only through the sign of those terms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .basis import RwgBasis
from .errors import DimensionMismatch, MaterialError, ResidualTooLarge, SingularMatrix
from .media import C0, ETA0, MU0, MaterialParams
from .mesh import TriangleMesh
from .operators import OperatorSet, Spaces, write_blocks
from .quadrature import triangle_rule

_RESIDUAL_LIMIT = 1e-8


# ---------------------------------------------------------------------------
# excitation


@dataclass(frozen=True)
class PlaneWaveExcitation:
    """Linearly polarized plane wave, given in the zero-scalar gauge.

    e0           peak electric field amplitude (V/m); may be complex
    direction    unit propagation vector
    polarization unit electric-field direction, orthogonal to `direction`
    frequency    Hz
    """

    e0: complex
    direction: np.ndarray
    polarization: np.ndarray
    frequency: float

    def __post_init__(self):
        object.__setattr__(self, "direction",
                           np.asarray(self.direction, dtype=float))
        object.__setattr__(self, "polarization",
                           np.asarray(self.polarization, dtype=float))
        for name in ("direction", "polarization"):
            v = getattr(self, name)
            if v.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            if abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise ValueError(f"{name} must have unit length")
        if abs(self.direction @ self.polarization) > 1e-12:
            raise ValueError("polarization must be orthogonal to direction")
        if self.frequency <= 0.0:
            raise ValueError("frequency must be positive")

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency

    @property
    def wavenumber(self) -> float:
        return self.omega / C0

    def _phase(self, points):
        pts = np.asarray(points, dtype=float)
        return np.exp(-1j * self.wavenumber * (pts @ self.direction))

    def vector_potential(self, points) -> np.ndarray:
        """A(r) with E = -j omega A and zero scalar potential.

        The transverse polarization makes A divergence-free, so the pair
        (A, 0) satisfies the gauge condition of both media.
        """
        amp = 1j * self.e0 / self.omega
        return amp * self.polarization * self._phase(points)[..., None]

    def e_field(self, points) -> np.ndarray:
        return self.e0 * self.polarization * self._phase(points)[..., None]

    def h_field(self, points) -> np.ndarray:
        hdir = np.cross(self.direction, self.polarization)
        return (self.e0 / ETA0) * hdir * self._phase(points)[..., None]


@dataclass
class IncidentPotentials:
    """Tested incident traces: edge-element and cell-pulse projections."""

    b_inc: np.ndarray    # length Ne, <f_m, A_inc>
    phi_inc: np.ndarray  # length Nt, zero in this gauge


def incident_potentials(excitation: PlaneWaveExcitation, mesh: TriangleMesh,
                        order: int = 8) -> IncidentPotentials:
    """Project the incident potentials onto the surface test spaces."""
    rwg = RwgBasis(mesh)
    rule = triangle_rule(order)
    b = np.zeros(rwg.n_functions, dtype=complex)
    for sign, tris, free in ((1.0, rwg.tri_plus, rwg.free_plus),
                             (-1.0, rwg.tri_minus, rwg.free_minus)):
        for m in range(rwg.n_functions):
            t = tris[m]
            pts = rule.map_to(mesh.vertices[mesh.triangles[t]])
            fm = sign * (pts - mesh.vertices[free[m]]) / (2.0 * mesh.areas[t])
            a_inc = excitation.vector_potential(pts)
            b[m] += mesh.areas[t] * np.einsum(
                "q,qi,qi->", rule.weights, fm, a_inc)
    return IncidentPotentials(b_inc=b,
                              phi_inc=np.zeros(mesh.n_triangles, complex))


# ---------------------------------------------------------------------------
# block system


@dataclass(frozen=True)
class ScalingRecord:
    """Constants folded into the assembled blocks, kept for unscaling."""

    edge_scale: float
    c0: float
    eta0: float
    gamma_in: complex
    gamma_out: complex
    k_in: complex
    k_out: float
    mu_ratio: float


def _block_slices(ne: int, nt: int) -> tuple[slice, ...]:
    edges = [0, ne, 2 * ne]
    cells = [2 * ne + i * nt for i in range(5)]
    return (slice(edges[0], edges[1]), slice(edges[1], edges[2]),
            slice(cells[0], cells[1]), slice(cells[1], cells[2]),
            slice(cells[2], cells[3]), slice(cells[3], cells[4]))


@dataclass
class BlockSystem:
    """Dense scaled system with its right-hand side and scaling record."""

    matrix: np.ndarray
    rhs: np.ndarray
    scaling: ScalingRecord
    n_edges: int
    n_cells: int

    @property
    def size(self) -> int:
        return 2 * self.n_edges + 4 * self.n_cells

    def block_slices(self) -> tuple[slice, ...]:
        return _block_slices(self.n_edges, self.n_cells)

    def split(self, vec: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(vec[s] for s in self.block_slices())


@dataclass
class Solution:
    """Unscaled trace coefficients plus solver diagnostics.

    curl_trace        n x curl A on the outer side, edge elements
    tangential        tangential A shared by both sides, dual elements
    scalar            scalar potential shared by both sides, cell pulses
    normal_in/out     normal component of A on each side, cell pulses
    scalar_gradient_out  outer normal derivative of the scalar potential,
                         area-normalized pulses
    """

    curl_trace: np.ndarray
    tangential: np.ndarray
    scalar: np.ndarray
    normal_in: np.ndarray
    normal_out: np.ndarray
    scalar_gradient_out: np.ndarray
    residual: float
    condition: float

    def concatenated(self) -> np.ndarray:
        return np.concatenate([
            self.curl_trace, self.tangential, self.scalar,
            self.normal_in, self.normal_out, self.scalar_gradient_out])


_BLOCK_SHAPES = ("sl_edge_edge", "sl_edge_normal", "curl_sl_edge_dual",
                 "curl_sl_pulse_dual", "sl_pulse_pulse", "double_layer_pulse")


def _check_operator_shapes(ops: OperatorSet, ne: int, nt: int, side: str):
    expected = {
        "sl_edge_edge": (ne, ne), "sl_edge_normal": (ne, nt),
        "curl_sl_edge_dual": (ne, ne), "curl_sl_pulse_dual": (nt, ne),
        "sl_pulse_pulse": (nt, nt), "double_layer_pulse": (nt, nt),
    }
    for name in _BLOCK_SHAPES:
        got = getattr(ops, name).shape
        if got != expected[name]:
            raise DimensionMismatch(
                f"{side} {name} has shape {got}, expected {expected[name]}")


def assemble_system(spaces: Spaces, exterior: OperatorSet,
                    interior: OperatorSet, material: MaterialParams,
                    edge_scale: float,
                    excitation: PlaneWaveExcitation | None = None
                    ) -> BlockSystem:
    """Populate the six-by-six block matrix and its right-hand side.

    `exterior` and `interior` must be assembled on `spaces` with the
    free-space and object wavenumbers of `material.omega`; `edge_scale`
    is the average mesh edge length used to balance the edge rows.
    """
    ne, nt = spaces.n_edges, spaces.n_cells
    _check_operator_shapes(exterior, ne, nt, "exterior")
    _check_operator_shapes(interior, ne, nt, "interior")
    if not np.array_equal(exterior.areas, interior.areas) or \
            not np.array_equal(exterior.areas, spaces.mesh.areas):
        raise DimensionMismatch("operator sets do not match the mesh")
    if edge_scale <= 0.0:
        raise ValueError("edge_scale must be positive")

    omega = material.omega
    gamma = material.gamma
    if gamma == 0.0:
        raise MaterialError("gauge constant vanishes; material is not "
                            "supported by the formulation")
    free = MaterialParams.free_space(omega)
    gamma0 = free.gamma
    k0 = omega / C0
    k = material.k
    mu = material.mu
    for got, want, side in ((exterior.k, k0, "exterior"),
                            (interior.k, k, "interior")):
        if abs(got - want) > 1e-8 * max(1.0, abs(want)):
            raise MaterialError(
                f"{side} operator wavenumber {got} does not match the "
                f"material value {want}")
    if excitation is not None and \
            abs(excitation.omega - omega) > 1e-9 * omega:
        raise MaterialError("excitation frequency does not match material")

    xi = edge_scale
    s1, s2, s3, s4, s5, s6 = _block_slices(ne, nt)

    rot = np.asarray(spaces.rot_gram.todense())
    div = spaces.div
    eye = np.eye(nt)
    ext_cell = exterior.cell_single_layer()
    int_cell = interior.cell_single_layer()

    n = 2 * ne + 4 * nt
    a = np.zeros((n, n), dtype=complex)

    # rotated-tangential equation, outer side
    a[s1, s1] = exterior.sl_edge_edge / xi
    a[s1, s2] = exterior.curl_sl_edge_dual - 0.5 * rot
    a[s1, s3] = (1j * k0 / xi) * exterior.sl_edge_normal
    a[s1, s5] = np.asarray(div.T @ exterior.sl_pulse_pulse) / xi

    # rotated-tangential equation, inner side; the shared curl trace is
    # the outer one, rescaled by the permeability contrast
    a[s2, s1] = (mu / (xi * MU0)) * interior.sl_edge_edge
    a[s2, s2] = interior.curl_sl_edge_dual + 0.5 * rot
    a[s2, s3] = (C0 * gamma / xi) * interior.sl_edge_normal
    a[s2, s4] = np.asarray(div.T @ interior.sl_pulse_pulse) / xi

    # divergence of the outer vector equation
    a[s3, s1] = np.asarray((div.T @ ext_cell.T).T)
    a[s3, s3] = (1j * k0) * (0.5 * eye - exterior.cell_double_layer())
    a[s3, s5] = k0 ** 2 * ext_cell

    # normal component of the inner vector equation
    a[s4, s1] = (mu / MU0) * interior.normal_edge()
    a[s4, s2] = xi * interior.curl_sl_pulse_dual
    a[s4, s3] = (C0 * gamma) * interior.normal_normal()
    a[s4, s4] = 0.5 * eye - interior.cell_double_layer_flip()

    # inner scalar equation with its normal gradient eliminated through
    # the inter-region gauge link
    a[s5, s3] = -(interior.cell_double_layer() + 0.5 * eye)
    a[s5, s4] = (k ** 2 / (gamma * C0)) * int_cell
    a[s5, s5] = -(mu * k0 ** 2 / (gamma * ETA0)) * int_cell
    a[s5, s6] = (mu * gamma0 / (gamma * ETA0)) * \
        interior.cell_single_layer_sym()

    # outer scalar equation
    a[s6, s3] = 0.5 * eye - exterior.cell_double_layer()
    a[s6, s6] = exterior.cell_single_layer_sym() / C0

    rhs = np.zeros(n, dtype=complex)
    if excitation is not None:
        inc = incident_potentials(excitation, spaces.mesh)
        rhs[s1] = -inc.b_inc / xi
        rhs[s3] = gamma0 * inc.phi_inc
        rhs[s6] = -inc.phi_inc / C0

    scaling = ScalingRecord(edge_scale=xi, c0=C0, eta0=ETA0,
                            gamma_in=gamma, gamma_out=gamma0,
                            k_in=k, k_out=k0, mu_ratio=mu / MU0)
    return BlockSystem(matrix=a, rhs=rhs, scaling=scaling,
                       n_edges=ne, n_cells=nt)


# ---------------------------------------------------------------------------
# direct solve


def solve(system: BlockSystem) -> Solution:
    """LU-factor the block system and return unscaled trace coefficients.

    One pass of iterative refinement is applied; the relative residual
    must come out below 1e-8 or the solve is rejected.  The condition
    number reported is the 1-norm estimate from the factors.
    """
    a, b = system.matrix, system.rhs
    with warnings.catch_warnings():
        # an exactly zero pivot is reported via our own exception below
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu, piv = la.lu_factor(a)
    if np.any(np.diag(lu) == 0.0):
        raise SingularMatrix("zero pivot in LU factorization")

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        x = np.zeros_like(b)
        residual = 0.0
    else:
        x = la.lu_solve((lu, piv), b)
        x += la.lu_solve((lu, piv), b - a @ x)
        residual = float(np.linalg.norm(b - a @ x) / bnorm)

    rcond, _ = la.lapack.zgecon(lu, np.linalg.norm(a, 1))
    condition = float(np.inf) if rcond == 0.0 else float(1.0 / rcond)
    if not residual <= _RESIDUAL_LIMIT:
        raise ResidualTooLarge(
            f"relative residual {residual:.3e} exceeds {_RESIDUAL_LIMIT:.0e}"
            f" (condition estimate {condition:.3e})")

    x1, x2, x3, x4, x5, x6 = system.split(x)
    sc = system.scaling
    return Solution(curl_trace=x1, tangential=sc.edge_scale * x2,
                    scalar=sc.c0 * x3, normal_in=x4, normal_out=x5,
                    scalar_gradient_out=x6,
                    residual=residual, condition=condition)


# ---------------------------------------------------------------------------
# exports


def dump_system(system: BlockSystem, path) -> None:
    """Write the matrix and right-hand side in the block container format."""
    sc = system.scaling
    meta = {
        "n_edges": system.n_edges, "n_cells": system.n_cells,
        "edge_scale": sc.edge_scale, "mu_ratio": sc.mu_ratio,
        "k_in": [sc.k_in.real, sc.k_in.imag], "k_out": sc.k_out,
        "gamma_in": [sc.gamma_in.real, sc.gamma_in.imag],
        "gamma_out": [sc.gamma_out.real, sc.gamma_out.imag],
    }
    write_blocks(path, {"matrix": system.matrix,
                        "rhs": system.rhs.astype(complex)}, meta)


def solution_csv(solution: Solution) -> str:
    """Unscaled solution vector as `index,real,imag` lines."""
    vec = solution.concatenated()
    lines = ["index,real,imag"]
    lines += [f"{i},{v.real:.17e},{v.imag:.17e}" for i, v in enumerate(vec)]
    return "\n".join(lines) + "\n"


def write_solution_csv(path, solution: Solution) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(solution_csv(solution))
