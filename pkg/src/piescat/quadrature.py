"""Triangle quadrature, including singular and near-singular pair integration.

Three layers:
  * TriangleRule: plain rules for smooth integrands (classic 7-point order-5
    rule, plus collapsed tensor-Gauss rules for any requested order),
  * closed-form moments of the static 1/R kernel over a flat triangle
    (edge-decomposition formulas), used for singularity extraction,
  * a polar-sector scheme that integrates the full e^{-jkR} kernel in
    radius/angle coordinates; the R dR substitution removes the 1/R
    singularity, and the radial window is clipped to the decay length of
    lossy kernels, which keeps high-conductivity self terms accurate.

pair_integral() is the reference (oracle-grade) path for a single triangle
pair; bulk assembly in the operators module uses a vectorized moment engine
validated against it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateTriangle, QuadratureFailure
from .media import GreensKernel, negligible_interaction

# ---------------------------------------------------------------------------
# plain rules
# ---------------------------------------------------------------------------

# classic 7-point degree-5 rule (barycentric points, weights sum to 1)
_A1, _B1 = 0.0597158717897698, 0.4701420641051151
_A2, _B2 = 0.7974269853530873, 0.1012865073234563
_W0, _W1, _W2 = 0.225, 0.1323941527885062, 0.1259391805448271
_SEVEN_POINT = (
    np.array(
        [
            (1 / 3, 1 / 3, 1 / 3),
            (_A1, _B1, _B1), (_B1, _A1, _B1), (_B1, _B1, _A1),
            (_A2, _B2, _B2), (_B2, _A2, _B2), (_B2, _B2, _A2),
        ]
    ),
    np.array([_W0, _W1, _W1, _W1, _W2, _W2, _W2]),
)


@dataclass(frozen=True)
class TriangleRule:
    """Quadrature rule in barycentric coordinates; weights sum to 1."""

    order: int
    points: np.ndarray   # (n, 3) barycentric
    weights: np.ndarray  # (n,)

    @property
    def n_points(self) -> int:
        return len(self.weights)

    def map_to(self, tri_pts: np.ndarray):
        """Physical points for a (3,3) triangle, or batched (..., 3, 3)."""
        return np.tensordot(self.points, tri_pts, axes=([1], [-2]))


@lru_cache(maxsize=32)
def _gauss01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=64)
def _graded_gauss01(levels: int, n_per: int = 8):
    """Composite Gauss on [0, 1] with panels clustered at both endpoints."""
    half = 0.5 * 2.0 ** (-np.arange(levels, -1, -1, dtype=float))
    brk = np.concatenate([[0.0], half, (1.0 - half)[::-1], [1.0]])
    brk = np.unique(brk)
    xg, wg = _gauss01(n_per)
    xs = (brk[:-1][:, None] + np.diff(brk)[:, None] * xg).ravel()
    ws = (np.diff(brk)[:, None] * wg).ravel()
    return xs, ws


@lru_cache(maxsize=32)
def triangle_rule(order: int) -> TriangleRule:
    """Rule exact for polynomials of the given total degree.

    Orders up to 5 use the classic 7-point rule; higher orders collapse a
    tensor Gauss grid onto the triangle (x = u, y = v(1-u), Jacobian 1-u).
    """
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    if order <= 5:
        pts, w = _SEVEN_POINT
        return TriangleRule(5, pts.copy(), w.copy())
    n = order // 2 + 2  # enough 1-D points for the (1-u)-weighted monomials
    u, wu = _gauss01(n)
    v, wv = _gauss01(n)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = uu.ravel()
    y = (vv * (1.0 - uu)).ravel()
    w = (np.outer(wu * (1.0 - u), wv)).ravel() * 2.0  # x2: reference area 1/2
    bary = np.column_stack([1.0 - x - y, x, y])
    return TriangleRule(order, bary, w)


def integrate_smooth(tri_pts, f, rule: TriangleRule):
    """Integral of f over the triangle: sum w_q * area * f(r_q).

    f maps an (n, 3) array of points to scalar or vector samples.
    """
    tri_pts = np.asarray(tri_pts, dtype=float)
    area = 0.5 * np.linalg.norm(
        np.cross(tri_pts[1] - tri_pts[0], tri_pts[2] - tri_pts[0]))
    vals = np.asarray(f(rule.map_to(tri_pts)))
    return area * np.tensordot(rule.weights, vals, axes=([0], [0]))


# ---------------------------------------------------------------------------
# closed-form 1/R moments
# ---------------------------------------------------------------------------


def _triangle_frame(tri_pts):
    e1 = tri_pts[1] - tri_pts[0]
    e2 = tri_pts[2] - tri_pts[0]
    nvec = np.cross(e1, e2)
    norm = np.linalg.norm(nvec)
    if norm < 1e-300 or norm < 1e-14 * max(np.linalg.norm(e1), np.linalg.norm(e2)) ** 2:
        raise DegenerateTriangle("triangle has (near-)zero area")
    return nvec / norm, 0.5 * norm


def analytic_inv_r_moments(tri_pts, obs_pts):
    """Closed forms for (I0, I1) = (int 1/R dS', int r'/R dS') over a triangle.

    Edge-decomposition formulas for the potential of a flat triangle;
    valid for observation points anywhere (on, in, or off the plane).
    obs_pts: (..., 3). Returns I0 with shape (...,) and I1 with (..., 3).
    """
    tri_pts = np.asarray(tri_pts, dtype=float)
    obs = np.asarray(obs_pts, dtype=float)
    nhat, _ = _triangle_frame(tri_pts)

    h = np.tensordot(obs - tri_pts[0], nhat, axes=([-1], [0]))
    proj = obs - h[..., None] * nhat
    abs_h = np.abs(h)

    I0 = np.zeros(h.shape)
    Ivec = np.zeros(h.shape + (3,))
    for j in range(3):
        a, b = tri_pts[j], tri_pts[(j + 1) % 3]
        t_hat = (b - a) / np.linalg.norm(b - a)
        m_hat = np.cross(t_hat, nhat)  # in-plane outward edge normal
        lm = np.tensordot(a - proj, t_hat, axes=([-1], [0]))
        lp = np.tensordot(b - proj, t_hat, axes=([-1], [0]))
        P0 = np.tensordot(a - proj, m_hat, axes=([-1], [0]))
        Rm = np.linalg.norm(a - obs, axis=-1)
        Rp = np.linalg.norm(b - obs, axis=-1)
        R02 = P0 * P0 + h * h

        num, den = Rp + lp, Rm + lm
        safe = (num > 0) & (den > 0)
        f2 = np.where(safe, np.log(np.where(safe, num, 1.0) / np.where(safe, den, 1.0)), 0.0)
        # the log blows up only where its prefactors vanish; zero is the limit
        on_line = R02 < 1e-28 * (Rp * Rp + Rm * Rm + 1e-300)
        f2 = np.where(on_line, 0.0, f2)

        with np.errstate(invalid="ignore", divide="ignore"):
            beta = np.arctan2(P0 * lp, R02 + abs_h * Rp) - np.arctan2(
                P0 * lm, R02 + abs_h * Rm)
        I0 += P0 * f2 - abs_h * beta
        Ivec += 0.5 * (R02 * f2 + lp * Rp - lm * Rm)[..., None] * m_hat

    I1 = proj * I0[..., None] + Ivec
    return I0, I1


def self_term_static(tri_pts, r):
    """int_T 1/(4 pi |r - r'|) dS' evaluated in closed form."""
    I0, _ = analytic_inv_r_moments(tri_pts, r)
    return I0 / (4.0 * np.pi)


def triangle_solid_angle(tri_pts, obs_pts):
    """Signed solid angle of a triangle seen from obs_pts (..., 3).

    The sign follows the right-hand orientation of the vertex order, so
    that int_T nhat' . (r' - r) / R^3 dS' equals the returned value.
    """
    tri_pts = np.asarray(tri_pts, dtype=float)
    obs = np.asarray(obs_pts, dtype=float)
    v = np.moveaxis(np.asarray([tri_pts[i] - obs for i in range(3)]), 0, -2)
    n1 = np.linalg.norm(v[..., 0, :], axis=-1)
    n2 = np.linalg.norm(v[..., 1, :], axis=-1)
    n3 = np.linalg.norm(v[..., 2, :], axis=-1)
    det = np.einsum("...i,...i->...", v[..., 0, :],
                    np.cross(v[..., 1, :], v[..., 2, :]))
    den = (n1 * n2 * n3
           + np.einsum("...i,...i->...", v[..., 0, :], v[..., 1, :]) * n3
           + np.einsum("...i,...i->...", v[..., 0, :], v[..., 2, :]) * n2
           + np.einsum("...i,...i->...", v[..., 1, :], v[..., 2, :]) * n1)
    return 2.0 * np.arctan2(det, den)


def analytic_inv_r3_moments(tri_pts, obs_pts):
    """Closed forms for (int 1/R^3 dS', int r'/R^3 dS') over a triangle.

    Only meaningful for observation points off the triangle's plane; the
    height cancellation in the solid-angle form keeps small heights stable.
    obs_pts: (..., 3). Returns (m0, m1, edge) with shapes (...,), (..., 3)
    and (..., 3); `edge` is the boundary term sum_e mhat_e log((R+ + l+)/
    (R- + l-)), which callers combine with m0 in cancellation-safe forms.
    """
    tri_pts = np.asarray(tri_pts, dtype=float)
    obs = np.asarray(obs_pts, dtype=float)
    nhat, _ = _triangle_frame(tri_pts)

    h = np.tensordot(obs - tri_pts[0], nhat, axes=([-1], [0]))
    proj = obs - h[..., None] * nhat
    omega = triangle_solid_angle(tri_pts, obs)
    h_safe = np.where(np.abs(h) < 1e-300, 1e-300, h)
    m0 = -omega / h_safe

    edge_part = np.zeros(h.shape + (3,))
    for j in range(3):
        a, b = tri_pts[j], tri_pts[(j + 1) % 3]
        t_hat = (b - a) / np.linalg.norm(b - a)
        m_hat = np.cross(t_hat, nhat)
        lm = np.tensordot(a - proj, t_hat, axes=([-1], [0]))
        lp = np.tensordot(b - proj, t_hat, axes=([-1], [0]))
        Rm = np.linalg.norm(a - obs, axis=-1)
        Rp = np.linalg.norm(b - obs, axis=-1)
        num, den = Rp + lp, Rm + lm
        safe = (num > 0) & (den > 0)
        f2 = np.where(safe, np.log(np.where(safe, num, 1.0)
                                   / np.where(safe, den, 1.0)), 0.0)
        P0 = np.tensordot(a - proj, m_hat, axes=([-1], [0]))
        R02 = P0 * P0 + h * h
        on_line = R02 < 1e-28 * (Rp * Rp + Rm * Rm + 1e-300)
        f2 = np.where(on_line, 0.0, f2)
        edge_part += f2[..., None] * m_hat

    m1 = proj * m0[..., None] - edge_part
    return m0, m1, edge_part


# ---------------------------------------------------------------------------
# polar-sector singular integration
# ---------------------------------------------------------------------------

_DECAY_WINDOW = 72.0  # e^{-72} ~ 5e-32: beyond this the radial tail is noise


def _radial_panels(R1, R2, wants_grading: bool, k: complex = 0.0,
                   max_panels: int = 12):
    """Breakpoints for the radial integral on [R1, R2] (scalars).

    Geometric grading resolves leftover 1/R variation; lossy kernels get
    panels doubling on the decay scale for the e^{Im(k) R} falloff; phase
    rotation is capped at a few radians per panel.
    """
    pts = [R1, R2]
    if wants_grading and R1 > 0 and R2 / R1 >= 4.0:
        n = min(max_panels, max(2, int(np.ceil(np.log2(R2 / R1)))))
        pts.extend(R1 * (R2 / R1) ** (np.linspace(0.0, 1.0, n + 1)))
    kappa = -float(np.imag(k))
    if kappa > 0 and kappa * (R2 - R1) > 8.0:
        step = 2.0 / kappa
        r = R1 + step
        while r < R2 and len(pts) < 4 * max_panels:
            pts.append(r)
            step *= 2.0
            r = R1 + step
    mod = abs(k)
    n_osc = int(np.ceil(mod * (R2 - R1) / 6.0))
    if n_osc > 1:
        pts.extend(np.linspace(R1, R2, min(n_osc, 2 * max_panels) + 1))
    return np.unique(np.clip(np.asarray(pts), R1, R2))


def polar_triangle_integral(tri_pts, obs, integrand, kernel: GreensKernel,
                            n_ang: int = 16, n_rad: int = 16,
                            graded: bool = False):
    """int_T integrand(r', R, d_unit) dS' around one observation point.

    The triangle is split into three signed sectors about the in-plane
    projection of `obs`; the radial variable is R = |obs - r'| (so dS =
    R dR dphi), which regularizes 1/R kernels exactly. `integrand` maps
    (points (n,3), R (n,), d_unit (n,3)) -> (n, ...) samples *excluding*
    the dR dphi measure; lossy kernels have their radial window clipped.
    """
    tri_pts = np.asarray(tri_pts, dtype=float)
    obs = np.asarray(obs, dtype=float)
    nhat, _ = _triangle_frame(tri_pts)
    h = float(np.dot(obs - tri_pts[0], nhat))
    o = obs - h * nhat
    abs_h = abs(h)

    im_k = float(np.imag(kernel.k))
    r_clip = np.inf if im_k >= 0 else _DECAY_WINDOW / (-im_k)

    rg, rw = _gauss01(n_rad)

    total = None
    for j in range(3):
        a, b = tri_pts[j], tri_pts[(j + 1) % 3]
        va, vb = a - o, b - o
        # signed area of sector (o, a, b); skip degenerate slivers
        sector_n = np.cross(va, vb)
        sign = np.sign(np.dot(sector_n, nhat))
        twice_area = np.linalg.norm(sector_n)
        if twice_area < 1e-30:
            continue
        phi_tot = float(np.arctan2(twice_area, np.dot(va, vb)))

        # angular resolution follows the phase spread of the outer radius
        # across the sector; a decay-clipped radius sweeps no phase at all
        ra = np.linalg.norm(obs - a)
        rb = np.linalg.norm(obs - b)
        t_edge = (b - a) / np.linalg.norm(b - a)
        s_foot = np.clip(np.dot(obs - a, t_edge), 0.0, np.linalg.norm(b - a))
        r_edge = np.linalg.norm(obs - (a + s_foot * t_edge))
        hi_max = min(max(ra, rb), abs_h + r_clip)
        hi_min = min(max(r_edge, abs_h), abs_h + r_clip)
        ratio = hi_max / max(hi_min, 1e-300)
        if graded and ratio > 32.0:
            # outer radius sweeps decades across the sector: the angular
            # integrand picks up endpoint log behavior; cluster panels there
            xg, wg = _graded_gauss01(min(12, int(np.ceil(np.log2(ratio)))), 6)
        else:
            extra = int(np.ceil(
                abs(kernel.k) * max(hi_max - hi_min, 0.0) / 2.0))
            n_ang_eff = n_ang if extra <= 2 else min(
                256, 8 * ((n_ang + extra) // 8 + 1))
            xg, wg = _gauss01(n_ang_eff)

        # directions interpolated across the sector opening
        phis = phi_tot * xg
        # rotate va toward vb within the plane by each phi
        axis = nhat * (sign if sign != 0 else 1.0)
        ua = va / np.linalg.norm(va)
        w_perp = np.cross(axis, ua)
        dirs = np.cos(phis)[:, None] * ua + np.sin(phis)[:, None] * w_perp

        # distance from o to the edge line (a, b) along each direction
        edge_n = np.cross(b - a, axis)
        edge_n /= np.linalg.norm(edge_n)
        d0 = np.dot(va, edge_n)
        proj = dirs @ edge_n
        with np.errstate(divide="ignore"):
            rho_max = np.where(np.abs(proj) > 1e-300, d0 / proj, np.inf)
        if np.any(rho_max <= 0):
            raise QuadratureFailure("polar sector produced a non-positive radius")

        R_lo = abs_h
        R_hi = np.sqrt(rho_max**2 + h * h)
        R_hi_eff = np.minimum(R_hi, abs_h + r_clip)

        for i in range(len(xg)):
            if R_hi_eff[i] <= R_lo:
                continue
            panels = _radial_panels(max(R_lo, 1e-300), R_hi_eff[i], graded,
                                    kernel.k)
            widths = np.diff(panels)
            R = (panels[:-1][:, None] + widths[:, None] * rg).ravel()
            w_r = (widths[:, None] * rw).ravel()
            rho = np.sqrt(np.maximum(R * R - h * h, 0.0))
            pts = o + rho[:, None] * dirs[i]
            dvec = (obs - pts) / R[:, None]
            vals = np.asarray(integrand(pts, R, dvec))
            piece = np.tensordot(w_r, vals, axes=([0], [0])) * (
                sign * phi_tot * wg[i])
            total = piece if total is None else total + piece
    if total is None:
        total = 0.0 + 0.0j
    return total


# ---------------------------------------------------------------------------
# pair integration
# ---------------------------------------------------------------------------

KERNEL_PARTS = ("L-scalar", "L-vector", "K-grad", "M-normal")


@dataclass(frozen=True)
class SingularScheme:
    """Near/self integration policy.

    extraction_terms: number of leading Taylor terms of e^{-jkR} handled
        analytically by the extraction-based assembly path (1/R and the
        constant term by default); the polar reference path integrates the
        full kernel and does not truncate.
    near_threshold: centroid distance / max triangle diameter ratio below
        which the singular scheme takes over from plain rules.
    """

    extraction_terms: int = 2
    near_threshold: float = 2.5
    outer_order: int = 10
    n_ang: int = 16
    n_rad: int = 16
    graded_levels: int = 16
    band_order: int = 7


def _tri_geometry(tri_pts):
    tri_pts = np.asarray(tri_pts, dtype=float)
    nhat, area = _triangle_frame(tri_pts)
    centroid = tri_pts.mean(axis=0)
    diam = max(
        np.linalg.norm(tri_pts[1] - tri_pts[0]),
        np.linalg.norm(tri_pts[2] - tri_pts[1]),
        np.linalg.norm(tri_pts[0] - tri_pts[2]),
    )
    return tri_pts, nhat, area, centroid, diam


def _coplanar(n1, c1, n2, c2, scale):
    if abs(abs(np.dot(n1, n2)) - 1.0) > 1e-12:
        return False
    return abs(np.dot(c2 - c1, n1)) < 1e-12 * scale


def _shared_feature(Tt, Ts, scale):
    """Test-triangle vertex indices that coincide with source vertices."""
    shared = []
    for i in range(3):
        if np.min(np.linalg.norm(Ts - Tt[i], axis=1)) < 1e-12 * scale:
            shared.append(i)
    return shared


def _graded_subtriangles(T, shared, levels: int = 30):
    """Cover T with sub-triangles clustered toward a shared edge or vertex."""
    out = []
    scales = 2.0 ** (-np.arange(levels + 1, dtype=float))
    if len(shared) == 2:
        ia, ib = shared
        ic = 3 - ia - ib
        a, b, c = T[ia], T[ib], T[ic]

        def rail(alpha):
            return (1 - alpha) * a + alpha * c, (1 - alpha) * b + alpha * c

        for a_hi, a_lo in zip(scales[:-1], scales[1:]):
            A1, B1 = rail(a_hi)
            A0, B0 = rail(a_lo)
            out.append(np.array([A0, B0, B1]))
            out.append(np.array([A0, B1, A1]))
        A0, B0 = rail(0.0)
        A1, B1 = rail(scales[-1])
        out.append(np.array([A0, B0, B1]))
        out.append(np.array([A0, B1, A1]))
    else:
        iv = shared[0]
        v, b, c = T[iv], T[(iv + 1) % 3], T[(iv + 2) % 3]

        def rail(beta):
            return v + beta * (b - v), v + beta * (c - v)

        for b_hi, b_lo in zip(scales[:-1], scales[1:]):
            B1, C1 = rail(b_hi)
            B0, C0 = rail(b_lo)
            out.append(np.array([B0, B1, C1]))
            out.append(np.array([B0, C1, C0]))
        B1, C1 = rail(scales[-1])
        out.append(np.array([v, B1, C1]))
    return out


def pair_integral(kernelpart: str, Ttest, Tsrc, test_fn, src_fn,
                  kernel: GreensKernel, scheme: SingularScheme = SingularScheme(),
                  rule: TriangleRule | None = None):
    """Galerkin double integral over a triangle pair (reference path).

    kernelpart:
      'L-scalar'  : int int  t(r) G s(r')
      'L-vector'  : int int  t(r) . G s(r')
      'K-grad'    : int int  t(r) . (grad_r G x s(r'))      (principal value)
      'M-normal'  : int int  t(r) [n'_src . grad' G] s(r')  (principal value)

    test_fn/src_fn map (n, 3) point arrays to scalar (L-scalar, M-normal)
    or 3-vector samples. The principal-value parts carry no jump term: the
    +-1/2 identity contributions stay out of these integrals by convention.
    Accuracy here favors robustness over speed; bulk assembly has its own
    vectorized engine tested against this one.
    """
    if kernelpart not in KERNEL_PARTS:
        raise ValueError(f"unknown kernel part {kernelpart!r}")
    Tt, nt, At, ct, dt = _tri_geometry(Ttest)
    Ts, ns, As, cs, ds = _tri_geometry(Tsrc)
    dist = np.linalg.norm(ct - cs)
    diam = max(dt, ds)

    gap = max(dist - dt - ds, 0.0)
    if negligible_interaction(kernel, gap, 1e-30):
        return 0.0 + 0.0j

    vector_valued = kernelpart in ("L-vector", "K-grad")

    if dist > scheme.near_threshold * diam:
        smooth = rule if rule is not None else triangle_rule(8)
        rt = smooth.map_to(Tt)
        rs = smooth.map_to(Ts)
        d = rt[:, None, :] - rs[None, :, :]
        R = np.linalg.norm(d, axis=-1)
        G = np.exp(-1j * kernel.k * R) / (4.0 * np.pi * R)
        tv = np.asarray(test_fn(rt))
        sv = np.asarray(src_fn(rs))
        if kernelpart == "L-scalar":
            ker = G
            acc = np.einsum("q,p,qp->", tv * smooth.weights, sv * smooth.weights, ker)
        elif kernelpart == "L-vector":
            acc = np.einsum("qi,p,qp,pi->", tv * smooth.weights[:, None],
                            smooth.weights, G, sv)
        elif kernelpart == "K-grad":
            gradG = d * ((-1j * kernel.k - 1.0 / R) * G / R)[..., None]
            cross = np.cross(gradG, sv[None, :, :])
            acc = np.einsum("qi,p,qpi->", tv * smooth.weights[:, None],
                            smooth.weights, cross)
        else:  # M-normal: n'.grad' G = n'.(r' - r) (-jk - 1/R) G / R
            ker = -np.einsum("qpi,i->qp", d, ns) * (-1j * kernel.k - 1.0 / R) * G / R
            acc = np.einsum("q,p,qp->", tv * smooth.weights, sv * smooth.weights, ker)
        return complex(acc * At * As)

    # near or self: PV parts of the gradient kernels vanish for coplanar pairs
    if kernelpart in ("K-grad", "M-normal") and _coplanar(nt, ct, ns, cs, diam):
        return 0.0 + 0.0j

    k = kernel.k
    grad_kernels = kernelpart in ("K-grad", "M-normal")

    if kernelpart == "L-scalar":
        def inner(pts, R, dvec):
            return np.asarray(src_fn(pts)) * np.exp(-1j * k * R) / (4.0 * np.pi)

        def reduce_obs(tval, ival):
            return tval * ival
    elif kernelpart == "L-vector":
        def inner(pts, R, dvec):
            return np.asarray(src_fn(pts)) * (
                np.exp(-1j * k * R) / (4.0 * np.pi))[:, None]

        def reduce_obs(tval, ival):
            return tval @ ival
    elif kernelpart == "K-grad":
        def inner(pts, R, dvec):
            # grad_r G times R (the radial measure is folded in)
            fac = (-1j * k - 1.0 / R) * np.exp(-1j * k * R) / (4.0 * np.pi)
            return np.cross(dvec * fac[:, None], np.asarray(src_fn(pts)))

        def reduce_obs(tval, ival):
            return tval @ ival
    else:  # M-normal; dvec = (r - r')/R so n'.grad'G picks up a minus sign
        def inner(pts, R, dvec):
            fac = (-1j * k - 1.0 / R) * np.exp(-1j * k * R) / (4.0 * np.pi)
            return np.asarray(src_fn(pts)) * (-(dvec @ ns)) * fac

        def reduce_obs(tval, ival):
            return tval * ival

    # The cross-gradient kernel leaves a log singularity in the outer
    # integrand along a shared edge (or vertex); cover the test triangle
    # with sub-triangles geometrically clustered toward the shared feature.
    # (The normal-derivative kernel is regular there: its numerator vanishes
    # with the off-plane distance.)
    patches = [Tt]
    base_order = scheme.outer_order
    if kernelpart == "K-grad":
        shared = _shared_feature(Tt, Ts, diam)
        if 1 <= len(shared) <= 2:
            patches = _graded_subtriangles(Tt, shared, scheme.graded_levels)
            base_order = scheme.band_order

    im_k = float(np.imag(k))
    window = np.inf if im_k >= 0 else _DECAY_WINDOW / (-im_k)

    acc = 0.0 + 0.0j
    for patch in patches:
        e1 = patch[1] - patch[0]
        e2 = patch[2] - patch[0]
        p_area = 0.5 * np.linalg.norm(np.cross(e1, e2))
        if p_area == 0.0:
            continue
        p_diam = max(np.linalg.norm(e1), np.linalg.norm(e2),
                     np.linalg.norm(patch[2] - patch[1]))
        # the inner integral oscillates across the patch at ~|Re k| per
        # length; a decay window shorter than the patch localizes it instead
        if window < p_diam:
            order = max(base_order, 14)
        else:
            phase = abs(np.real(k)) * p_diam
            order = base_order if phase <= 4.0 else min(
                40, int(np.ceil(base_order + 1.2 * phase)))
        outer = triangle_rule(order)
        obs_pts = outer.map_to(patch)
        tv = np.asarray(test_fn(obs_pts))
        for q, obs in enumerate(obs_pts):
            val = polar_triangle_integral(Ts, obs, inner, kernel,
                                          scheme.n_ang, scheme.n_rad,
                                          graded=grad_kernels)
            acc += p_area * outer.weights[q] * reduce_obs(tv[q], val)
    return complex(acc)
