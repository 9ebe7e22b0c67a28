"""Series reference solution for a homogeneous sphere in a plane wave.

Everything here uses the e^{+j omega t} convention: outgoing radial
functions are spherical Hankel functions of the second kind, and lossy
materials have Im(k) <= 0. The logarithmic derivative of the interior
radial function is obtained from a continued fraction, so metal-surrogate
conductivities (relative index magnitudes of 1e6 and beyond) evaluate
without forming any exponentially large intermediate.

The incident wave is x-polarized and travels along +z:
E_inc = E0 xhat exp(-j k0 z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import spherical_jn, spherical_yn

from .errors import ConvergenceError, MaterialError
from .media import C0, EPS0, MU0, MaterialParams, free_space_wavenumber, wavenumber


def suggested_terms(x: float) -> int:
    """Series length comfortably past the Wiscombe cutoff."""
    return int(np.ceil(x + 4.0 * x ** (1.0 / 3.0) + 20.0))


def _psi_ratio(n: int, rho: complex) -> complex:
    """psi_n(rho) / psi_{n-1}(rho) by a modified-Lentz continued fraction.

    Uses only ratios, so it is stable for huge lossy arguments where the
    Riccati-Bessel functions themselves overflow.
    """
    tiny = 1e-290
    f = tiny
    c = f
    d = 0.0
    for it in range(1, 100000):
        b = (2.0 * (n + it) - 1.0) / rho
        a = 1.0 if it == 1 else -1.0
        d = b + a * d
        if d == 0.0:
            d = tiny
        c = b + a / c
        if c == 0.0:
            c = tiny
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-15:
            return f
    raise ConvergenceError(
        f"continued fraction for the radial log-derivative stalled at rho={rho}")


def _log_derivative(n_max: int, rho: complex) -> np.ndarray:
    """D_n(rho) = psi_n'(rho)/psi_n(rho) for n = 0..n_max."""
    d = np.zeros(n_max + 1, dtype=complex)
    d[n_max] = 1.0 / _psi_ratio(n_max, rho) - n_max / rho
    for n in range(n_max, 0, -1):
        d[n - 1] = n / rho - 1.0 / (d[n] + n / rho)
    return d


def _riccati(n_max: int, x: float):
    """(psi, psi', xi, xi') for n = 0..n_max at real argument x.

    xi is the outgoing (second-kind Hankel) Riccati-Bessel function under
    the e^{+j omega t} convention.
    """
    ns = np.arange(n_max + 1)
    jn = spherical_jn(ns, x)
    jnp = spherical_jn(ns, x, derivative=True)
    yn = spherical_yn(ns, x)
    ynp = spherical_yn(ns, x, derivative=True)
    psi = x * jn
    psip = jn + x * jnp
    h2 = jn - 1j * yn
    h2p = jnp - 1j * ynp
    xi = x * h2
    xip = h2 + x * h2p
    return psi, psip, xi, xip


@dataclass(frozen=True)
class MieSolution:
    """Scattering and interior coefficients for one sphere and frequency."""

    frequency: float
    radius: float
    x: float                 # free-space size parameter
    m: complex               # relative refractive index (1.0 for PEC form)
    mu_rel: float
    a: np.ndarray            # scattered, TM (electric) multipoles, n = 1..N
    b: np.ndarray            # scattered, TE (magnetic) multipoles
    c: np.ndarray | None     # interior TE; None when the interior
    d: np.ndarray | None     # TM   is evanescent beyond double precision
    pec: bool = False

    @property
    def k0(self) -> float:
        return 2.0 * np.pi * self.frequency / C0

    @property
    def n_terms(self) -> int:
        return len(self.a)


def mie_coefficients(frequency: float, radius: float,
                     eps_rel: complex, mu_rel: float = 1.0,
                     sigma: float = 0.0, n_terms: int | None = None) -> MieSolution:
    """Solve the sphere-matching problem for a penetrable material."""
    if radius <= 0.0:
        raise MaterialError(f"sphere radius must be positive, got {radius}")
    omega = 2.0 * np.pi * frequency
    # fold any imaginary permittivity part into an equivalent conductivity
    sigma_eff = sigma - omega * np.imag(eps_rel) * EPS0
    mat = MaterialParams.from_relative(
        float(np.real(eps_rel)), mu_rel, sigma_eff, frequency)
    k0 = free_space_wavenumber(mat.omega)
    m = wavenumber(mat) / k0
    x = k0 * radius
    n_max = n_terms if n_terms is not None else suggested_terms(x)
    if n_max < 1:
        raise MaterialError(f"need at least one series term, got {n_max}")

    dn = _log_derivative(n_max, m * x)
    psi, psip, xi, xip = _riccati(n_max, x)
    g = m / mu_rel
    d1 = dn[1:]
    a = (g * psip[1:] - d1 * psi[1:]) / (g * xip[1:] - d1 * xi[1:])
    b = (psip[1:] - g * d1 * psi[1:]) / (xip[1:] - g * d1 * xi[1:])

    # interior coefficients need psi_n(mx) itself; skip when it overflows
    c = d = None
    if abs(np.imag(m * x)) < 600.0 and abs(m * x) < 1e4:
        mns = np.arange(n_max + 1)
        psi_m = (m * x) * spherical_jn(mns, complex(m * x))[1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            c = m * (psi[1:] - b * xi[1:]) / psi_m
            d = mu_rel * (psi[1:] - a * xi[1:]) / psi_m
        bad = ~np.isfinite(c) | ~np.isfinite(d) | (np.abs(psi_m) < 1e-250)
        c = np.where(bad, 0.0, c)
        d = np.where(bad, 0.0, d)

    return MieSolution(frequency, radius, x, m, mu_rel, a, b, c, d)


def pec_coefficients(frequency: float, radius: float,
                     n_terms: int | None = None) -> MieSolution:
    """Closed-form perfectly conducting sphere (boundary condition n x E = 0)."""
    k0 = 2.0 * np.pi * frequency / C0
    x = k0 * radius
    n_max = n_terms if n_terms is not None else suggested_terms(x)
    psi, psip, xi, xip = _riccati(n_max, x)
    a = psip[1:] / xip[1:]
    b = psi[1:] / xi[1:]
    return MieSolution(frequency, radius, x, 1.0 + 0.0j, 1.0, a, b,
                       None, None, pec=True)


def mie_from_material(mat: MaterialParams, radius: float,
                      n_terms: int | None = None) -> MieSolution:
    """Convenience wrapper taking absolute material constants."""
    from .media import EPS0
    f = mat.omega / (2.0 * np.pi)
    return mie_coefficients(f, radius, mat.epsilon / EPS0, mat.mu / MU0,
                            mat.sigma, n_terms)


# ---------------------------------------------------------------------------
# angular sums
# ---------------------------------------------------------------------------


def angular_functions(n_max: int, cos_theta: np.ndarray):
    """pi_n and tau_n for n = 1..n_max, shape (n_max, n_angles)."""
    mu = np.atleast_1d(np.asarray(cos_theta, dtype=float))
    pi = np.zeros((n_max + 1, len(mu)))
    pi[1] = 1.0
    tau = np.zeros_like(pi)
    tau[1] = mu
    for n in range(2, n_max + 1):
        pi[n] = ((2 * n - 1) * mu * pi[n - 1] - n * pi[n - 2]) / (n - 1)
        tau[n] = n * mu * pi[n] - (n + 1) * pi[n - 1]
    return pi[1:], tau[1:]


def scattering_amplitudes(sol: MieSolution, cos_theta):
    """(S1, S2): perpendicular and parallel scattering amplitudes."""
    mu = np.atleast_1d(np.asarray(cos_theta, dtype=float))
    pi_n, tau_n = angular_functions(sol.n_terms, mu)
    ns = np.arange(1, sol.n_terms + 1)
    fac = (2 * ns + 1) / (ns * (ns + 1.0))
    s1 = (fac * sol.a) @ pi_n + (fac * sol.b) @ tau_n
    s2 = (fac * sol.a) @ tau_n + (fac * sol.b) @ pi_n
    return s1, s2


def bistatic_rcs(sol: MieSolution, theta, plane: str = "e") -> np.ndarray:
    """Bistatic radar cross section (m^2) on a cut through the beam axis.

    plane="e": the cut containing the incident polarization (parallel
    amplitude); plane="h": the orthogonal cut (perpendicular amplitude).
    """
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    s1, s2 = scattering_amplitudes(sol, np.cos(th))
    s = s2 if plane.lower() == "e" else s1
    if plane.lower() not in ("e", "h"):
        raise ValueError(f"plane must be 'e' or 'h', got {plane!r}")
    return 4.0 * np.pi / sol.k0**2 * np.abs(s) ** 2


def cross_sections(sol: MieSolution):
    """(scattering, extinction, absorption) cross sections in m^2."""
    ns = np.arange(1, sol.n_terms + 1)
    w = 2.0 * ns + 1.0
    pref = 2.0 * np.pi / sol.k0**2
    sca = pref * np.sum(w * (np.abs(sol.a) ** 2 + np.abs(sol.b) ** 2))
    ext = pref * np.sum(w * np.real(sol.a + sol.b))
    return sca, ext, ext - sca


def to_dbsm(sigma) -> np.ndarray:
    """10 log10 of an area in m^2 (floor at 1e-300 to keep logs finite)."""
    return 10.0 * np.log10(np.maximum(np.asarray(sigma, dtype=float), 1e-300))


def rayleigh_backscatter(frequency: float, radius: float, eps_rel: complex) -> float:
    """Small-sphere (electrostatic-dipole) backscatter cross section."""
    x = 2.0 * np.pi * frequency / C0 * radius
    pol = (eps_rel - 1.0) / (eps_rel + 2.0)
    return float(4.0 * np.pi * radius**2 * x**4 * np.abs(pol) ** 2)


# ---------------------------------------------------------------------------
# near fields (for cross-checking surface traces)
# ---------------------------------------------------------------------------


def _spherical_frame(points: np.ndarray):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.linalg.norm(pts, axis=1)
    theta = np.arccos(np.clip(pts[:, 2] / np.maximum(r, 1e-300), -1.0, 1.0))
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    rhat = np.stack([st * cp, st * sp, ct], axis=1)
    that = np.stack([ct * cp, ct * sp, -st], axis=1)
    phat = np.stack([-sp, cp, np.zeros_like(sp)], axis=1)
    return pts, r, ct, st, cp, sp, rhat, that, phat


def _radial_functions(n_max: int, rho: np.ndarray, outgoing: bool):
    """z_n(rho) and [rho z_n]'(rho)/rho for n = 1..n_max (rows)."""
    ns = np.arange(n_max + 1)
    rho = np.asarray(rho)
    if np.iscomplexobj(rho):
        jn = np.stack([spherical_jn(ns, z) for z in rho], axis=1)
        jnp = np.stack([spherical_jn(ns, z, derivative=True) for z in rho], axis=1)
        if outgoing:
            yn = np.stack([spherical_yn(ns, z) for z in rho], axis=1)
            ynp = np.stack([spherical_yn(ns, z, derivative=True) for z in rho], axis=1)
    else:
        jn = spherical_jn(ns[:, None], rho[None, :])
        jnp = spherical_jn(ns[:, None], rho[None, :], derivative=True)
        if outgoing:
            yn = spherical_yn(ns[:, None], rho[None, :])
            ynp = spherical_yn(ns[:, None], rho[None, :], derivative=True)
    if outgoing:
        z = jn - 1j * yn
        zp = jnp - 1j * ynp
    else:
        z, zp = jn, jnp
    zr = z[1:] / rho[None, :]
    dz = zp[1:] + zr
    return z[1:], zr, dz


def _vswf_sum(coef_mo, coef_me, coef_no, coef_ne, k, points, outgoing: bool,
              e0: float = 1.0):
    """Sum of the four degree-1 vector wave families with given weights.

    Each coef_* is an array over n = 1..N (already including the plane-wave
    ladder factor); the radial function is j_n (regular) or the outgoing
    h^(2)_n.
    """
    n_max = len(coef_mo)
    pts, r, ct, st, cp, sp, rhat, that, phat = _spherical_frame(points)
    rho = k * r
    z, zr, dz = _radial_functions(n_max, rho, outgoing)
    pi_n, tau_n = angular_functions(n_max, ct)
    ns = np.arange(1, n_max + 1, dtype=float)
    ladder = e0 * (-1j) ** ns * (2 * ns + 1) / (ns * (ns + 1))

    def comp(weights, radial, angular):
        w = (weights * ladder)[:, None]
        return np.sum(w * radial * angular, axis=0)

    er = np.zeros(len(pts), dtype=complex)
    et = np.zeros_like(er)
    ep = np.zeros_like(er)
    if np.any(coef_mo):
        et += comp(coef_mo, z, pi_n) * cp
        ep -= comp(coef_mo, z, tau_n) * sp
    if np.any(coef_me):
        et -= comp(coef_me, z, pi_n) * sp
        ep -= comp(coef_me, z, tau_n) * cp
    nn1 = (ns * (ns + 1.0))[:, None]
    if np.any(coef_no):
        er += comp(coef_no, zr * nn1, pi_n * st[None, :]) * sp
        et += comp(coef_no, dz, tau_n) * sp
        ep += comp(coef_no, dz, pi_n) * cp
    if np.any(coef_ne):
        er += comp(coef_ne, zr * nn1, pi_n * st[None, :]) * cp
        et += comp(coef_ne, dz, tau_n) * cp
        ep -= comp(coef_ne, dz, pi_n) * sp
    return er[:, None] * rhat + et[:, None] * that + ep[:, None] * phat


def incident_plane_wave_fields(sol: MieSolution, points, e0: float = 1.0):
    """(E, H) of the incident wave evaluated through its multipole series."""
    n = sol.n_terms
    zero = np.zeros(n)
    one = np.ones(n)
    e = _vswf_sum(one, zero, zero, 1j * one, sol.k0, points, False, e0)
    h = _vswf_sum(zero, one, -1j * one, zero, sol.k0, points, False, e0)
    omega = 2.0 * np.pi * sol.frequency
    return e, -sol.k0 / (omega * MU0) * h


def scattered_fields(sol: MieSolution, points, e0: float = 1.0):
    """(E, H) of the scattered wave outside the sphere."""
    n = sol.n_terms
    zero = np.zeros(n)
    e = _vswf_sum(-sol.b, zero, zero, -1j * sol.a, sol.k0, points, True, e0)
    h = _vswf_sum(zero, sol.a, -1j * sol.b, zero, sol.k0, points, True, e0)
    omega = 2.0 * np.pi * sol.frequency
    return e, sol.k0 / (omega * MU0) * h


def total_exterior_fields(sol: MieSolution, points, e0: float = 1.0):
    ei, hi = incident_plane_wave_fields(sol, points, e0)
    es, hs = scattered_fields(sol, points, e0)
    return ei + es, hi + hs


def interior_fields(sol: MieSolution, points, e0: float = 1.0):
    """(E, H) inside the sphere; requires interior coefficients."""
    if sol.c is None or sol.d is None:
        raise MaterialError(
            "interior series unavailable: the material is too lossy for "
            "double-precision interior radial functions")
    n = sol.n_terms
    zero = np.zeros(n)
    k1 = sol.m * sol.k0
    e = _vswf_sum(sol.c, zero, zero, 1j * sol.d, k1, points, False, e0)
    h = _vswf_sum(zero, sol.d, -1j * sol.c, zero, k1, points, False, e0)
    omega = 2.0 * np.pi * sol.frequency
    mu1 = sol.mu_rel * MU0
    return e, -k1 / (omega * mu1) * h
