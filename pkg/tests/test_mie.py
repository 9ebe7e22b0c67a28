import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piescat import mie
from piescat.errors import MaterialError
from piescat.media import ETA0


@pytest.fixture(scope="module")
def glass_sphere():
    # eps_r = 4 at 300 MHz, a = 0.3 m: size parameter ~1.9, index 2
    return mie.mie_coefficients(3e8, 0.3, 4.0)


class TestCoefficients:
    def test_frozen_values(self, glass_sphere):
        sol = glass_sphere
        assert sol.x == pytest.approx(1.8862605197565134, rel=1e-13)
        assert sol.m == pytest.approx(2.0, rel=1e-9)
        assert sol.a[0] == pytest.approx(
            0.9330530274868094 + 0.24993014100846014j, rel=1e-10)
        assert sol.b[0] == pytest.approx(
            0.8258010478556221 - 0.3792804730225095j, rel=1e-10)

    def test_lossy_branch(self):
        sol = mie.mie_coefficients(1e9, 0.1, 2.0, sigma=0.5)
        assert sol.m.imag < 0.0

    def test_bad_inputs(self):
        with pytest.raises(MaterialError):
            mie.mie_coefficients(1e9, -1.0, 4.0)
        with pytest.raises(MaterialError):
            mie.mie_coefficients(1e9, 0.1, 4.0, n_terms=0)


class TestEnergyBalance:
    def test_lossless_unitarity(self, glass_sphere):
        sca, ext, absorbed = mie.cross_sections(glass_sphere)
        assert ext == pytest.approx(sca, rel=1e-10)
        assert abs(absorbed) <= 1e-10 * sca

    def test_frozen_cross_sections(self, glass_sphere):
        sca, _, _ = mie.cross_sections(glass_sphere)
        assert sca == pytest.approx(1.0943354463998374, rel=1e-12)
        sca, ext, absorbed = mie.cross_sections(
            mie.mie_coefficients(1e9, 0.1, 2.0, sigma=0.5))
        assert sca == pytest.approx(0.05278735141178471, rel=1e-10)
        assert ext == pytest.approx(0.09526324572011409, rel=1e-10)
        assert absorbed == pytest.approx(0.04247589430832938, rel=1e-10)

    def test_scattering_integral_matches_series(self, glass_sphere):
        # integrate |S|^2 over the sphere and compare with the series sum
        sol = glass_sphere
        xs, ws = np.polynomial.legendre.leggauss(4 * sol.n_terms)
        s1, s2 = mie.scattering_amplitudes(sol, xs)
        sca_int = np.pi / sol.k0**2 * np.sum(
            ws * (np.abs(s1) ** 2 + np.abs(s2) ** 2))
        sca, _, _ = mie.cross_sections(sol)
        assert sca_int == pytest.approx(sca, rel=1e-12)

    def test_forward_amplitude_theorem(self):
        sol = mie.mie_coefficients(2e9, 0.15, 3.0 - 0.2j, sigma=0.05)
        s1, s2 = mie.scattering_amplitudes(sol, 1.0)
        assert s1[0] == pytest.approx(s2[0], rel=1e-12)
        _, ext, _ = mie.cross_sections(sol)
        assert 4.0 * np.pi / sol.k0**2 * s1[0].real == pytest.approx(
            ext, rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(eps=st.floats(1.1, 40.0), sigma=st.floats(0.0, 1e4),
           logf=st.floats(6.0, 10.0))
    def test_absorption_nonnegative(self, eps, sigma, logf):
        sol = mie.mie_coefficients(10.0**logf, 0.1, eps, sigma=sigma)
        sca, ext, absorbed = mie.cross_sections(sol)
        assert absorbed >= -1e-10 * max(ext, 1e-30)


class TestLimits:
    def test_rayleigh_backscatter(self):
        f, a = 1e6, 0.01  # x ~ 2e-4
        sol = mie.mie_coefficients(f, a, 4.0)
        back = mie.bistatic_rcs(sol, np.pi, "e")[0]
        assert back == pytest.approx(
            mie.rayleigh_backscatter(f, a, 4.0), rel=1e-2)

    def test_pec_surrogate_matches_closed_form(self):
        f, a = 3e8, 0.5
        pec = mie.pec_coefficients(f, a)
        surrogate = mie.mie_coefficients(f, a, 1.0, sigma=1e12)
        th = np.linspace(0.0, np.pi, 37)
        for plane in ("e", "h"):
            r1 = mie.bistatic_rcs(pec, th, plane)
            r2 = mie.bistatic_rcs(surrogate, th, plane)
            assert np.max(np.abs(r1 - r2) / r1) < 1e-3

    def test_geometric_optics_backscatter(self):
        # large PEC sphere: monostatic RCS -> pi a^2
        f, a = 6e9, 0.5  # x ~ 63
        pec = mie.pec_coefficients(f, a)
        back = mie.bistatic_rcs(pec, np.pi, "e")[0]
        assert back == pytest.approx(np.pi * a**2, rel=0.05)

    def test_truncation_independence(self, glass_sphere):
        sol = glass_sphere
        longer = mie.mie_coefficients(3e8, 0.3, 4.0,
                                      n_terms=sol.n_terms + 10)
        th = np.linspace(0.0, np.pi, 73)
        for plane in ("e", "h"):
            d1 = mie.to_dbsm(mie.bistatic_rcs(sol, th, plane))
            d2 = mie.to_dbsm(mie.bistatic_rcs(longer, th, plane))
            assert np.max(np.abs(d1 - d2)) < 1e-6


class TestAngularCuts:
    def test_frozen_rcs(self, glass_sphere):
        r = mie.bistatic_rcs(glass_sphere, np.array([0.0, np.pi / 2, np.pi]),
                             "e")
        assert r == pytest.approx(
            [4.78987794, 0.95010429, 0.25280308], rel=1e-7)

    def test_cuts_agree_on_axis(self, glass_sphere):
        for th in (0.0, np.pi):
            re = mie.bistatic_rcs(glass_sphere, th, "e")[0]
            rh = mie.bistatic_rcs(glass_sphere, th, "h")[0]
            assert re == pytest.approx(rh, rel=1e-12)

    def test_bad_plane(self, glass_sphere):
        with pytest.raises(ValueError):
            mie.bistatic_rcs(glass_sphere, 0.5, plane="x")

    def test_dbsm_floor(self):
        assert np.isfinite(mie.to_dbsm(0.0))


class TestNearFields:
    def test_incident_series_is_plane_wave(self, glass_sphere):
        sol = glass_sphere
        pts = np.array([[0.1, 0.05, 0.2], [0.0, 0.25, -0.1],
                        [0.21, -0.03, 0.08]])
        e, h = mie.incident_plane_wave_fields(sol, pts)
        phase = np.exp(-1j * sol.k0 * pts[:, 2])
        e_exact = np.zeros_like(e)
        e_exact[:, 0] = phase
        h_exact = np.zeros_like(h)
        h_exact[:, 1] = phase / ETA0
        assert np.abs(e - e_exact).max() < 1e-13
        assert np.abs(h - h_exact).max() < 1e-13 / ETA0 * 400

    def test_tangential_continuity(self):
        # lossy magnetic dielectric: exercises every coefficient family
        a = 0.3
        sol = mie.mie_coefficients(3e8, a, 4.0 - 0.5j, mu_rel=2.0)
        rng = np.random.default_rng(7)
        u = rng.normal(size=(50, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        e_out, h_out = mie.total_exterior_fields(sol, u * a)
        e_in, h_in = mie.interior_fields(sol, u * a)
        scale_e = np.abs(np.cross(u, e_out)).max()
        scale_h = np.abs(np.cross(u, h_out)).max()
        assert np.abs(np.cross(u, e_out - e_in)).max() < 1e-8 * scale_e
        assert np.abs(np.cross(u, h_out - h_in)).max() < 1e-8 * scale_h

    def test_normal_displacement_and_flux_jumps(self):
        # eps E_n and mu H_n are continuous for a nonmagnetic conductor too
        a = 0.2
        eps_r, sigma, f = 3.0, 0.02, 5e8
        sol = mie.mie_coefficients(f, a, eps_r, sigma=sigma)
        omega = 2 * np.pi * f
        eps_c_in = eps_r - 1j * sigma / (omega * 8.8541878128e-12)
        rng = np.random.default_rng(3)
        u = rng.normal(size=(30, 3))
        u /= np.linalg.norm(u, axis=1)[:, None]
        e_out, h_out = mie.total_exterior_fields(sol, u * a)
        e_in, h_in = mie.interior_fields(sol, u * a)
        dn = np.einsum("ij,ij->i", u, e_out) - eps_c_in * np.einsum(
            "ij,ij->i", u, e_in)
        bn = np.einsum("ij,ij->i", u, h_out - h_in)
        assert np.abs(dn).max() < 1e-8 * np.abs(e_out).max()
        assert np.abs(bn).max() < 1e-8 * np.abs(h_out).max()

    def test_scattered_far_field_matches_rcs(self, glass_sphere):
        sol = glass_sphere
        theta = 0.7
        bigr = 8000.0
        pt = bigr * np.array([[np.sin(theta), 0.0, np.cos(theta)]])
        e, _ = mie.scattered_fields(sol, pt)
        sigma = 4.0 * np.pi * bigr**2 * np.sum(np.abs(e) ** 2)
        expected = mie.bistatic_rcs(sol, theta, "e")[0]
        assert sigma == pytest.approx(expected, rel=2e-3)

    def test_interior_unavailable_for_metal(self):
        sol = mie.mie_coefficients(3e8, 0.5, 1.0, sigma=1e12)
        assert sol.c is None
        with pytest.raises(MaterialError):
            mie.interior_fields(sol, np.array([[0.1, 0.0, 0.0]]))
