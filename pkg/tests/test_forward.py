import math

import mpmath
import numpy as np
import pytest

import dsct
from dsct.forward import log_projection
from dsct.spectra import align


def uniform_disc(grid, radius, value=1.0):
    xc, yc = grid.pixel_centers()
    xx, yy = np.meshgrid(xc, yc)
    return np.where(xx**2 + yy**2 <= radius**2, value, 0.0)


def make_aligned(weights, phis, thetas, de=1.0):
    w = np.asarray(weights, float)
    e = 20.0 + de * np.arange(w.size)
    spec = dsct.normalize(dsct.SpectrumTable(energies=e, weights=w, delta_e=de))
    mat = dsct.MaterialTable(energies=e if e.size > 1 else np.array([e[0], e[0] + 1]),
                             phi=np.asarray(phis, float),
                             theta=np.asarray(thetas, float))
    return align(spec, mat)


class TestLogProjection:
    def test_monochromatic_is_exact_linear(self):
        a = make_aligned([2.0], [0.3, 0.3], [0.1, 0.1])
        y1 = np.array([0.0, 1.7, 25.0])
        y2 = np.array([4.0, 0.2, 11.0])
        p = log_projection(y1, y2, a)
        expect = 0.3 * y1 + 0.1 * y2
        np.testing.assert_array_equal(p, expect)

    def test_zero_state_zero_projection(self):
        a = make_aligned([1.0, 2.0, 0.5], [0.3, 0.25, 0.2], [0.2, 0.18, 0.15])
        p = log_projection(np.zeros(3), np.zeros(3), a)
        np.testing.assert_allclose(p, 0.0, atol=1e-12)

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(8)
        sde = rng.uniform(0.05, 0.3, size=5)
        sde /= sde.sum()
        phi = rng.uniform(0.1, 0.5, size=5)
        th = rng.uniform(0.05, 0.3, size=5)
        a = dsct.spectra.AlignedSpectrum(
            energies=np.arange(5.0), sde=sde, phi=phi, theta=th, delta_e=1.0)
        y1 = rng.uniform(0, 40, size=12)
        y2 = rng.uniform(0, 40, size=12)
        got = log_projection(y1, y2, a)
        with mpmath.workdps(60):
            for k in range(12):
                acc = mpmath.mpf(0)
                for m in range(5):
                    acc += mpmath.mpf(sde[m]) * mpmath.exp(
                        -mpmath.mpf(phi[m]) * mpmath.mpf(y1[k])
                        - mpmath.mpf(th[m]) * mpmath.mpf(y2[k]))
                want = float(-mpmath.log(acc))
                assert got[k] == pytest.approx(want, rel=1e-13, abs=1e-13)

    def test_stable_at_extreme_attenuation(self):
        a = make_aligned([1.0, 1.0], [0.3, 0.2], [0.2, 0.1])
        p = log_projection(np.array([4000.0]), np.array([1000.0]), a)
        assert np.isfinite(p).all()
        assert p[0] > 900  # dominated by the softest bin

    def test_beam_hardening_jensen_bound(self):
        # polychromatic p is concave in path length: p <= sum sde*(phi,theta).y
        a = make_aligned([1.0, 1.0, 1.0], [0.4, 0.3, 0.2], [0.25, 0.2, 0.15])
        rng = np.random.default_rng(9)
        y1 = rng.uniform(0.1, 30, 50)
        y2 = rng.uniform(0.1, 30, 50)
        p = log_projection(y1, y2, a)
        linear = (a.sde * a.phi).sum() * y1 + (a.sde * a.theta).sum() * y2
        assert np.all(p <= linear + 1e-12)
        assert np.all(p[y1 + y2 > 1] < linear[y1 + y2 > 1])  # strict off zero


class TestForwardProject:
    def test_shapes_and_key(self, small_setup, tables):
        geom, grid, matrix = small_setup
        s_low, s_high, mats = tables
        pair = dsct.generate_pair(grid, dsct.fov_radius(geom), 5)
        sino = dsct.forward_project(pair, matrix, s_low, s_high, mats)
        assert sino.p1.shape == (geom.n_s, geom.n_d)
        assert sino.geometry_key == matrix.key

    def test_zero_pair_zero_sinogram(self, small_setup, tables):
        geom, grid, matrix = small_setup
        s_low, s_high, mats = tables
        z = np.zeros((grid.n_r, grid.n_r))
        sino = dsct.forward_project(dsct.ImagePair(f=z, g=z), matrix,
                                    s_low, s_high, mats)
        np.testing.assert_allclose(sino.p1, 0.0, atol=1e-12)
        np.testing.assert_allclose(sino.p2, 0.0, atol=1e-12)

    def test_low_kv_attenuates_more(self, small_setup, tables):
        geom, grid, matrix = small_setup
        s_low, s_high, mats = tables
        disc = uniform_disc(grid, 0.6 * dsct.fov_radius(geom))
        sino = dsct.forward_project(dsct.ImagePair(f=disc, g=disc), matrix,
                                    s_low, s_high, mats)
        sel = sino.p2 > 0.5
        assert np.all(sino.p1[sel] > sino.p2[sel])

    def test_rejects_unnormalized_spectrum(self, small_setup, tables):
        geom, grid, matrix = small_setup
        _, s_high, mats = tables
        raw = dsct.SpectrumTable(energies=np.array([30.0, 31.0]),
                                 weights=np.array([1.0, 1.0]), delta_e=1.0)
        z = np.zeros((grid.n_r, grid.n_r))
        with pytest.raises(ValueError, match="not normalized"):
            dsct.forward_project(dsct.ImagePair(f=z, g=z), matrix, raw, s_high, mats)

    def test_rejects_wrong_image_shape(self, small_setup, tables):
        _, _, matrix = small_setup
        s_low, s_high, mats = tables
        z = np.zeros((16, 16))
        with pytest.raises(ValueError, match="shape"):
            dsct.forward_project(dsct.ImagePair(f=z, g=z), matrix, s_low, s_high, mats)

    def test_mono_matches_matvec(self, small_setup, mono_tables):
        geom, grid, matrix = small_setup
        s_a, s_b, mats = mono_tables
        pair = dsct.generate_pair(grid, dsct.fov_radius(geom), 6)
        sino = dsct.forward_project(pair, matrix, s_a, s_b, mats)
        y1 = matrix.matvec(pair.f.ravel())
        y2 = matrix.matvec(pair.g.ravel())
        a = align(s_a, mats)
        want = (a.phi[0] * y1 + a.theta[0] * y2).reshape(geom.n_s, geom.n_d)
        np.testing.assert_array_equal(sino.p1, want)


class TestPoissonNoise:
    def test_deterministic(self, small_setup, tables):
        geom, grid, matrix = small_setup
        s_low, s_high, mats = tables
        pair = dsct.generate_pair(grid, dsct.fov_radius(geom), 7)
        sino = dsct.forward_project(pair, matrix, s_low, s_high, mats)
        n1 = dsct.add_poisson_noise(sino, 1e5, [3, 1])
        n2 = dsct.add_poisson_noise(sino, 1e5, [3, 1])
        n3 = dsct.add_poisson_noise(sino, 1e5, [3, 2])
        np.testing.assert_array_equal(n1.p1, n2.p1)
        np.testing.assert_array_equal(n1.p2, n2.p2)
        assert not np.array_equal(n1.p1, n3.p1)

    def test_zero_counts_clamp_to_log_i0(self):
        big = np.full((4, 4), 60.0)  # lambda ~ 1e5 * e^-60 ~ 0
        sino = dsct.SinogramPair(p1=big, p2=big, geometry_key="k")
        noisy = dsct.add_poisson_noise(sino, 1e5, 0)
        assert np.all(np.isfinite(noisy.p1))
        np.testing.assert_allclose(noisy.p1, math.log(1e5), rtol=1e-12)

    def test_mean_follows_lambda(self):
        p = np.full((50, 40), 2.0)
        sino = dsct.SinogramPair(p1=p, p2=p, geometry_key="k")
        i0 = 1e4
        lam = i0 * math.exp(-2.0)
        noisy = dsct.add_poisson_noise(sino, i0, 11)
        counts = i0 * np.exp(-noisy.p1)
        total = counts.sum()
        expect = lam * p.size
        assert abs(total - expect) <= 5 * math.sqrt(expect)

    def test_rejects_bad_i0(self):
        sino = dsct.SinogramPair(p1=np.zeros((2, 2)), p2=np.zeros((2, 2)),
                                 geometry_key="k")
        with pytest.raises(ValueError, match="i0"):
            dsct.add_poisson_noise(sino, 0.0, 1)

    def test_rejects_nonfinite_sinogram(self):
        p = np.array([[np.nan, 0.0], [0.0, 0.0]])
        sino = dsct.SinogramPair(p1=p, p2=p, geometry_key="k")
        with pytest.raises(ValueError, match="non-finite"):
            dsct.add_poisson_noise(sino, 1e5, 1)
