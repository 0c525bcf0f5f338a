"""Imaging forward model: photon budget, defocus PSF, synthetic histograms."""

import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.signal import find_peaks
from scipy.special import j0, j1
from scipy.stats import chisquare, norm

from tweezerlab.constants import DEFAULT_CONSTANTS, LAMBDA_A
from tweezerlab.imaging import (
    IMAGING_NA,
    CameraModel,
    CountHistogram,
    capture_fraction,
    counts_from_photons,
    defocused_counts,
    photons_from_counts,
    psf_amplitude,
    psf_plane_energy,
    recoil_heating,
    synth_histogram,
)

MEMBRANE_PARAMS = SimpleNamespace(
    P_n=[1.0, 0.0, 0.0, 0.0], I_bg=221.0, w_bg=138.0, I_a=853.0, w=8.4
)


class TestCameraModel:
    def test_defaults(self):
        cam = CameraModel()
        assert cam.counts_per_photon == pytest.approx(0.0225, rel=1e-12)
        assert cam.counting_half_width == pytest.approx(2.4e-6, rel=1e-12)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            CameraModel(em_gain=0.0)
        with pytest.raises(ValueError):
            CameraModel(exposure=-1e-3)
        with pytest.raises(ValueError):
            CameraModel(counting_pixels=0)

    def test_rejects_efficiency_above_one(self):
        with pytest.raises(ValueError):
            CameraModel(quantum_efficiency=1.2)


class TestPhotonPipeline:
    def test_thousand_counts(self):
        n_p = photons_from_counts(1000.0, CameraModel())
        assert n_p == pytest.approx(44444.444444444444, rel=1e-12)

    def test_zero(self):
        assert photons_from_counts(0.0, CameraModel()) == 0.0
        assert counts_from_photons(0.0, CameraModel()) == 0.0

    @pytest.mark.parametrize("counts", [1.0, 37.5, 1000.0, 2.5e6])
    def test_round_trip(self, counts):
        cam = CameraModel()
        back = counts_from_photons(photons_from_counts(counts, cam), cam)
        assert back == pytest.approx(counts, rel=1e-12)

    def test_linear(self):
        cam = CameraModel()
        a = photons_from_counts(300.0, cam)
        b = photons_from_counts(700.0, cam)
        assert a + b == pytest.approx(
            photons_from_counts(1000.0, cam), rel=1e-12
        )

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            photons_from_counts(-1.0, CameraModel())
        with pytest.raises(ValueError):
            counts_from_photons(-1.0, CameraModel())


class TestRecoilHeating:
    def test_imaging_budget(self):
        d_t = recoil_heating(45000.0)
        assert d_t == pytest.approx(2.9775e-3, rel=1e-4)
        assert abs(d_t - 2.97e-3) < 0.05e-3

    def test_recoil_temperature_scale(self):
        # one photon heats by two thirds of the recoil temperature
        c = DEFAULT_CONSTANTS
        assert recoil_heating(1.0) == pytest.approx(
            (2.0 / 3.0) * c.E_R / c.k_B, rel=1e-12
        )

    def test_zero_and_linear(self):
        assert recoil_heating(0.0) == 0.0
        assert recoil_heating(9000.0) == pytest.approx(
            3.0 * recoil_heating(3000.0), rel=1e-12
        )

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            recoil_heating(-5.0)


def defocus_parameter(z):
    return 2.0 * np.pi / LAMBDA_A * IMAGING_NA**2 * z


class TestDefocusPsf:
    def test_focus_is_airy(self):
        v = np.array([0.3, 1.0, 3.8317, 6.0, 12.0, 40.0])
        expect = 2.0 * j1(v) / v
        got = psf_amplitude(v, 0.0)
        assert np.abs(got - expect).max() < 1e-12

    def test_quadrature_matches_encircled_energy(self):
        # truncated plane energy at focus has the closed form
        # 2 (1 - J0(vmax)^2 - J1(vmax)^2)
        vmax = 60.0
        expect = 2.0 * (1.0 - j0(vmax) ** 2 - j1(vmax) ** 2)
        assert psf_plane_energy(0.0, vmax) == pytest.approx(expect, abs=1e-6)

    def test_energy_defocus_independent(self):
        e0 = psf_plane_energy(0.0)
        for z in (5e-6, 10e-6, 15e-6):
            ez = psf_plane_energy(defocus_parameter(z))
            assert abs(ez / e0 - 1.0) < 0.005

    def test_in_focus_capture(self):
        cam = CameraModel()
        frac0 = capture_fraction(0.0, cam)
        assert frac0 == pytest.approx(0.910239, abs=5e-5)
        # the inscribed circle alone captures slightly less; the corner band
        # adds under a percent
        v_half = 2.0 * np.pi / LAMBDA_A * IMAGING_NA * cam.counting_half_width
        circle = 1.0 - j0(v_half) ** 2 - j1(v_half) ** 2
        assert circle < frac0 < circle + 0.01

    def test_defocused_capture(self):
        cam = CameraModel()
        assert capture_fraction(10e-6, cam) == pytest.approx(
            0.663098, abs=1e-4
        )
        assert capture_fraction(15e-6, cam) == pytest.approx(
            0.355466, abs=1e-4
        )

    def test_monotone_decrease(self):
        cam = CameraModel()
        fr = [capture_fraction(z * 1e-6, cam) for z in range(16)]
        slack = 0.01 * fr[0]
        assert all(fr[i + 1] <= fr[i] + slack for i in range(15))

    def test_sign_symmetric(self):
        cam = CameraModel()
        assert capture_fraction(-7e-6, cam) == pytest.approx(
            capture_fraction(7e-6, cam), rel=1e-12
        )

    def test_invalid_aperture(self):
        with pytest.raises(ValueError):
            capture_fraction(0.0, CameraModel(), numerical_aperture=1.5)


class TestDefocusedCounts:
    def test_bare_dipole_when_no_reflection(self):
        cam = CameraModel()
        got = defocused_counts(4e-6, cam, 0.0, 45000.0)
        expect = capture_fraction(4e-6, cam) * counts_from_photons(
            45000.0, cam
        )
        assert got == pytest.approx(expect, rel=1e-12)

    def test_image_term_scales_with_reflectance(self):
        # mirror emitter sits at the same defocus magnitude, so the image
        # term is an exact multiplicative factor here
        cam = CameraModel()
        bare = defocused_counts(6e-6, cam, 0.0, 45000.0)
        with_image = defocused_counts(6e-6, cam, 0.3, 45000.0)
        assert with_image == pytest.approx(1.3 * bare, rel=1e-12)

    def test_in_focus_maximal(self):
        cam = CameraModel()
        peak = defocused_counts(0.0, cam, 0.3, 45000.0)
        for z in (1e-6, 5e-6, 10e-6, 15e-6):
            assert defocused_counts(z, cam, 0.3, 45000.0) <= peak

    def test_ten_micron_retains_order_unity(self):
        cam = CameraModel()
        ratio = defocused_counts(10e-6, cam, 0.3, 45000.0) / defocused_counts(
            0.0, cam, 0.3, 45000.0
        )
        assert ratio > 0.3

    def test_validation(self):
        cam = CameraModel()
        with pytest.raises(ValueError):
            defocused_counts(-1e-6, cam, 0.3, 45000.0)
        with pytest.raises(ValueError):
            defocused_counts(1e-6, cam, 1.5, 45000.0)


class TestCountHistogram:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            CountHistogram(np.array([0.0, 1.0, 1.0]), np.array([1, 1]), 2)
        with pytest.raises(ValueError):
            CountHistogram(np.array([0.0, 1.0]), np.array([-1]), -1)
        with pytest.raises(ValueError):
            CountHistogram(np.array([0.0, 1.0]), np.array([2]), 3)
        with pytest.raises(ValueError):
            CountHistogram(np.array([0.0, 1.0]), np.array([1.5]), 1)

    def test_accessors(self):
        h = CountHistogram(np.array([0.0, 25.0, 50.0]), np.array([2, 3]), 5)
        assert np.allclose(h.bin_centers, [12.5, 37.5])
        assert h.bin_width == 25.0


class TestSynthHistogram:
    def test_occurrences_sum_to_shots(self):
        h = synth_histogram(
            MEMBRANE_PARAMS, 500, np.random.default_rng(3), nbar=1.0
        )
        assert int(h.occurrences.sum()) == 500

    def test_deterministic_per_seed(self):
        a = synth_histogram(MEMBRANE_PARAMS, 800, np.random.default_rng(11))
        b = synth_histogram(MEMBRANE_PARAMS, 800, np.random.default_rng(11))
        assert np.array_equal(a.bin_edges, b.bin_edges)
        assert np.array_equal(a.occurrences, b.occurrences)

    def test_background_only_is_normal(self):
        # all shots at n = 0: binned counts must be consistent with a
        # Gaussian at I_bg of standard deviation w_bg / sqrt(2)
        h = synth_histogram(MEMBRANE_PARAMS, 3000, np.random.default_rng(19))
        sigma = MEMBRANE_PARAMS.w_bg / math.sqrt(2.0)
        cdf = norm.cdf(h.bin_edges, loc=MEMBRANE_PARAMS.I_bg, scale=sigma)
        prob = np.diff(cdf)
        prob[0] += cdf[0]
        prob[-1] += 1.0 - cdf[-1]
        expected = 3000 * prob
        observed = h.occurrences.astype(float)
        # pool sparse tail bins so the chi-square approximation holds
        obs_pooled, exp_pooled = [], []
        acc_o = acc_e = 0.0
        for o, e in zip(observed, expected):
            acc_o += o
            acc_e += e
            if acc_e >= 5.0:
                obs_pooled.append(acc_o)
                exp_pooled.append(acc_e)
                acc_o = acc_e = 0.0
        obs_pooled[-1] += acc_o
        exp_pooled[-1] += acc_e
        stat, p_value = chisquare(obs_pooled, exp_pooled)
        assert p_value > 0.05

    def test_occupancy_mean_tracks_nbar(self):
        _, n = synth_histogram(
            MEMBRANE_PARAMS,
            4000,
            np.random.default_rng(23),
            nbar=1.0,
            return_occupancy=True,
        )
        assert abs(n.mean() - 1.0) < 3.0 * math.sqrt(1.0 / 4000)

    def test_peak_separation(self):
        h = synth_histogram(
            MEMBRANE_PARAMS, 4000, np.random.default_rng(29), nbar=1.0
        )
        peaks, props = find_peaks(
            h.occurrences.astype(float), prominence=20.0
        )
        assert peaks.size >= 2
        order = np.argsort(props["prominences"])[::-1]
        top = np.sort(h.bin_centers[peaks[order[:2]]])
        assert top[1] - top[0] == pytest.approx(853.0, abs=50.0)

    def test_explicit_occupancy_split(self):
        params = SimpleNamespace(
            P_n=[0.25, 0.75], I_bg=221.0, w_bg=138.0, I_a=853.0, w=8.4
        )
        _, n = synth_histogram(
            params, 4000, np.random.default_rng(31), return_occupancy=True
        )
        assert abs(n.mean() - 0.75) < 3.0 * math.sqrt(0.25 * 0.75 / 4000)

    def test_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            synth_histogram(MEMBRANE_PARAMS, 0, rng)
        with pytest.raises(ValueError):
            synth_histogram(MEMBRANE_PARAMS, 10, rng, bin_width=0.0)
        with pytest.raises(ValueError):
            synth_histogram(MEMBRANE_PARAMS, 10, rng, nbar=-1.0)
        bad = SimpleNamespace(
            P_n=[-1.0, 2.0], I_bg=221.0, w_bg=138.0, I_a=853.0, w=8.4
        )
        with pytest.raises(ValueError):
            synth_histogram(bad, 10, rng)
