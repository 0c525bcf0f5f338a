"""Fluorescence imaging forward model.

Photon budget for EMCCD count conversion, recoil heating accumulated over an
imaging exposure, a paraxial defocus point-spread function with a mirror-image
emitter term for the reflective surface, and synthetic count histograms used
to validate the fitting pipeline.

The PSF block works in the reduced optical coordinates v = k * NA * rho
(radial) and u = k * NA^2 * z (defocus); intensities are normalized so the
full image plane integrates to 1 independent of defocus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import j0

from .constants import DEFAULT_CONSTANTS, LAMBDA_A, PhysicalConstants

__all__ = [
    "CameraModel",
    "CountHistogram",
    "IMAGING_NA",
    "photons_from_counts",
    "counts_from_photons",
    "recoil_heating",
    "psf_amplitude",
    "psf_plane_energy",
    "capture_fraction",
    "defocused_counts",
    "synth_histogram",
]

# objective aperture used for imaging; the tweezer and the imaging path share
# the same objective
IMAGING_NA = 0.35

# pupil integral is smooth once the Bessel oscillation is resolved; 256
# Gauss-Legendre nodes hold ~1e-12 accuracy out to v ~ 60
_PUPIL_NODES = 256
_RADIAL_NODES = 512


@dataclass(frozen=True)
class CameraModel:
    """EMCCD acquisition settings for single-atom fluorescence.

    counting_pixels is the side length, in pixels, of the centred square
    over which counts are summed per shot.
    """

    adc_electrons_per_count: float = 3.0
    em_gain: float = 30.0
    quantum_efficiency: float = 0.5
    optics_transmittance: float = 0.15
    collection_fraction: float = 0.03
    pixel_pitch: float = 800e-9
    exposure: float = 30e-3
    counting_pixels: int = 6

    def __post_init__(self) -> None:
        for name in (
            "adc_electrons_per_count",
            "em_gain",
            "quantum_efficiency",
            "optics_transmittance",
            "collection_fraction",
            "pixel_pitch",
            "exposure",
        ):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        for name in (
            "quantum_efficiency",
            "optics_transmittance",
            "collection_fraction",
        ):
            if getattr(self, name) > 1.0:
                raise ValueError(f"{name} must not exceed 1")
        if self.counting_pixels < 1:
            raise ValueError("counting_pixels must be at least 1")

    @property
    def counts_per_photon(self) -> float:
        """Mean recorded counts per photon emitted by the atom."""
        return (
            self.em_gain
            * self.quantum_efficiency
            * self.optics_transmittance
            * self.collection_fraction
            / self.adc_electrons_per_count
        )

    @property
    def counting_half_width(self) -> float:
        """Half side length of the counting square in the image plane."""
        return 0.5 * self.counting_pixels * self.pixel_pitch


def photons_from_counts(counts: float, camera: CameraModel) -> float:
    """Photons an atom must scatter to produce the recorded counts."""
    if counts < 0.0:
        raise ValueError("counts must be non-negative")
    return counts / camera.counts_per_photon


def counts_from_photons(n_photons: float, camera: CameraModel) -> float:
    """Exact inverse of photons_from_counts."""
    if n_photons < 0.0:
        raise ValueError("n_photons must be non-negative")
    return n_photons * camera.counts_per_photon


def recoil_heating(
    n_photons: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> float:
    """Temperature rise in kelvin after scattering n_photons.

    Counter-propagating imaging beams cancel the mean momentum transfer, so
    heating comes from the recoil random walk: (2/3) N_p E_R / k_B.
    """
    if n_photons < 0.0:
        raise ValueError("n_photons must be non-negative")
    return (2.0 / 3.0) * n_photons * constants.E_R / constants.k_B


@lru_cache(maxsize=4)
def _gauss_legendre(n: int, a: float, b: float):
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def psf_amplitude(v, u: float) -> np.ndarray:
    """Complex defocused pupil integral 2 * int_0^1 J0(v s) e^{i u s^2/2} s ds.

    v may be an array; u is the scalar defocus parameter. At u = 0 this is
    the Airy amplitude 2 J1(v)/v.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    s, w = _gauss_legendre(_PUPIL_NODES, 0.0, 1.0)
    phase = np.exp(0.5j * u * s * s) * s * w
    return 2.0 * (j0(np.outer(v, s)) @ phase)


def psf_plane_energy(u: float, v_max: float = 60.0) -> float:
    """Image-plane energy int_0^{v_max} |h(v,u)|^2 v dv.

    The full-plane value is exactly 2 for every defocus (pupil Parseval);
    truncation at v_max leaves a small defocus-independent tail, so ratios
    between defocus values test energy conservation of the quadrature.
    """
    v, w = _gauss_legendre(_RADIAL_NODES, 0.0, float(v_max))
    inten = np.abs(psf_amplitude(v, u)) ** 2
    return float(np.sum(w * inten * v))


def _square_arc(v: np.ndarray, v_half: float) -> np.ndarray:
    """Angular coverage of a centred square, half-width v_half, at radius v.

    Full circle inside the inscribed radius; between v_half and the corner
    radius v_half*sqrt(2) the circle pokes out past each of the four edges.
    """
    out = np.full_like(v, 2.0 * np.pi)
    band = v > v_half
    ratio = np.clip(v_half / np.where(band, v, 1.0), -1.0, 1.0)
    out[band] = 2.0 * np.pi - 8.0 * np.arccos(ratio[band])
    return np.clip(out, 0.0, None)


def capture_fraction(
    defocus: float,
    camera: CameraModel,
    wavelength: float = LAMBDA_A,
    numerical_aperture: float = IMAGING_NA,
) -> float:
    """Fraction of the imaged dipole energy inside the counting square.

    defocus is the emitter's signed distance from the focal plane; the
    fraction depends only on its magnitude in this scalar model.
    """
    if not 0.0 < numerical_aperture < 1.0:
        raise ValueError("numerical_aperture must lie in (0, 1)")
    k = 2.0 * np.pi / wavelength
    u = k * numerical_aperture**2 * defocus
    v_half = k * numerical_aperture * camera.counting_half_width
    v, w = _gauss_legendre(_RADIAL_NODES, 0.0, v_half * math.sqrt(2.0))
    inten = np.abs(psf_amplitude(v, u)) ** 2
    arc = _square_arc(v, v_half)
    # full-plane energy is exactly 2, so the captured share needs no
    # numerically truncated denominator
    return float(np.sum(w * inten * arc * v) / (4.0 * np.pi))


def defocused_counts(
    atom_z: float,
    camera: CameraModel,
    r_membrane: float,
    n_photons: float,
    wavelength: float = LAMBDA_A,
    numerical_aperture: float = IMAGING_NA,
) -> float:
    """Expected counts in the counting square from an atom at height atom_z.

    The surface sits at image focus, so the atom is defocused by atom_z and
    its reflection appears as a second emitter at -atom_z weighted by the
    surface reflectance.
    """
    if atom_z < 0.0:
        raise ValueError("atom_z must be non-negative")
    if not 0.0 <= r_membrane <= 1.0:
        raise ValueError("r_membrane must lie in [0, 1]")
    direct = capture_fraction(atom_z, camera, wavelength, numerical_aperture)
    if r_membrane > 0.0:
        mirror = capture_fraction(
            -atom_z, camera, wavelength, numerical_aperture
        )
        direct = direct + r_membrane * mirror
    return direct * counts_from_photons(n_photons, camera)


@dataclass(frozen=True)
class CountHistogram:
    """Binned fluorescence counts over n_shots camera exposures."""

    bin_edges: np.ndarray
    occurrences: np.ndarray
    n_shots: int

    def __post_init__(self) -> None:
        edges = np.asarray(self.bin_edges, dtype=float)
        occ = np.asarray(self.occurrences)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "occurrences", occ)
        if edges.ndim != 1 or edges.size < 2:
            raise ValueError("bin_edges needs at least two entries")
        if not np.all(np.diff(edges) > 0.0):
            raise ValueError("bin_edges must be strictly increasing")
        if occ.shape != (edges.size - 1,):
            raise ValueError("occurrences must have one entry per bin")
        if np.any(occ < 0) or not np.issubdtype(occ.dtype, np.integer):
            raise ValueError("occurrences must be non-negative integers")
        if int(occ.sum()) != self.n_shots:
            raise ValueError("occurrences must sum to n_shots")

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])


def _count_moments(params, n: np.ndarray):
    mean = params.I_bg + n * params.I_a
    sigma = np.where(
        n == 0,
        params.w_bg / math.sqrt(2.0),
        params.w * np.sqrt(np.abs(mean)) / math.sqrt(2.0),
    )
    return mean, sigma


def synth_histogram(
    params,
    n_shots: int,
    rng: np.random.Generator,
    nbar: float | None = None,
    bin_width: float = 25.0,
    return_occupancy: bool = False,
):
    """Draw a synthetic count histogram from the composite-Gaussian model.

    params supplies the counts-domain scalars I_bg, w_bg, I_a, w and, when
    nbar is None, the occupancy weights P_n; with nbar given, occupancies
    are Poisson-distributed instead. Each shot draws an occupancy n and a
    count from the n-th Gaussian component. Deterministic for a given rng
    state; with return_occupancy the drawn occupancies come back alongside
    the histogram.
    """
    if n_shots < 1:
        raise ValueError("n_shots must be at least 1")
    if bin_width <= 0.0:
        raise ValueError("bin_width must be positive")
    if nbar is None:
        weights = np.asarray(params.P_n, dtype=float)
        if weights.ndim != 1 or weights.size == 0:
            raise ValueError("params.P_n must be a non-empty 1-d sequence")
        if np.any(weights < 0.0) or weights.sum() <= 0.0:
            raise ValueError("params.P_n must be non-negative with mass")
        n = rng.choice(weights.size, size=n_shots, p=weights / weights.sum())
    else:
        if nbar < 0.0:
            raise ValueError("nbar must be non-negative")
        n = rng.poisson(nbar, size=n_shots)
    mean, sigma = _count_moments(params, n)
    counts = rng.normal(mean, sigma)

    lo = math.floor(counts.min() / bin_width) * bin_width
    hi = math.ceil(counts.max() / bin_width) * bin_width
    if hi <= lo:
        hi = lo + bin_width
    n_bins = int(round((hi - lo) / bin_width))
    edges = lo + bin_width * np.arange(n_bins + 1)
    occurrences, _ = np.histogram(counts, bins=edges)
    hist = CountHistogram(edges, occurrences, n_shots)
    if return_occupancy:
        return hist, n
    return hist
