"""Focused tweezer and conveyor beam fields above the layered stack.

Scalar angular-spectrum model.  The focused top beam is a superposition of
plane waves over incidence angles theta in [0, arcsin NA] with a Gaussian
pupil apodization; the apodization width is calibrated numerically so the
focal 1/e^2 intensity radius equals the specified waist (the aperture
truncation at NA makes the paraxial relation s0 = lambda/(pi w0) inexact).

Conventions:
  * field_above_stack coordinates: z measured up from the top surface, z > 0;
    the tweezer focus sits at z = focus_offset and propagates downward
    (phase exp(-i k cos(theta) (z - z_f))).
  * the reflected field is the image beam: each angular component is weighted
    by the stack's amplitude reflection (S/P averaged) including its phase,
    and propagates upward from the image focus at -z_f.
  * |E|^2 is intensity in W/m^2; each beam is normalized so its transverse
    power integral equals the beam power.
  * the bottom conveyor beam crosses the stack at normal incidence, scaled by
    the amplitude transmission t(0), and is treated as collimated over the
    ~20 um working region (its Rayleigh range at 7 um waist is ~160 um).
    "In phase" (relative_phase = 0) means constructive interference with the
    reflected top field at the first stationary-lattice site; this is a
    convention, the experiment only controls the phase differentially.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import brentq
from scipy.special import j0

from .layers import LayerStack, stack_response

TOP_DOWN = "top-down"
BOTTOM_UP = "bottom-up"

_CONVERGENCE_RTOL = 1e-6
_MAX_ORDER = 2048


class QuadratureError(RuntimeError):
    """Angular quadrature failed to converge; carries the achieved tolerance."""

    def __init__(self, achieved: float, requested: float = _CONVERGENCE_RTOL):
        self.achieved = achieved
        self.requested = requested
        super().__init__(
            f"quadrature did not converge: achieved {achieved:.2e}, "
            f"requested {requested:.2e}"
        )


@dataclass(frozen=True)
class BeamSpec:
    """One beam: wavelength, power, focal waist and aperture."""

    wavelength: float
    power: float
    waist: float
    numerical_aperture: float
    direction: str = TOP_DOWN
    frequency_offset: float = 0.0
    phase_offset: float = 0.0

    def __post_init__(self):
        if not 0 < self.numerical_aperture < 1:
            raise ValueError("NA must lie in (0, 1)")
        if self.power < 0:
            raise ValueError("power must be >= 0")
        if self.waist <= 0:
            raise ValueError("waist must be > 0")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be > 0")
        if self.direction not in (TOP_DOWN, BOTTOM_UP):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class TrapConfiguration:
    """Top tweezer + optional bottom beam + stack: fully determines a potential.

    relative_phase is the bottom-vs-reflected-top phase in cycles, canonical
    in [0, 1).  reflection_scale multiplies the reflected amplitude and is the
    planar surrogate for weakly reflecting structures (sqrt(R_target/R_stack)).
    The bottom beam's frequency_offset is not applied here; a static snapshot
    at the given relative_phase is evaluated (transport kinematics integrate
    detuning to a phase elsewhere).
    """

    top_beam: BeamSpec
    stack: LayerStack
    bottom_beam: BeamSpec | None = None
    focus_offset: float = 1.5e-6
    relative_phase: float = 0.0
    reflection_scale: float = 1.0

    def __post_init__(self):
        if self.top_beam.direction != TOP_DOWN:
            raise ValueError("top beam must propagate top-down")
        if self.bottom_beam is not None and self.bottom_beam.direction != BOTTOM_UP:
            raise ValueError("bottom beam must propagate bottom-up")
        if self.reflection_scale < 0:
            raise ValueError("reflection_scale must be >= 0")
        object.__setattr__(self, "relative_phase", self.relative_phase % 1.0)


@dataclass
class ComplexField:
    """Sampled complex amplitude on a cylindrical (r, z) grid; |E|^2 is W/m^2."""

    r: np.ndarray
    z: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        for axis in (self.r, self.z):
            if axis.ndim != 1 or (axis.size > 1 and not np.all(np.diff(axis) > 0)):
                raise ValueError("grid axes must be 1-D and strictly increasing")
        if self.values.shape != (self.r.size, self.z.size):
            raise ValueError("values must have shape (len(r), len(z))")

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.values) ** 2


# --- aperture construction -------------------------------------------------

@dataclass(frozen=True)
class _Aperture:
    """Frozen angular quadrature for one (wavelength, waist, NA) triple."""

    k: float
    theta: np.ndarray      # Gauss-Legendre nodes on [0, arcsin NA]
    weights: np.ndarray    # quadrature weights times apodization
    sin_t: np.ndarray
    cos_t: np.ndarray
    s0: float              # calibrated pupil width in sin(theta)
    norm: float            # amplitude for 1 W beam power
    order: int
    achieved_tol: float


def _raw_field_on_axis_factory(k, theta_max, s0, order):
    x, w = leggauss(order)
    th = (x + 1) * 0.5 * theta_max
    w = w * 0.5 * theta_max
    st = np.sin(th)
    ct = np.cos(th)
    apod = np.exp(-((st / s0) ** 2)) * st * w

    def eval_points(r, z):
        J = j0(k * np.outer(np.atleast_1d(r), st))
        ph = np.exp(-1j * k * np.outer(np.atleast_1d(z), ct))
        return np.einsum("rt,zt->rz", J * apod, ph)

    return eval_points, th, w, st, ct, apod


def _focal_ratio(k, theta_max, s0, w0, order=256):
    ev, *_ = _raw_field_on_axis_factory(k, theta_max, s0, order)
    vals = ev(np.array([0.0, w0]), np.array([0.0]))
    return abs(vals[1, 0]) ** 2 / abs(vals[0, 0]) ** 2


@lru_cache(maxsize=32)
def _calibrated_s0(wavelength: float, waist: float, na: float) -> float:
    """Pupil width such that the focal 1/e^2 intensity radius equals the waist."""
    k = 2 * math.pi / wavelength
    theta_max = math.asin(na)
    target = math.exp(-2)

    def f(s0):
        return _focal_ratio(k, theta_max, s0, waist) - target

    # A pupil much narrower than the paraxial width focuses to a spot much
    # larger than the target waist, so f > 0 there; widen the other end until
    # the spot drops below the target (fails only if the target waist is below
    # the diffraction-limited spot of this aperture).
    lo = 0.25 * wavelength / (math.pi * waist)
    hi = max(2.0 * na, 4.0 * lo)
    for _ in range(40):
        if f(hi) < 0.0:
            break
        hi *= 2.0
    else:
        raise ValueError(
            f"focal waist {waist} m is not achievable within NA {na}: "
            "it lies below the diffraction-limited spot size"
        )
    return brentq(f, lo, hi, xtol=1e-12)


@lru_cache(maxsize=32)
def _aperture(wavelength: float, waist: float, na: float) -> _Aperture:
    k = 2 * math.pi / wavelength
    theta_max = math.asin(na)
    s0 = _calibrated_s0(wavelength, waist, na)

    # automated order selection: double until a probe set of field values
    # is stable to the requested relative tolerance
    probe_r = np.array([0.0, waist, 3 * waist])
    probe_z = np.array([0.0, 2e-6, 15e-6])
    order = 48
    ev, *_ = _raw_field_on_axis_factory(k, theta_max, s0, order)
    prev = ev(probe_r, probe_z)
    achieved = math.inf
    while order < _MAX_ORDER:
        order *= 2
        ev, th, w, st, ct, apod = _raw_field_on_axis_factory(k, theta_max, s0, order)
        cur = ev(probe_r, probe_z)
        scale = np.abs(cur).max()
        achieved = float(np.abs(cur - prev).max() / scale)
        if achieved < _CONVERGENCE_RTOL:
            break
        prev = cur
    else:
        raise QuadratureError(achieved)

    # normalize to 1 W: transverse power integral at the focal plane
    nodes, wq = leggauss(1500)
    r_max = 12 * waist
    r_nodes = (nodes + 1) * 0.5 * r_max
    r_w = wq * 0.5 * r_max
    E = ev(r_nodes, np.array([0.0]))[:, 0]
    power_unit = float(2 * math.pi * np.sum(np.abs(E) ** 2 * r_nodes * r_w))
    norm = 1.0 / math.sqrt(power_unit)

    return _Aperture(k=k, theta=th, weights=apod, sin_t=st, cos_t=ct,
                     s0=s0, norm=norm, order=order, achieved_tol=achieved)


def _kernel_eval(ap: _Aperture, coeff: np.ndarray, r, z, sign: float,
                 z_shift: float) -> np.ndarray:
    """sum_theta coeff(theta) J0(k r sin) exp(sign * i k cos (z + z_shift))."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    J = j0(ap.k * np.outer(r, ap.sin_t))
    ph = np.exp(sign * 1j * ap.k * np.outer(z + z_shift, ap.cos_t))
    return np.einsum("rt,zt->rz", J * (coeff * ap.weights), ph)


# --- public operations -----------------------------------------------------

def focused_field(beam: BeamSpec, r, z) -> np.ndarray:
    """Free-space focused field in the beam frame (focus at z = 0).

    Propagation is top-down (toward -z).  Returns the complex amplitude on
    the outer product of r and z; scalar inputs give a (1, 1) array squeezed
    to a scalar by the caller if wanted.
    """
    if beam.direction != TOP_DOWN:
        raise ValueError("focused_field models the top-down tweezer beam")
    ap = _aperture(beam.wavelength, beam.waist, beam.numerical_aperture)
    amp = math.sqrt(beam.power) * ap.norm
    ones = np.ones_like(ap.theta)
    out = amp * _kernel_eval(ap, ones, r, z, sign=-1.0, z_shift=0.0)
    if np.isscalar(r) and np.isscalar(z):
        return out[0, 0]
    return out


@lru_cache(maxsize=64)
def _stack_rbar_cached(stack: LayerStack, wavelength: float, waist: float,
                       na: float) -> np.ndarray:
    """S/P-averaged complex reflection at the aperture nodes."""
    ap = _aperture(wavelength, waist, na)
    rbar = np.empty(ap.theta.size, dtype=complex)
    for i, th in enumerate(ap.theta):
        rs = stack_response(stack, wavelength, float(th), "S").r
        rp = stack_response(stack, wavelength, float(th), "P").r
        rbar[i] = 0.5 * (rs + rp)
    return rbar


@lru_cache(maxsize=64)
def _t0_cached(stack: LayerStack, wavelength: float) -> complex:
    """Normal-incidence amplitude transmission through the stack."""
    return stack_response(stack, wavelength, 0.0, "S").t


def _top_fields(config: TrapConfiguration, r, z):
    """(incident, reflected) complex fields of the top beam above the stack."""
    beam = config.top_beam
    ap = _aperture(beam.wavelength, beam.waist, beam.numerical_aperture)
    rbar = _stack_rbar_cached(config.stack, beam.wavelength, beam.waist,
                              beam.numerical_aperture)
    amp = math.sqrt(beam.power) * ap.norm
    ones = np.ones_like(ap.theta)
    zf = config.focus_offset
    inc = amp * _kernel_eval(ap, ones, r, z, sign=-1.0, z_shift=-zf)
    ref = (config.reflection_scale * amp
           * _kernel_eval(ap, rbar, r, z, sign=+1.0, z_shift=+zf))
    return inc, ref


@lru_cache(maxsize=64)
def _phase_reference(config: TrapConfiguration) -> tuple[float, float]:
    """(z1, phi0): first stationary-lattice site and the bottom-beam phase
    that is constructive with the reflected top field there.

    Power-independent: computed from a unit-power copy of the top beam so
    that field linearity in the beam amplitudes holds exactly.
    """
    unit = TrapConfiguration(
        top_beam=BeamSpec(config.top_beam.wavelength, 1.0,
                          config.top_beam.waist,
                          config.top_beam.numerical_aperture),
        stack=config.stack,
        focus_offset=config.focus_offset,
        reflection_scale=config.reflection_scale,
    )
    lam = config.top_beam.wavelength
    zg = np.linspace(0.02 * lam, 1.3 * lam, 800)
    inc, ref = _top_fields(unit, np.array([0.0]), zg)
    intensity = np.abs(inc + ref)[0] ** 2
    i1 = int(np.argmax(intensity))
    # refine the maximum parabolically
    if 0 < i1 < zg.size - 1:
        y0, y1, y2 = intensity[i1 - 1:i1 + 2]
        denom = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        z1 = zg[i1] + shift * (zg[1] - zg[0])
    else:
        z1 = zg[i1]
    _, ref1 = _top_fields(unit, np.array([0.0]), np.array([z1]))
    if config.bottom_beam is not None:
        lam_b = config.bottom_beam.wavelength
        t0 = _t0_cached(config.stack, lam_b)
    else:
        lam_b = lam
        t0 = 1.0 + 0j
    # the transmission phase arg(t0) rides on the bottom carrier, so subtract
    # it here: "in phase" must pin the total transmitted field at z1
    k_b = 2 * math.pi / lam_b
    phi0 = float(np.angle(ref1[0, 0])) - k_b * z1 - float(np.angle(t0))
    return float(z1), phi0


def _bottom_field(config: TrapConfiguration, r, z) -> np.ndarray:
    beam = config.bottom_beam
    r = np.atleast_1d(np.asarray(r, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    t0 = _t0_cached(config.stack, beam.wavelength)
    _, phi0 = _phase_reference(config)
    k = 2 * math.pi / beam.wavelength
    peak = math.sqrt(2 * beam.power / (math.pi * beam.waist ** 2))
    phase = phi0 + 2 * math.pi * config.relative_phase + beam.phase_offset
    radial = np.exp(-(r / beam.waist) ** 2)
    axial = np.exp(1j * (k * z + phase))
    return peak * t0 * np.outer(radial, axial)


def field_above_stack(config: TrapConfiguration, r, z) -> np.ndarray:
    """Total complex field above the surface: incident + reflected + bottom.

    z > 0 (above the top surface), measured from the surface.
    """
    z_arr = np.atleast_1d(np.asarray(z, dtype=float))
    if np.any(z_arr <= 0):
        raise ValueError("field_above_stack is defined above the surface (z > 0)")
    inc, ref = _top_fields(config, r, z)
    total = inc + ref
    if config.bottom_beam is not None and config.bottom_beam.power > 0:
        total = total + _bottom_field(config, r, z)
    if np.isscalar(r) and np.isscalar(z):
        return total[0, 0]
    return total


def axial_line_cut(config: TrapConfiguration, z_range: tuple[float, float],
                   n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Sampled on-axis intensity |E(0, 0, z)|^2 over z_range."""
    z0, z1 = z_range
    if not 0 < z0 < z1:
        raise ValueError("z_range must satisfy 0 < z0 < z1")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    zg = np.linspace(z0, z1, int(n_samples))
    E = field_above_stack(config, 0.0, zg)
    return zg, np.abs(E[0]) ** 2


def field_map(config: TrapConfiguration, r_grid: Sequence[float],
              z_grid: Sequence[float]) -> ComplexField:
    """Full cylindrical field map (used by the potential builder)."""
    r = np.asarray(r_grid, dtype=float)
    z = np.asarray(z_grid, dtype=float)
    return ComplexField(r=r, z=z, values=field_above_stack(config, r, z))


def aperture_metadata(beam: BeamSpec) -> dict:
    """Quadrature diagnostics: calibrated pupil width, order, tolerance."""
    ap = _aperture(beam.wavelength, beam.waist, beam.numerical_aperture)
    return {
        "s0": ap.s0,
        "order": ap.order,
        "achieved_tol": ap.achieved_tol,
        "paraxial_s0": beam.wavelength / (math.pi * beam.waist),
    }


def first_site_position(config: TrapConfiguration) -> float:
    """z of the first stationary-lattice intensity maximum above the surface."""
    return _phase_reference(config)[0]
