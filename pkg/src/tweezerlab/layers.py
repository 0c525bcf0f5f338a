"""Plane-wave reflection and transmission of layered dielectric stacks.

Transfer-matrix method with complex transverse wavevectors, so absorbing
layers and total internal reflection are handled by the same code path.

Sign and basis conventions
--------------------------
Fields are decomposed per layer into forward (+z, into the stack) and
backward components with transverse phase exp(i kx x).  The axial wavevector
in layer j is

    kz_j = sqrt(k0^2 n_j^2 - kx^2),   branch chosen with Im(kz) >= 0,

so evanescent and absorbed waves decay in their propagation direction.

The reported amplitude reflection coefficient r uses the transverse-E
("Verdet") convention for BOTH polarizations: at normal incidence onto a
denser medium r is negative, and r_s(0) = r_p(0) = (n1 - n2)/(n1 + n2).
This matters downstream: the phase of r sets where the first lattice fringe
sits above the surface, and the beam model averages r_s and r_p per angular
component, which is only meaningful when the two agree in phase at theta=0.

Internally the P-polarized chain is propagated in the H-field (admittance)
basis, the only basis in which the interface matrix keeps the symmetric
[[1, r], [r, 1]]/t form for both polarizations; the final stack r_p is then
negated to express it in the transverse-E convention.  The reported t is the
chaining amplitude ratio (transverse E for S, magnetic field H for P); power
transmittance T is computed from the Poynting flux ratio and is
convention-independent:

    T = Re(gamma_out) / gamma_in * |t|^2,   gamma = kz (S) or kz/n^2 (P).

Boundary media must be lossless (real index) so R and T are well defined.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

N_SIO2 = 1.45   # default fused-silica index at 852/935 nm
N_SI3N4 = 2.00  # default LPCVD silicon-nitride index at 852/935 nm

S_POL = "S"
P_POL = "P"


@dataclass(frozen=True)
class Layer:
    """One dielectric layer.  thickness=None marks a semi-infinite boundary medium."""

    refractive_index: complex
    thickness: float | None = None

    def __post_init__(self):
        n = complex(self.refractive_index)
        if not (math.isfinite(n.real) and math.isfinite(n.imag)):
            raise ValueError("refractive index must be finite")
        if n.imag < 0:
            raise ValueError("Im(n) < 0 would describe a gain medium")
        if self.thickness is not None and not (
            math.isfinite(self.thickness) and self.thickness >= 0
        ):
            raise ValueError("interior layer thickness must be finite and >= 0")

    @property
    def semi_infinite(self) -> bool:
        return self.thickness is None


@dataclass(frozen=True)
class LayerStack:
    """Ordered layers, incidence side first.  First and last are semi-infinite."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) < 2:
            raise ValueError("a stack needs at least the two boundary media")
        if not (layers[0].semi_infinite and layers[-1].semi_infinite):
            raise ValueError("first and last layers must be semi-infinite")
        for lay in layers[1:-1]:
            if lay.semi_infinite:
                raise ValueError("only the two boundary layers may be semi-infinite")
        for lay in (layers[0], layers[-1]):
            if complex(lay.refractive_index).imag != 0:
                raise ValueError("boundary media must be lossless (real index)")

    @property
    def n_incident(self) -> float:
        return complex(self.layers[0].refractive_index).real

    @property
    def n_exit(self) -> float:
        return complex(self.layers[-1].refractive_index).real

    def reversed(self) -> "LayerStack":
        return LayerStack(tuple(reversed(self.layers)))


def membrane_stack(top_nitride: bool = False,
                   n_sio2: float = N_SIO2,
                   n_si3n4: float = N_SI3N4) -> LayerStack:
    """The planar membrane: 2 um SiO2 over 550 nm Si3N4, vacuum both sides.

    top_nitride adds the optional 360 nm nitride film above the oxide.
    """
    interior = [Layer(n_sio2, 2e-6), Layer(n_si3n4, 550e-9)]
    if top_nitride:
        interior.insert(0, Layer(n_si3n4, 360e-9))
    return LayerStack((Layer(1.0), *interior, Layer(1.0)))


@dataclass(frozen=True)
class PlaneWaveResponse:
    r: complex
    t: complex
    R: float
    T: float
    polarization: str
    angle: float
    wavelength: float
    tir: bool = False  # evanescent exit medium; T forced to 0


def _check_pol(pol: str) -> str:
    p = pol.upper()
    if p not in (S_POL, P_POL):
        raise ValueError(f"polarization must be S or P, got {pol!r}")
    return p


def fresnel_interface(n1: complex, n2: complex, theta: float,
                      pol: str) -> tuple[complex, complex]:
    """Single-interface amplitude coefficients (r, t), transverse-E convention.

    n1 is the (real) incidence medium; theta in [0, pi/2).  At normal
    incidence both polarizations return r = (n1 - n2)/(n1 + n2).
    """
    pol = _check_pol(pol)
    n1 = complex(n1)
    n2 = complex(n2)
    for v in (n1, n2, complex(theta)):
        if not (math.isfinite(v.real) and math.isfinite(v.imag)):
            raise ValueError("non-finite input")
    if n1.imag != 0:
        raise ValueError("incidence medium must be lossless")
    if not 0 <= theta < math.pi / 2:
        raise ValueError("theta must lie in [0, pi/2)")

    k0 = 1.0  # wavelength drops out of single-interface coefficients
    kx = k0 * n1.real * math.sin(theta)
    kz1 = _kz(n1, k0, kx)
    kz2 = _kz(n2, k0, kx)
    if pol == S_POL:
        r = (kz1 - kz2) / (kz1 + kz2)
        t = 2 * kz1 / (kz1 + kz2)
    else:
        g1 = kz1 / n1 ** 2
        g2 = kz2 / n2 ** 2
        # admittance-basis coefficient, then flip r into the transverse-E convention
        r = -(g1 - g2) / (g1 + g2)
        # transmitted transverse-E amplitude (n1 cos t1) * 2 / (n1 cos t2 + n2 cos t1)
        t = 2 * n1 * n2 * kz1 / (n1 ** 2 * kz2 + n2 ** 2 * kz1)
    return r, t


def _kz(n: complex, k0: float, kx: float) -> complex:
    kz = cmath.sqrt((k0 * n) ** 2 - kx ** 2)
    if kz.imag < 0:
        kz = -kz
    # lossless propagating: force the positive real branch exactly
    if kz.imag == 0 and kz.real < 0:
        kz = -kz
    return kz


def stack_response(stack: LayerStack, wavelength: float, theta: float,
                   pol: str) -> PlaneWaveResponse:
    """Chain 2x2 interface/propagation matrices through the stack.

    Returns amplitude and power coefficients; the phase of r is meaningful
    (it fixes the first-lattice-site position above the surface).  An
    evanescent exit medium (TIR) reports T = 0 with the tir flag set.
    """
    pol = _check_pol(pol)
    if wavelength <= 0 or not math.isfinite(wavelength):
        raise ValueError("wavelength must be positive and finite")
    if not 0 <= theta < math.pi / 2:
        raise ValueError("theta must lie in [0, pi/2)")

    k0 = 2 * math.pi / wavelength
    n_in = stack.layers[0].refractive_index
    kx = k0 * complex(n_in).real * math.sin(theta)

    ns = [complex(l.refractive_index) for l in stack.layers]
    kzs = [_kz(n, k0, kx) for n in ns]
    if pol == S_POL:
        gammas = kzs
    else:
        gammas = [kz / n ** 2 for kz, n in zip(kzs, ns)]

    M = np.eye(2, dtype=complex)
    for j in range(len(ns) - 1):
        ga, gb = gammas[j], gammas[j + 1]
        r_ij = (ga - gb) / (ga + gb)
        t_ij = 2 * ga / (ga + gb)
        D = np.array([[1.0, r_ij], [r_ij, 1.0]], dtype=complex) / t_ij
        M = M @ D
        if j + 1 < len(ns) - 1:
            delta = kzs[j + 1] * stack.layers[j + 1].thickness
            P = np.array(
                [[cmath.exp(-1j * delta), 0.0], [0.0, cmath.exp(1j * delta)]],
                dtype=complex,
            )
            M = M @ P

    r = M[1, 0] / M[0, 0]
    t = 1.0 / M[0, 0]
    if pol == P_POL:
        r = -r  # H-basis chain result expressed in the transverse-E convention

    g_in = gammas[0].real
    g_out = gammas[-1]
    tir = kzs[-1].real == 0 and kzs[-1].imag > 0
    R = abs(r) ** 2
    T = 0.0 if tir else (g_out.real / g_in) * abs(t) ** 2
    return PlaneWaveResponse(r=r, t=t, R=R, T=T, polarization=pol,
                             angle=theta, wavelength=wavelength, tir=tir)


def reflectance_spectrum(stack: LayerStack, wavelength: float,
                         theta_grid: Sequence[float],
                         pol: str) -> list[PlaneWaveResponse]:
    """stack_response over a monotone theta grid."""
    thetas = np.asarray(theta_grid, dtype=float)
    if thetas.ndim != 1 or thetas.size == 0:
        raise ValueError("theta_grid must be a non-empty 1-D sequence")
    if thetas.size > 1 and not (np.all(np.diff(thetas) > 0)
                                or np.all(np.diff(thetas) < 0)):
        raise ValueError("theta_grid must be strictly monotone")
    return [stack_response(stack, wavelength, float(th), pol) for th in thetas]
