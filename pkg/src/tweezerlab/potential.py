"""Trapping potentials above the layered surface.

Converts optical fields to dipole potentials, adds the two-parameter
Casimir-Polder surface attraction, locates lattice sites with their depths,
trap frequencies and Lamb-Dicke parameters, and integrates detuning profiles
into conveyor transport trajectories.

Units are SI throughout (joules for energies); helpers convert to the
k_B * mK convention used in reports.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .beams import ComplexField, TrapConfiguration, field_above_stack
from .constants import DEFAULT_CONSTANTS, EPS0, C_LIGHT, K_B, PhysicalConstants

__all__ = [
    "SurfaceMaterial",
    "SIO2",
    "SI3N4",
    "PotentialMap",
    "TrapSite",
    "DetuningProfile",
    "TransportTrajectory",
    "casimir_polder",
    "dipole_potential",
    "total_potential",
    "potential_evaluator",
    "axial_potential_cut",
    "find_sites",
    "site_table",
    "lamb_dicke",
    "transport_kinematics",
    "calibrate_polarizability",
]

# depth floor below which an axial minimum is not counted as a site
_SITE_DEPTH_FLOOR = K_B * 1e-6

# finite-difference steps for trap curvatures
_FD_AXIAL_STEP = 4e-9
_FD_RADIAL_STEP = 40e-9


@dataclass(frozen=True)
class SurfaceMaterial:
    """Casimir-Polder coefficients of the top dielectric surface.

    C4_over_h carries the conventional Hz um^4 units; lambda_bar is the
    reduced transition wavelength entering the retardation denominator.
    """

    C4_over_h: float
    lambda_bar: float = 136e-9

    def __post_init__(self):
        if not (self.C4_over_h > 0 and math.isfinite(self.C4_over_h)):
            raise ValueError("C4_over_h must be positive and finite")
        if not (self.lambda_bar > 0 and math.isfinite(self.lambda_bar)):
            raise ValueError("lambda_bar must be positive and finite")


SIO2 = SurfaceMaterial(C4_over_h=158.0)
SI3N4 = SurfaceMaterial(C4_over_h=267.0)


def casimir_polder(z, material: SurfaceMaterial,
                   constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Surface attraction U(z) = -C4 / (z^3 (z + lambda_bar)) in joules.

    z is the height above the surface in meters; scalar or array, z > 0.
    """
    z_arr = np.asarray(z, dtype=float)
    if np.any(~np.isfinite(z_arr)) or np.any(z_arr <= 0):
        raise ValueError("casimir_polder requires z > 0")
    c4 = material.C4_over_h * constants.h * 1e-24  # Hz um^4 -> J m^4
    out = -c4 / (z_arr ** 3 * (z_arr + material.lambda_bar))
    if np.isscalar(z) or getattr(z, "ndim", 0) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class PotentialMap:
    """Potential sampled on the (r, z) grid of a ComplexField."""

    r_axis: np.ndarray
    z_axis: np.ndarray
    values: np.ndarray  # joules, shape (len(r_axis), len(z_axis))

    def __post_init__(self):
        if self.values.shape != (len(self.r_axis), len(self.z_axis)):
            raise ValueError("values shape must match (r_axis, z_axis)")

    @property
    def values_mK(self) -> np.ndarray:
        return self.values / (K_B * 1e-3)

    def axial_cut(self):
        """Line cut U(0, z); requires r_axis to start on the axis."""
        i0 = int(np.argmin(np.abs(self.r_axis)))
        return self.z_axis, self.values[i0]


def dipole_potential(fld: ComplexField,
                     constants: PhysicalConstants = DEFAULT_CONSTANTS) -> PotentialMap:
    """Red-detuned scalar light shift U = -(alpha / (2 eps0 c)) I."""
    U = -(constants.alpha / (2.0 * EPS0 * C_LIGHT)) * fld.intensity
    return PotentialMap(fld.r, fld.z, U)


def potential_evaluator(config: TrapConfiguration,
                        constants: PhysicalConstants = DEFAULT_CONSTANTS,
                        material: SurfaceMaterial = SIO2,
                        ) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Continuous U(r, z) callable (joules) for arbitrary sample points.

    Evaluates the optical field exactly (quadrature kernel, no grid
    interpolation) and adds the surface term, so finite-difference
    curvatures can be driven to convergence.
    """
    pref = -(constants.alpha / (2.0 * EPS0 * C_LIGHT))

    def U(r, z):
        r_arr = np.atleast_1d(np.asarray(r, dtype=float))
        z_arr = np.atleast_1d(np.asarray(z, dtype=float))
        E = field_above_stack(config, np.abs(r_arr), z_arr)
        cp = np.atleast_1d(casimir_polder(z_arr, material, constants))
        out = pref * np.abs(E) ** 2 + cp[None, :]
        if np.isscalar(r) and np.isscalar(z):
            return float(out[0, 0])
        return out

    return U


def total_potential(config: TrapConfiguration,
                    constants: PhysicalConstants = DEFAULT_CONSTANTS,
                    material: SurfaceMaterial = SIO2,
                    r_max: float = 15e-6,
                    r_step: float = 50e-9,
                    z_min: float = 20e-9,
                    z_max: float = 21e-6,
                    z_step: float = 20e-9) -> PotentialMap:
    """Dipole potential plus surface attraction on a regular (r, z) grid."""
    r_axis = np.arange(0.0, r_max + 0.5 * r_step, r_step)
    z_axis = np.arange(z_min, z_max + 0.5 * z_step, z_step)
    U = potential_evaluator(config, constants, material)(r_axis, z_axis)
    return PotentialMap(r_axis, z_axis, U)


def axial_potential_cut(config: TrapConfiguration,
                        constants: PhysicalConstants = DEFAULT_CONSTANTS,
                        material: SurfaceMaterial = SIO2,
                        z_min: float = 20e-9,
                        z_max: float = 21e-6,
                        z_step: float = 20e-9):
    """(z, U) arrays of the on-axis potential."""
    z_axis = np.arange(z_min, z_max + 0.5 * z_step, z_step)
    U = potential_evaluator(config, constants, material)(np.array([0.0]), z_axis)[0]
    return z_axis, U


@dataclass(frozen=True)
class TrapSite:
    """One lattice site: position, escape depth and curvature data.

    index counts from 1 at the site closest to the surface.  f_r is None
    (and radially_untrapped True) where the radial curvature is not
    positive, which happens beyond the depth-of-field region.
    """

    index: int
    z: float
    depth: float  # joules
    f_a: float
    eta_a2: float
    f_r: Optional[float] = None
    eta_r2: Optional[float] = None
    radially_untrapped: bool = False

    @property
    def depth_mK(self) -> float:
        return self.depth / (K_B * 1e-3)


def lamb_dicke(f: float, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """eta^2 = E_R / (h f) for a trap frequency f in Hz."""
    if not (f > 0 and math.isfinite(f)):
        raise ValueError("trap frequency must be positive and finite")
    return constants.E_R / (constants.h * f)


def _refine_maximum(U1d: Callable[[float], float], z0: float, h: float) -> float:
    """Value of the local maximum near z0, polished off-grid."""
    z_star = _refine_minimum(lambda zz: -U1d(zz), z0, h)
    return U1d(z_star)


def _refine_minimum(U1d: Callable[[float], float], z0: float, h: float) -> float:
    """Golden-section polish of a bracketed minimum around z0."""
    a, b = z0 - h, z0 + h
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = U1d(c), U1d(d)
    for _ in range(60):
        if b - a < 1e-13:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = U1d(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = U1d(d)
    return 0.5 * (a + b)


def find_sites(z: np.ndarray, U: np.ndarray,
               sampler: Callable[[float, float], float],
               constants: PhysicalConstants = DEFAULT_CONSTANTS,
               wavelength: Optional[float] = None,
               fd_axial_step: float = _FD_AXIAL_STEP,
               fd_radial_step: float = _FD_RADIAL_STEP) -> list[TrapSite]:
    """Locate trap sites on an axial line cut.

    z, U: the on-axis potential samples (z strictly increasing, step at
    most lambda/40 so no fringe is skipped).  sampler(r, z) must return the
    full potential at off-axis points; it supplies the curvature data and
    the sub-grid refinement of each minimum.  Returns sites ordered from
    the surface, indexed from 1.  An empty list is a valid result.
    """
    z = np.asarray(z, dtype=float)
    U = np.asarray(U, dtype=float)
    if z.ndim != 1 or z.shape != U.shape or len(z) < 3:
        raise ValueError("need matching 1-D z and U arrays with >= 3 samples")
    steps = np.diff(z)
    if np.any(steps <= 0):
        raise ValueError("z must be strictly increasing")
    lam = wavelength if wavelength is not None else constants.lambda_t
    if steps.max() > lam / 40.0:
        raise ValueError("axial sampling coarser than lambda/40")

    def U_axis(zz: float) -> float:
        return sampler(0.0, zz)

    minima_idx = [i for i in range(1, len(z) - 1)
                  if U[i] < U[i - 1] and U[i] <= U[i + 1]]

    sites: list[TrapSite] = []
    m = constants.m
    for idx in minima_idx:
        z_site = _refine_minimum(U_axis, z[idx], steps.max())
        U_site = U_axis(z_site)

        # escape barrier: climb to the neighbouring maximum on each side and
        # polish it off-grid so the depth does not depend on grid placement.
        # If the climb runs into a grid boundary the boundary value is used,
        # which can only under-report the depth, never inflate it; the
        # upward escape of the outermost site tends to U -> 0 naturally as
        # long as the grid extends past the lattice.
        j = idx
        while j > 0 and U[j - 1] >= U[j]:
            j -= 1
        barrier_l = U[j] if j == 0 else _refine_maximum(U_axis, z[j], steps.max())
        j = idx
        while j < len(U) - 1 and U[j + 1] >= U[j]:
            j += 1
        barrier_r = (U[j] if j == len(U) - 1
                     else _refine_maximum(U_axis, z[j], steps.max()))
        depth = min(barrier_l, barrier_r) - U_site
        if depth < _SITE_DEPTH_FLOOR:
            continue

        h = fd_axial_step
        curv_a = (U_axis(z_site - h) - 2.0 * U_site + U_axis(z_site + h)) / h ** 2
        if curv_a <= 0:
            continue
        f_a = math.sqrt(curv_a / m) / (2.0 * math.pi)

        hr = fd_radial_step
        curv_r = 2.0 * (sampler(hr, z_site) - U_site) / hr ** 2
        if curv_r > 0:
            f_r = math.sqrt(curv_r / m) / (2.0 * math.pi)
            site = TrapSite(index=0, z=z_site, depth=depth, f_a=f_a,
                            eta_a2=lamb_dicke(f_a, constants), f_r=f_r,
                            eta_r2=lamb_dicke(f_r, constants))
        else:
            site = TrapSite(index=0, z=z_site, depth=depth, f_a=f_a,
                            eta_a2=lamb_dicke(f_a, constants),
                            radially_untrapped=True)
        sites.append(site)

    sites.sort(key=lambda s: s.z)
    return [TrapSite(index=i + 1, z=s.z, depth=s.depth, f_a=s.f_a,
                     eta_a2=s.eta_a2, f_r=s.f_r, eta_r2=s.eta_r2,
                     radially_untrapped=s.radially_untrapped)
            for i, s in enumerate(sites)]


def site_table(config: TrapConfiguration,
               constants: PhysicalConstants = DEFAULT_CONSTANTS,
               material: SurfaceMaterial = SIO2,
               z_min: float = 20e-9,
               z_max: float = 16e-6,
               z_step: float = 20e-9) -> list[TrapSite]:
    """Convenience: axial cut, sampler and site finding in one call."""
    ev = potential_evaluator(config, constants, material)
    z = np.arange(z_min, z_max + 0.5 * z_step, z_step)
    U = ev(np.array([0.0]), z)[0]

    def sampler(r: float, zz: float) -> float:
        return float(ev(np.array([abs(r)]), np.array([zz]))[0, 0])

    return find_sites(z, U, sampler, constants,
                      wavelength=config.top_beam.wavelength)


@dataclass(frozen=True)
class DetuningProfile:
    """Piecewise-linear bottom-beam detuning Delta nu(t).

    breakpoints are (t, dnu) pairs with strictly increasing t; between
    breakpoints the detuning interpolates linearly, outside it is zero.
    """

    breakpoints: tuple

    def __post_init__(self):
        pts = tuple((float(t), float(d)) for t, d in self.breakpoints)
        if len(pts) < 2:
            raise ValueError("need at least two breakpoints")
        times = [t for t, _ in pts]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("breakpoint times must be strictly increasing")
        object.__setattr__(self, "breakpoints", pts)

    @classmethod
    def trapezoid(cls, dnu_h: float, tau: float,
                  t_ramp: float = 1e-3) -> "DetuningProfile":
        """Ramp to dnu_h in t_ramp, hold tau, ramp back to zero."""
        if t_ramp <= 0 or tau < 0:
            raise ValueError("t_ramp must be positive and tau non-negative")
        pts = [(0.0, 0.0), (t_ramp, dnu_h)]
        if tau > 0:
            pts.append((t_ramp + tau, dnu_h))
        pts.append((2 * t_ramp + tau, 0.0))
        return cls(tuple(pts))

    @property
    def t_end(self) -> float:
        return self.breakpoints[-1][0]

    def detuning(self, t: float) -> float:
        pts = self.breakpoints
        if t <= pts[0][0] or t >= pts[-1][0]:
            return pts[0][1] if t <= pts[0][0] else pts[-1][1]
        i = bisect_right([p[0] for p in pts], t) - 1
        (t0, d0), (t1, d1) = pts[i], pts[i + 1]
        return d0 + (d1 - d0) * (t - t0) / (t1 - t0)

    def _segment_areas(self):
        pts = self.breakpoints
        areas = [0.0]
        for (t0, d0), (t1, d1) in zip(pts, pts[1:]):
            areas.append(areas[-1] + 0.5 * (d0 + d1) * (t1 - t0))
        return areas

    def phase_cycles(self, t: float) -> float:
        """Accumulated integral of the detuning up to time t, in cycles."""
        pts = self.breakpoints
        areas = self._segment_areas()
        if t <= pts[0][0]:
            return 0.0
        if t >= pts[-1][0]:
            return areas[-1]
        i = bisect_right([p[0] for p in pts], t) - 1
        (t0, d0), (t1, d1) = pts[i], pts[i + 1]
        dt = t - t0
        slope = (d1 - d0) / (t1 - t0)
        return areas[i] + d0 * dt + 0.5 * slope * dt * dt

    def displacement(self, t: float, lambda_t: float) -> float:
        """Transport distance (lambda_t/2) * integral of detuning."""
        return 0.5 * lambda_t * self.phase_cycles(t)

    def first_time_at(self, dz: float, lambda_t: float) -> Optional[float]:
        """Earliest time with displacement(t) == dz, None if never reached.

        Requires a single-signed profile so the displacement is monotone.
        """
        target = dz / (0.5 * lambda_t)
        signs = {d > 0 for _, d in self.breakpoints if d != 0}
        if len(signs) > 1:
            raise ValueError("first_time_at requires a single-signed profile")
        pts = self.breakpoints
        areas = self._segment_areas()
        if target == 0:
            return pts[0][0]
        for i, ((t0, d0), (t1, d1)) in enumerate(zip(pts, pts[1:])):
            a0, a1 = areas[i], areas[i + 1]
            lo, hi = (a0, a1) if a1 >= a0 else (a1, a0)
            if not (lo <= target <= hi):
                continue
            slope = (d1 - d0) / (t1 - t0)
            # solve a0 + d0 dt + slope dt^2 / 2 == target
            cc = a0 - target
            if abs(slope) < 1e-300:
                if d0 == 0:
                    continue
                dt = -cc / d0
            else:
                disc = d0 * d0 - 2.0 * slope * cc
                if disc < 0:
                    continue
                sq = math.sqrt(disc)
                roots = [(-d0 + sq) / slope, (-d0 - sq) / slope]
                cands = [r for r in roots if -1e-15 <= r <= (t1 - t0) * (1 + 1e-12)]
                if not cands:
                    continue
                dt = min(cands)
            return t0 + max(dt, 0.0)
        return None


@dataclass(frozen=True)
class TransportTrajectory:
    t: np.ndarray
    dz: np.ndarray
    dz_final: float


def transport_kinematics(profile: DetuningProfile, lambda_t: float,
                         n_samples: int = 512) -> TransportTrajectory:
    """Sampled transport distance Delta z(t) and its final value.

    The piecewise-linear detuning integrates exactly to piecewise
    quadratics; samples are evaluations of that closed form, not a
    numerical quadrature.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    t = np.linspace(profile.breakpoints[0][0], profile.t_end, n_samples)
    dz = np.array([profile.displacement(tt, lambda_t) for tt in t])
    return TransportTrajectory(t=t, dz=dz,
                               dz_final=profile.displacement(profile.t_end, lambda_t))


def calibrate_polarizability(power: float = 5e-3,
                             target_depth: float = K_B * 3e-3,
                             constants: PhysicalConstants = DEFAULT_CONSTANTS,
                             material: SurfaceMaterial = SIO2,
                             rtol: float = 1e-10,
                             max_iter: int = 12) -> float:
    """Polarizability making the deepest membrane site have the target depth.

    Runs the site finder for the stationary tweezer on the membrane at the
    given power and rescales alpha until the deepest site's escape depth
    matches target_depth.  The surface term does not scale with alpha, so
    the fixed point needs a couple of iterations.
    """
    from .beams import BeamSpec
    from .layers import membrane_stack

    alpha = constants.alpha
    cfg_stack = membrane_stack()
    for _ in range(max_iter):
        consts = constants.with_alpha(alpha)
        cfg = TrapConfiguration(
            top_beam=BeamSpec(wavelength=consts.lambda_t, power=power,
                              waist=1.2e-6, numerical_aperture=0.35),
            stack=cfg_stack)
        sites = site_table(cfg, consts, material, z_max=6e-6)
        if not sites:
            raise RuntimeError("no sites found during calibration")
        depth = max(s.depth for s in sites)
        ratio = target_depth / depth
        alpha *= ratio
        if abs(ratio - 1.0) < rtol:
            return alpha
    raise RuntimeError("polarizability calibration did not converge")
