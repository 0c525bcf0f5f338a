"""Monte Carlo loading of Doppler-cooled atoms into the tweezer lattice.

Thermal atoms enter a box around the trap through its top and side faces,
evolve under the trap force with linear damping and discrete photon-recoil
kicks, and are classified at the end of the run as bound, escaped, adsorbed
on the surface, or flagged (integrator blowup).  Every trajectory owns a
counter-based random stream keyed by (seed, trajectory index), so a run is
bitwise reproducible for any worker-thread count.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .beams import TrapConfiguration, field_map
from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .potential import SIO2, SurfaceMaterial, TrapSite, dipole_potential, site_table

__all__ = [
    "CoolingModel", "MCConfig", "AtomState", "LoadingReport",
    "ZeroPotential", "GriddedPotential", "loading_potential",
    "sample_entry", "step", "run_loading", "flux_atom_estimate",
    "doppler_limited_rate", "OUTCOME_LABELS",
]

# outcome codes; index into OUTCOME_LABELS
BOUND, ESCAPED, ADSORBED, FLAGGED = 0, 1, 2, 3
OUTCOME_LABELS = ("bound", "escaped", "adsorbed", "flagged")

_ACTIVE = -1
_BATCH = 1024              # fixed chunk size; must not depend on thread count
_STEP_CHUNK = 512          # random tape is drawn in blocks of this many steps
_TAPE_WIDTH = 7            # uniforms consumed per trajectory per step
_ENTRY_DRAWS = 6           # uniforms consumed per trajectory at entry
_KICK_MAX = 3              # scattering events resolved per step (Poisson tail cut)
_SPEED_CAP = 20.0          # m/s; far beyond any physical speed here -> blowup
_ADSORB_FLOOR = 20e-9      # m; the surface term is already ~ -6 mK here, far
                           # below every escape barrier, so descent past this
                           # height is irreversible and counted as adsorption
_CP_EVAL_FLOOR = 15e-9     # m; surface force/energy clamp just below the
                           # adsorption floor, so the step that carries an
                           # atom into the wall stays numerically tame


@dataclass(frozen=True)
class CoolingModel:
    """Linear damping plus recoil diffusion standing in for Doppler cooling.

    damping_coefficient is the drag beta in F = -beta v (kg/s);
    scattering_rate is the mean photon scattering rate (1/s).  Either may be
    zero, which switches that channel off.
    """

    damping_coefficient: float = 2e3 * DEFAULT_CONSTANTS.m
    scattering_rate: float = 1e5

    def __post_init__(self):
        if self.damping_coefficient < 0 or self.scattering_rate < 0:
            raise ValueError("cooling parameters must be >= 0")


def doppler_limited_rate(damping_coefficient: float,
                         T_doppler: float = 125e-6,
                         constants: PhysicalConstants = DEFAULT_CONSTANTS,
                         ) -> float:
    """Scattering rate whose recoil diffusion balances the given drag at the
    Doppler temperature.

    The damping/diffusion pair sets an equilibrium 3 k_B T_eq = m <v^2> with
    <v^2> = rate * v_rec^2 / (2 beta/m).  Solving for the rate that puts
    T_eq at the cooling transition's Doppler limit keeps the two cooling
    parameters physically consistent; with the default drag this comes out
    near 7.6e6 1/s.
    """
    if damping_coefficient <= 0 or T_doppler <= 0:
        raise ValueError("damping and temperature must be > 0")
    beta_over_m = damping_coefficient / constants.m
    v_rec2 = constants.recoil_velocity ** 2
    return 6.0 * beta_over_m * constants.k_B * T_doppler / (constants.m * v_rec2)


@dataclass(frozen=True)
class MCConfig:
    """Run parameters for the loading simulation.

    box is (Lx, Ly, H): the trap sits at the bottom centre, atoms enter
    through the top face z=H and the four side faces.  dt is an upper bound;
    the run halves it until the stiffest site is resolved.
    """

    box: tuple[float, float, float] = (10e-6, 10e-6, 20e-6)
    n_trajectories: int = 10_000
    T_ensemble: float = 20e-6
    duration: float = 1e-3
    dt: float = 0.5e-6
    cooling: CoolingModel = field(default_factory=CoolingModel)
    seed: int = 0

    def __post_init__(self):
        if len(self.box) != 3 or any(s <= 0 for s in self.box):
            raise ValueError("box must be three positive lengths")
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        for name in ("T_ensemble", "duration", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class AtomState:
    """Position and velocity of one atom, SI."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        for v in (self.position, self.velocity):
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError("state vectors must be finite 3-vectors")


# --- potentials seen by the integrator -------------------------------------


class ZeroPotential:
    """Free flight; useful as a null model in tests and calibration."""

    f_a_max = None
    sites: list[TrapSite] = []

    def force_xyz(self, pos: np.ndarray) -> np.ndarray:
        return np.zeros_like(pos)

    def energy_xyz(self, pos: np.ndarray) -> np.ndarray:
        return np.zeros(pos.shape[0])


class GriddedPotential:
    """Trap force field sampled on an (r, z) grid, surface term analytic.

    The optical potential is bilinearly interpolated; its gradient is
    precomputed on the grid.  The surface attraction varies too steeply to
    grid well near z=0, so it is evaluated in closed form instead.
    """

    def __init__(self, r_axis: np.ndarray, z_axis: np.ndarray,
                 U_optical: np.ndarray,
                 material: SurfaceMaterial,
                 constants: PhysicalConstants,
                 sites: list[TrapSite]):
        r_axis = np.asarray(r_axis, dtype=float)
        z_axis = np.asarray(z_axis, dtype=float)
        if U_optical.shape != (r_axis.size, z_axis.size):
            raise ValueError("potential grid shape mismatch")
        if r_axis[0] != 0.0:
            raise ValueError("radial axis must start at r=0")
        self.r_axis = r_axis
        self.z_axis = z_axis
        self.U = U_optical
        self.material = material
        self.constants = constants
        self.sites = list(sites)
        self.f_a_max = max((s.f_a for s in self.sites), default=None)
        self._dr = r_axis[1] - r_axis[0]
        self._dz = z_axis[1] - z_axis[0]
        dUdr = np.gradient(U_optical, r_axis, axis=0)
        dUdz = np.gradient(U_optical, z_axis, axis=1)
        # store F_r / r so the cartesian components are smooth through r=0
        g = np.empty_like(dUdr)
        g[1:] = -dUdr[1:] / r_axis[1:, None]
        g[0] = -dUdr[1] / r_axis[1]
        self._Fr_over_r = g
        self._Fz = -dUdz
        self._c4 = material.C4_over_h * constants.h * 1e-24
        self._lam = material.lambda_bar

    def _bilinear(self, grid: np.ndarray, r: np.ndarray,
                  z: np.ndarray) -> np.ndarray:
        ri = np.clip((r - self.r_axis[0]) / self._dr, 0.0,
                     self.r_axis.size - 1 - 1e-9)
        zi = np.clip((z - self.z_axis[0]) / self._dz, 0.0,
                     self.z_axis.size - 1 - 1e-9)
        i0 = ri.astype(np.intp)
        j0 = zi.astype(np.intp)
        fr = ri - i0
        fz = zi - j0
        g00 = grid[i0, j0]
        g10 = grid[i0 + 1, j0]
        g01 = grid[i0, j0 + 1]
        g11 = grid[i0 + 1, j0 + 1]
        return (g00 * (1 - fr) * (1 - fz) + g10 * fr * (1 - fz)
                + g01 * (1 - fr) * fz + g11 * fr * fz)

    def force_xyz(self, pos: np.ndarray) -> np.ndarray:
        x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
        r = np.hypot(x, y)
        g = self._bilinear(self._Fr_over_r, r, z)
        fz = self._bilinear(self._Fz, r, z)
        zs = np.maximum(z, _CP_EVAL_FLOOR)
        fz_surface = -self._c4 * (4.0 * zs + 3.0 * self._lam) / (
            zs ** 4 * (zs + self._lam) ** 2)
        out = np.empty_like(pos)
        out[:, 0] = g * x
        out[:, 1] = g * y
        out[:, 2] = fz + fz_surface
        return out

    def energy_xyz(self, pos: np.ndarray) -> np.ndarray:
        r = np.hypot(pos[:, 0], pos[:, 1])
        z = pos[:, 2]
        zs = np.maximum(z, _CP_EVAL_FLOOR)
        u_surface = -self._c4 / (zs ** 3 * (zs + self._lam))
        return self._bilinear(self.U, r, z) + u_surface


def loading_potential(config: TrapConfiguration,
                      constants: PhysicalConstants = DEFAULT_CONSTANTS,
                      material: SurfaceMaterial = SIO2,
                      box: tuple[float, float, float] = (10e-6, 10e-6, 20e-6),
                      r_step: float = 50e-9,
                      z_step: float = 20e-9) -> GriddedPotential:
    """Grid the optical potential over the loading box and find its sites."""
    r_max = math.hypot(box[0], box[1]) / 2.0 + 2.0 * r_step
    r_axis = np.arange(0.0, r_max, r_step)
    z_axis = np.arange(z_step, box[2] + 2.0 * z_step, z_step)
    pm = dipole_potential(field_map(config, r_axis, z_axis), constants)
    sites = site_table(config, constants, material, z_max=box[2])
    return GriddedPotential(r_axis, z_axis, pm.values, material, constants,
                            sites)


# --- entry sampling --------------------------------------------------------


def _entry_from_uniforms(u: np.ndarray, config: MCConfig,
                         constants: PhysicalConstants):
    """Map six uniforms to an entry position and velocity.

    Faces are weighted by area (the inward thermal flux per unit area is the
    same for every face of an isothermal ensemble).  The inward normal speed
    is flux-weighted (Rayleigh), tangential components are thermal.
    """
    lx, ly, h = config.box
    sigma = math.sqrt(constants.k_B * config.T_ensemble / constants.m)
    areas = np.array([lx * ly, ly * h, ly * h, lx * h, lx * h])
    cum = np.cumsum(areas) / areas.sum()
    face = int(np.searchsorted(cum, u[0], side="right"))
    v_n = sigma * np.sqrt(-2.0 * np.log(1.0 - u[3]))
    amp = np.sqrt(-2.0 * np.log(1.0 - u[4]))
    g0 = sigma * amp * np.cos(2.0 * math.pi * u[5])
    g1 = sigma * amp * np.sin(2.0 * math.pi * u[5])
    if face == 0:      # top, moving down
        pos = ((u[1] - 0.5) * lx, (u[2] - 0.5) * ly, h)
        vel = (g0, g1, -v_n)
    elif face == 1:    # x = -Lx/2
        pos = (-0.5 * lx, (u[1] - 0.5) * ly, u[2] * h)
        vel = (v_n, g0, g1)
    elif face == 2:    # x = +Lx/2
        pos = (0.5 * lx, (u[1] - 0.5) * ly, u[2] * h)
        vel = (-v_n, g0, g1)
    elif face == 3:    # y = -Ly/2
        pos = ((u[1] - 0.5) * lx, -0.5 * ly, u[2] * h)
        vel = (g0, v_n, g1)
    else:              # y = +Ly/2
        pos = ((u[1] - 0.5) * lx, 0.5 * ly, u[2] * h)
        vel = (g0, -v_n, g1)
    return np.array(pos, dtype=float), np.array(vel, dtype=float)


def sample_entry(rng: np.random.Generator, config: MCConfig,
                 constants: PhysicalConstants = DEFAULT_CONSTANTS) -> AtomState:
    """Draw one atom entering the loading box through a random face."""
    pos, vel = _entry_from_uniforms(rng.random(_ENTRY_DRAWS), config, constants)
    return AtomState(pos, vel)


# --- time stepping ---------------------------------------------------------


def _poisson_thresholds(p: float) -> tuple[float, float, float]:
    # inverse-CDF cut points for k = 0, 1, 2 scattering events in one step
    e = math.exp(-p)
    return e, e * (1.0 + p), e * (1.0 + p + 0.5 * p * p)


def _one_step(xs, vs, fs, tape_s, dt, potential, cooling, constants):
    """Advance a batch one step: half-kick, half-drift, damp+recoil,
    half-drift, half-kick.  Reduces to velocity Verlet when cooling is off.

    fs is the force at the incoming positions (cached from the previous
    step); the force at the outgoing positions is returned for reuse.
    """
    m = constants.m
    half = 0.5 * dt
    vs = vs + (half / m) * fs
    xs = xs + half * vs
    if cooling.damping_coefficient > 0.0:
        vs = vs * math.exp(-cooling.damping_coefficient * dt / m)
    p = cooling.scattering_rate * dt
    if p > 0.0:
        t0, t1, t2 = _poisson_thresholds(p)
        u = tape_s[:, 0]
        n_kicks = ((u > t0).astype(np.int8) + (u > t1).astype(np.int8)
                   + (u > t2).astype(np.int8))
        vk = constants.recoil_velocity
        for j in range(_KICK_MAX):
            hit = np.nonzero(n_kicks > j)[0]
            if hit.size:
                ct = 2.0 * tape_s[hit, 1 + 2 * j] - 1.0
                st = np.sqrt(1.0 - ct * ct)
                ph = (2.0 * math.pi) * tape_s[hit, 2 + 2 * j]
                vs[hit, 0] += vk * st * np.cos(ph)
                vs[hit, 1] += vk * st * np.sin(ph)
                vs[hit, 2] += vk * ct
    xs = xs + half * vs
    fs = potential.force_xyz(xs)
    vs = vs + (half / m) * fs
    return xs, vs, fs


def step(state: AtomState, dt: float, potential, cooling: CoolingModel,
         rng: np.random.Generator,
         constants: PhysicalConstants = DEFAULT_CONSTANTS) -> AtomState:
    """Advance one atom by dt.  Consumes a fixed number of random draws per
    call, so a trajectory is reproducible from its stream alone."""
    if state.position[2] <= 0.0:
        raise ValueError("atom is at or below the surface")
    tape = rng.random(_TAPE_WIDTH)[None, :]
    xs, vs, _ = _one_step(state.position[None, :].copy(),
                          state.velocity[None, :].copy(),
                          potential.force_xyz(state.position[None, :]),
                          tape, dt, potential, cooling, constants)
    return AtomState(xs[0], vs[0])


def _advance_chunk(x, v, status, gens, n_steps, dt, potential, cooling,
                   box, constants):
    """Integrate a chunk in place, freezing trajectories as they terminate."""
    lx, ly, h = box
    fcache = potential.force_xyz(x)
    done = 0
    while done < n_steps and np.any(status == _ACTIVE):
        m_steps = min(_STEP_CHUNK, n_steps - done)
        tape = np.stack([g.random((m_steps, _TAPE_WIDTH)) for g in gens])
        for s in range(m_steps):
            idx = np.nonzero(status == _ACTIVE)[0]
            if idx.size == 0:
                break
            xs, vs, fs = _one_step(x[idx], v[idx], fcache[idx],
                                   tape[idx, s, :], dt, potential, cooling,
                                   constants)
            x[idx] = xs
            v[idx] = vs
            fcache[idx] = fs
            ads = xs[:, 2] <= _ADSORB_FLOOR
            bad = (~np.all(np.isfinite(xs), axis=1)
                   | ~np.all(np.isfinite(vs), axis=1)
                   | (np.einsum("ij,ij->i", vs, vs) > _SPEED_CAP ** 2)) & ~ads
            esc = ((np.abs(xs[:, 0]) > 0.5 * lx)
                   | (np.abs(xs[:, 1]) > 0.5 * ly)
                   | (xs[:, 2] > h)) & ~ads & ~bad
            status[idx[ads]] = ADSORBED
            status[idx[bad]] = FLAGGED
            status[idx[esc]] = ESCAPED
        done += m_steps


def _run_chunk(lo, hi, config, potential, dt, n_steps, constants):
    gens = [np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(config.seed), spawn_key=(i,))))
        for i in range(lo, hi)]
    b = hi - lo
    x = np.empty((b, 3))
    v = np.empty((b, 3))
    for j, g in enumerate(gens):
        x[j], v[j] = _entry_from_uniforms(g.random(_ENTRY_DRAWS), config,
                                          constants)
    status = np.full(b, _ACTIVE, dtype=np.int8)
    _advance_chunk(x, v, status, gens, n_steps, dt, potential,
                   config.cooling, config.box, constants)
    idx = np.nonzero(status == _ACTIVE)[0]
    if idx.size:
        kinetic = 0.5 * constants.m * np.einsum("ij,ij->i", v[idx], v[idx])
        total = kinetic + potential.energy_xyz(x[idx])
        status[idx] = np.where(total < 0.0, BOUND, ESCAPED).astype(np.int8)
    final_z = x[:, 2].copy()
    final_z[status == ADSORBED] = 0.0
    return status, final_z


def run_loading(config: MCConfig, potential,
                constants: PhysicalConstants = DEFAULT_CONSTANTS,
                n_threads: int | None = None) -> "LoadingReport":
    """Simulate config.n_trajectories entries and classify the outcomes.

    The time step is halved until it resolves the stiffest trap site.  Any
    thread count produces the same bytes: trajectories are chunked at a
    fixed size and every trajectory owns its own counter-based stream.
    """
    dt = config.dt
    if potential.f_a_max:
        limit = 1.0 / (20.0 * potential.f_a_max)
        while dt > limit:
            dt *= 0.5
    n_steps = max(1, math.ceil(config.duration / dt - 1e-9))
    n = config.n_trajectories
    if n_threads is None:
        n_threads = int(os.environ.get("TWEEZERLAB_THREADS", "1"))
    outcomes = np.empty(n, dtype=np.int8)
    final_z = np.empty(n, dtype=float)
    spans = [(lo, min(lo + _BATCH, n)) for lo in range(0, n, _BATCH)]

    def work(span):
        lo, hi = span
        st, fz = _run_chunk(lo, hi, config, potential, dt, n_steps, constants)
        outcomes[lo:hi] = st
        final_z[lo:hi] = fz

    if n_threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(work, spans))
    else:
        for span in spans:
            work(span)

    counts = np.bincount(outcomes, minlength=4)
    site_hist: dict[int, float] = {}
    if potential.sites:
        site_z = np.array([s.z for s in potential.sites])
        bound_z = final_z[outcomes == BOUND]
        nearest = np.abs(bound_z[:, None] - site_z[None, :]).argmin(axis=1)
        per_site = np.bincount(nearest, minlength=site_z.size)
        site_hist = {s.index: int(c) / n
                     for s, c in zip(potential.sites, per_site)}
    elif counts[BOUND]:
        raise RuntimeError("bound atoms but no sites to assign them to")
    return LoadingReport(
        n_trajectories=n,
        P_tot=int(counts[BOUND]) / n,
        escaped_fraction=int(counts[ESCAPED]) / n,
        adsorbed_fraction=int(counts[ADSORBED]) / n,
        flagged_fraction=int(counts[FLAGGED]) / n,
        site_histogram=site_hist,
        outcomes=outcomes,
        final_z=final_z,
        rng_metadata={"entropy": int(config.seed), "bit_generator": "Philox",
                      "streams": "spawn_key=(trajectory_index,)",
                      "dt_s": dt, "n_steps": n_steps},
    )


@dataclass
class LoadingReport:
    """Aggregate outcome of a loading run plus per-trajectory detail."""

    n_trajectories: int
    P_tot: float
    escaped_fraction: float
    adsorbed_fraction: float
    flagged_fraction: float
    site_histogram: dict[int, float]
    outcomes: np.ndarray
    final_z: np.ndarray
    rng_metadata: dict

    def __post_init__(self):
        total = (self.P_tot + self.escaped_fraction + self.adsorbed_fraction
                 + self.flagged_fraction)
        if abs(total - 1.0) > 1e-12:
            raise ValueError("outcome fractions must sum to 1")
        if self.site_histogram:
            if abs(sum(self.site_histogram.values()) - self.P_tot) > 1e-12:
                raise ValueError("site histogram must sum to P_tot")

    @property
    def counts(self) -> dict[str, int]:
        c = np.bincount(self.outcomes, minlength=4)
        return {label: int(c[i]) for i, label in enumerate(OUTCOME_LABELS)}


def flux_atom_estimate(rho0: float, area: float, v_bar: float,
                       t: float) -> float:
    """Expected atom arrivals: density x area x mean speed x time."""
    for name, val in (("rho0", rho0), ("area", area), ("v_bar", v_bar),
                      ("t", t)):
        if val < 0:
            raise ValueError(f"{name} must be >= 0")
    return rho0 * area * v_bar * t
