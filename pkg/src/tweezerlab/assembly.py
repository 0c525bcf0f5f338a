"""Feedback-controlled assembly of an atom array on a photonic surface.

A multi-tweezer plan runs one conveyor belt at a time: within its time
segment each tweezer lattice is converted into a moving lattice that
carries the trapped atom toward the surface, a guided probe reports a
transmission drop once the atom enters the evanescent region, and on
detection the atom is parked in a dark state just above the structure.
The simulation is a deterministic event loop over closed-form segment
kinematics; the only randomness is the per-atom trap lifetime draw and,
optionally, the initial occupancy sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq

from .constants import DEFAULT_CONSTANTS
from .loading import BOUND, LoadingReport
from .potential import DetuningProfile

__all__ = [
    "AssemblyPlan", "TweezerState", "ScheduleSegment", "AssemblySchedule",
    "AssemblyReport", "ExponentialProbe", "SiteSurvival", "SurvivalSummary",
    "plan_schedule", "conveyor_profile", "simulate_assembly",
    "survival_summary", "MODES", "OUTCOMES",
]

MODES = ("stationary", "conveyor", "parked-dark", "empty", "lost")
OUTCOMES = ("assembled", "lost-in-transport", "decayed", "initially-empty")

# legal mode transitions for a single tweezer during a run
_TRANSITIONS = {
    ("stationary", "conveyor"), ("stationary", "empty"),
    ("empty", "conveyor"), ("conveyor", "empty"),
    ("conveyor", "parked-dark"), ("conveyor", "lost"),
    ("parked-dark", "empty"),
}


@dataclass(frozen=True)
class AssemblyPlan:
    """Tone layout and control parameters for one assembly run.

    tones are the tweezer radio frequencies in Hz, one per trap, in
    segment order.  Neighbouring tones must be separated by at least
    resonance_ratio times the axial trap frequency f_a so that the
    bottom beam addresses a single tweezer at a time, and the tone
    switch must complete well inside one axial period.
    """

    tones: tuple
    f_a: float = 900e3
    tau_max: float = 5e-3
    probe_drop_threshold: float = 0.7
    switch_time: float = 1e-7
    lifetime: float = 0.9
    detection_latency: float = 0.0
    resonance_ratio: float = 10.0
    probe_drop_max: float = 0.7
    evan_scale: float = 1.0
    t_ramp: float = 1e-3
    lambda_t: float = DEFAULT_CONSTANTS.lambda_t
    lambda_a: float = DEFAULT_CONSTANTS.lambda_a

    def __post_init__(self):
        tones = tuple(float(nu) for nu in np.atleast_1d(np.asarray(self.tones, dtype=float)))
        if len(tones) < 1 or not all(math.isfinite(nu) for nu in tones):
            raise ValueError("need at least one finite tweezer tone")
        object.__setattr__(self, "tones", tones)
        for name in ("f_a", "tau_max", "t_ramp", "lambda_t", "lambda_a", "evan_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.resonance_ratio >= 1:
            raise ValueError("resonance_ratio must be at least 1")
        if not 0 < self.probe_drop_threshold < 1:
            raise ValueError("probe_drop_threshold must lie strictly between 0 and 1")
        if not 0 < self.probe_drop_max <= 1:
            raise ValueError("probe_drop_max must lie in (0, 1]")
        if self.switch_time < 0 or self.detection_latency < 0:
            raise ValueError("switch_time and detection_latency must be non-negative")
        if not self.lifetime >= 0:
            raise ValueError("lifetime must be non-negative (inf for no decay)")
        gap = self.resonance_ratio * self.f_a
        for a, b in zip(tones, tones[1:]):
            if abs(b - a) < gap:
                raise ValueError(
                    f"tone spacing {abs(b - a):.3g} Hz below {gap:.3g} Hz; "
                    "neighbouring conveyors would cross-talk")
        # the jump to the next tone must be fast on the axial period
        if self.switch_time * self.f_a * self.resonance_ratio > 1:
            raise ValueError("switch_time too slow against the axial period 1/f_a")

    @property
    def m(self) -> int:
        return len(self.tones)

    @property
    def tone_spacings(self) -> tuple:
        return tuple(abs(b - a) for a, b in zip(self.tones, self.tones[1:]))

    @property
    def lambda_evan(self) -> float:
        """Probe evanescent decay length above the surface."""
        return self.lambda_a / (2 * math.pi) * self.evan_scale


@dataclass
class TweezerState:
    """Live state of one tweezer during a run."""

    mode: str
    atom_z: Optional[float] = None
    time_entered_evanescent: float = math.nan

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def transition(self, new_mode: str, lambda_a: float) -> None:
        if (self.mode, new_mode) not in _TRANSITIONS:
            raise ValueError(f"illegal transition {self.mode!r} -> {new_mode!r}")
        if new_mode == "parked-dark":
            if self.atom_z is None or not self.atom_z < lambda_a:
                raise ValueError("parked atom must sit inside the evanescent region")
        self.mode = new_mode


@dataclass(frozen=True)
class ScheduleSegment:
    tweezer: int          # 1-based; 0 for run-level entries
    kind: str             # "conveyor" or "switch"
    t_start: float
    t_end: float
    nu_b: float           # bottom-beam tone during the window (target tone for a switch)

    def __post_init__(self):
        if self.kind not in ("conveyor", "switch"):
            raise ValueError("segment kind must be 'conveyor' or 'switch'")
        if not self.t_end >= self.t_start:
            raise ValueError("segment must not end before it starts")


@dataclass(frozen=True)
class AssemblySchedule:
    """Planned bottom-beam frequency profile nu_b(t), as ordered windows."""

    segments: tuple

    def __post_init__(self):
        segs = tuple(self.segments)
        for a, b in zip(segs, segs[1:]):
            if b.t_start < a.t_end:
                raise ValueError("schedule windows must be ordered and non-overlapping")
        object.__setattr__(self, "segments", segs)

    @property
    def total_time(self) -> float:
        return self.segments[-1].t_end if self.segments else 0.0

    def nu_b(self, t: float) -> float:
        for seg in self.segments:
            if seg.t_start <= t < seg.t_end:
                return seg.nu_b
        return self.segments[-1].nu_b if self.segments and t >= self.total_time else 0.0

    def as_dicts(self) -> list:
        return [{"tweezer": s.tweezer, "kind": s.kind, "t_start_s": s.t_start,
                 "t_end_s": s.t_end, "nu_b_Hz": s.nu_b} for s in self.segments]


def plan_schedule(plan: AssemblyPlan) -> AssemblySchedule:
    """Budget envelope of the run: tau_max per tweezer, a tone switch after each.

    The simulation may end conveyor windows early on probe feedback; this
    schedule is the maximal profile.  The final switch returns the bottom
    beam to rest (nu_b = 0).
    """
    segs = []
    t = 0.0
    for i, nu in enumerate(plan.tones, start=1):
        segs.append(ScheduleSegment(i, "conveyor", t, t + plan.tau_max, nu))
        t += plan.tau_max
        nxt = plan.tones[i] if i < plan.m else 0.0
        segs.append(ScheduleSegment(i, "switch", t, t + plan.switch_time, nxt))
        t += plan.switch_time
    return AssemblySchedule(tuple(segs))


def conveyor_profile(distance: float, plan: AssemblyPlan) -> DetuningProfile:
    """Detuning trapezoid that covers `distance` in exactly tau_max.

    The canonical ramp time is shortened when the budget is tighter than
    two ramps; the hold detuning scales so the swept area integrates to
    the requested travel.
    """
    if not distance > 0:
        raise ValueError("transport distance must be positive")
    r = min(plan.t_ramp, 0.5 * plan.tau_max)
    hold = plan.tau_max - 2 * r
    dnu_h = distance / (0.5 * plan.lambda_t * (hold + r))
    return DetuningProfile.trapezoid(dnu_h, hold, t_ramp=r)


@dataclass(frozen=True)
class ExponentialProbe:
    """Phenomenological guided-probe response to an approaching atom.

    The fractional transmission drop decays exponentially with height,
    drop(z) = d_max * exp(-2 z / decay_length), saturating at d_max for
    an atom on the surface.
    """

    d_max: float = 0.7
    decay_length: float = DEFAULT_CONSTANTS.lambda_a / (2 * math.pi)

    def __post_init__(self):
        if not 0 < self.d_max <= 1:
            raise ValueError("d_max must lie in (0, 1]")
        if not self.decay_length > 0:
            raise ValueError("decay_length must be positive")

    def drop(self, z: float) -> float:
        return self.d_max * math.exp(-2 * z / self.decay_length)

    def detection_height(self, level: float) -> Optional[float]:
        """Largest height at which the drop reaches `level`, None if never."""
        if level > self.d_max:
            return None
        return 0.5 * self.decay_length * math.log(self.d_max / level)


def _probe_height(probe, level: float, z_hi: float) -> Optional[float]:
    # custom probes without a closed-form inverse fall back to root finding
    solver = getattr(probe, "detection_height", None)
    if solver is not None:
        return solver(level)
    if probe.drop(z_hi) >= level:
        return z_hi
    if probe.drop(0.0) < level:
        return None
    return float(brentq(lambda z: probe.drop(z) - level, 0.0, z_hi,
                        xtol=1e-16, rtol=1e-14))


@dataclass(frozen=True)
class AssemblyReport:
    """Per-site outcome record of one simulated run.

    survival_probability is the closed-form chance that a parked atom is
    still trapped when the run ends, exp(-(t_end - t_park)/lifetime);
    sites that never park carry 0.
    """

    outcomes: tuple
    assembly_times: tuple
    survival_probability: tuple
    final_z: tuple
    total_duration: float
    events: tuple
    final_states: tuple
    master_seed: Optional[int] = None

    def __post_init__(self):
        n = len(self.outcomes)
        for name in ("assembly_times", "survival_probability", "final_z", "final_states"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have one entry per tweezer")
        for oc in self.outcomes:
            if oc not in OUTCOMES:
                raise ValueError(f"unknown outcome {oc!r}")
        for sp in self.survival_probability:
            if not 0.0 <= sp <= 1.0:
                raise ValueError("survival probabilities must lie in [0, 1]")
        if not self.total_duration >= 0:
            raise ValueError("total_duration must be non-negative")

    @property
    def n_assembled(self) -> int:
        return sum(oc == "assembled" for oc in self.outcomes)


def _decay_time(lifetime: float, u: float) -> float:
    if lifetime == 0:
        return 0.0
    if math.isinf(lifetime):
        return math.inf
    return -lifetime * math.log1p(-u)


def _park_survival(interval: float, lifetime: float) -> float:
    if interval <= 0 or math.isinf(lifetime):
        return 1.0
    if lifetime == 0:
        return 0.0
    return math.exp(-interval / lifetime)


def _initial_positions(plan: AssemblyPlan, occupancy, rng) -> list:
    """One starting height (or None) per tweezer.

    Explicit sequences pass through; a loading report contributes a
    uniform draw over its trapped final positions for every tweezer,
    or all-empty if nothing stayed bound.
    """
    if isinstance(occupancy, LoadingReport):
        bound_z = np.asarray(occupancy.final_z)[np.asarray(occupancy.outcomes) == BOUND]
        bound_z = bound_z[bound_z > 0]
        if bound_z.size == 0:
            return [None] * plan.m
        picks = rng.integers(0, bound_z.size, size=plan.m)
        return [float(bound_z[k]) for k in picks]
    z0 = list(occupancy)
    if len(z0) != plan.m:
        raise ValueError("occupancy must provide one entry per tweezer")
    return [None if z is None else float(z) for z in z0]


def simulate_assembly(plan: AssemblyPlan,
                      initial_occupancy: Union[LoadingReport, Sequence],
                      transport_model: Optional[Callable] = None,
                      probe_model=None,
                      rng: Union[int, np.random.Generator, None] = 0) -> AssemblyReport:
    """Run the tone-multiplexed conveyor assembly once.

    Each tweezer gets one conveyor segment in tone order.  The profile is
    scaled to carry the atom from its starting height to the surface
    within tau_max, so an undetected atom reaches z = 0 exactly at the
    segment end.  Detection requires the atom inside the evanescent
    region and the probe drop at threshold * d_max; the atom keeps moving
    for detection_latency before transport halts, and is lost if it
    reaches the surface first.  Trap decay runs continuously from t = 0
    with the configured lifetime.  Identical (plan, occupancy, rng seed)
    give an identical report.
    """
    transport_model = transport_model or conveyor_profile
    probe = probe_model if probe_model is not None else ExponentialProbe(
        plan.probe_drop_max, plan.lambda_evan)
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    z0 = _initial_positions(plan, initial_occupancy, gen)
    u = gen.uniform(size=plan.m)          # one draw per site keeps the stream aligned
    decay_at = [_decay_time(plan.lifetime, ui) if z is not None else math.inf
                for z, ui in zip(z0, u)]

    level = plan.probe_drop_threshold * plan.probe_drop_max
    z_probe = _probe_height(probe, level, plan.lambda_a)
    # detection is gated strictly inside the evanescent region; the inset is
    # one part in 1e12 so the parked-height invariant stays strict
    z_gate = None if z_probe is None or z_probe <= 0 else min(
        z_probe, plan.lambda_a * (1 - 1e-12))

    states = [TweezerState("stationary" if z is not None else "empty") for z in z0]
    outcomes: list = ["initially-empty" if z is None else None for z in z0]
    park_t = [math.nan] * plan.m
    park_z = [math.nan] * plan.m
    events: list = []
    conveyor_site = None
    t = 0.0

    for i in range(plan.m):
        if conveyor_site is not None:
            raise RuntimeError("two conveyor belts active at once")
        conveyor_site = i
        st = states[i]
        events.append((t, i + 1, "conveyor-on"))
        seg = plan.tau_max
        z_i = z0[i]

        if z_i is None:
            st.transition("conveyor", plan.lambda_a)
            st.transition("empty", plan.lambda_a)
        elif decay_at[i] <= t:
            # atom evaporated while waiting; the controller sees nothing
            if st.mode == "stationary":
                st.transition("empty", plan.lambda_a)
            events.append((decay_at[i], i + 1, "decayed"))
            outcomes[i] = "decayed"
            st.transition("conveyor", plan.lambda_a)
            st.transition("empty", plan.lambda_a)
        elif z_i <= 0:
            # starting on the surface: adsorbed the moment transport begins
            st.transition("conveyor", plan.lambda_a)
            st.transition("lost", plan.lambda_a)
            events.append((t, i + 1, "lost-in-transport"))
            outcomes[i] = "lost-in-transport"
        else:
            st.transition("conveyor", plan.lambda_a)
            profile = transport_model(z_i, plan)
            # contract on injected models: fit the budget, reach the surface
            if profile.t_end > plan.tau_max * (1 + 1e-9):
                raise ValueError("transport profile exceeds the per-tweezer budget tau_max")
            if profile.displacement(profile.t_end, plan.lambda_t) < z_i * (1 - 1e-9):
                raise ValueError("transport profile does not cover the starting height")
            t_evan = (0.0 if z_i <= plan.lambda_a else
                      profile.first_time_at(z_i - plan.lambda_a, plan.lambda_t))
            t_cross = None
            if z_gate is not None:
                t_cross = (0.0 if z_i <= z_gate else
                           profile.first_time_at(z_i - z_gate, plan.lambda_t))
            alive_until = decay_at[i] - t    # segment-relative

            if t_evan is not None and alive_until > t_evan:
                st.time_entered_evanescent = t + t_evan

            if t_cross is None:
                # probe never fires: the atom rides the full profile into the surface
                if alive_until <= profile.t_end:
                    events.append((t + alive_until, i + 1, "decayed"))
                    outcomes[i] = "decayed"
                    st.transition("empty", plan.lambda_a)
                else:
                    events.append((t + profile.t_end, i + 1, "lost-in-transport"))
                    outcomes[i] = "lost-in-transport"
                    st.transition("lost", plan.lambda_a)
            elif alive_until <= t_cross:
                events.append((t + alive_until, i + 1, "decayed"))
                outcomes[i] = "decayed"
                st.transition("empty", plan.lambda_a)
            else:
                events.append((t + t_cross, i + 1, "probe-detection"))
                t_det = t_cross + plan.detection_latency
                z_halt = z_i - profile.displacement(t_det, plan.lambda_t)
                if t_det >= profile.t_end or z_halt <= 0:
                    # halt landed after the atom met the surface
                    seg = min(t_det, plan.tau_max)
                    if alive_until <= profile.t_end:
                        events.append((t + alive_until, i + 1, "decayed"))
                        outcomes[i] = "decayed"
                        st.transition("empty", plan.lambda_a)
                    else:
                        events.append((t + profile.t_end, i + 1, "lost-in-transport"))
                        outcomes[i] = "lost-in-transport"
                        st.transition("lost", plan.lambda_a)
                elif alive_until <= t_det:
                    seg = t_det
                    events.append((t + alive_until, i + 1, "decayed"))
                    outcomes[i] = "decayed"
                    st.transition("empty", plan.lambda_a)
                else:
                    seg = t_det
                    zp = min(z_halt, z_gate)
                    st.atom_z = zp
                    st.transition("parked-dark", plan.lambda_a)
                    park_t[i] = t + t_det
                    park_z[i] = zp
                    events.append((t + t_det, i + 1, "parked-dark"))

        events.append((t + seg, i + 1, "conveyor-off"))
        conveyor_site = None
        t += seg + plan.switch_time

    t_end = t
    survival = [0.0] * plan.m
    for i in range(plan.m):
        if not math.isnan(park_t[i]):
            survival[i] = _park_survival(t_end - park_t[i], plan.lifetime)
            if decay_at[i] <= t_end:
                events.append((decay_at[i], i + 1, "decayed"))
                outcomes[i] = "decayed"
                states[i].transition("empty", plan.lambda_a)
                states[i].atom_z = None
            else:
                outcomes[i] = "assembled"
    events.append((t_end, 0, "run-end"))
    events.sort(key=lambda e: (e[0], e[1]))

    if any(oc is None for oc in outcomes):
        raise RuntimeError("outcome bookkeeping left a site unresolved")
    return AssemblyReport(
        outcomes=tuple(outcomes),
        assembly_times=tuple(park_t),
        survival_probability=tuple(survival),
        final_z=tuple(park_z),
        total_duration=t_end,
        events=tuple(events),
        final_states=tuple(states),
        master_seed=seed,
    )


@dataclass(frozen=True)
class SiteSurvival:
    site: int
    n_runs: int
    n_parked: int
    n_assembled: int
    expected_assembled: float      # sum of per-run closed-form survivals
    sd_expected: float             # Poisson-binomial standard deviation
    closed_form_survival: float    # mean closed form over runs that parked
    mc_survival: float             # assembled / parked


@dataclass(frozen=True)
class SurvivalSummary:
    per_site: tuple
    n_runs: int
    expected_assembled: float      # per run, summed over sites
    observed_assembled: float      # per run, summed over sites
    mean_closed_form_survival: float


def survival_summary(reports: Union[AssemblyReport, Sequence[AssemblyReport]],
                     plan: AssemblyPlan) -> SurvivalSummary:
    """Compare Monte Carlo survival against the closed-form exponential.

    For every run in which a site parked, the closed form
    exp(-(t_end - t_park)/lifetime) is that run's survival chance, so the
    expected assembled count is a sum of independent Bernoulli means and
    its spread the Poisson-binomial standard deviation.  Accepts a single
    report or any sequence of reports from the same plan shape.
    """
    if isinstance(reports, AssemblyReport):
        reports = [reports]
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    m = len(reports[0].outcomes)
    if any(len(r.outcomes) != m for r in reports):
        raise ValueError("all reports must cover the same tweezer count")
    if m != plan.m:
        raise ValueError("reports do not match the plan's tweezer count")

    rows = []
    total_sp = 0.0
    total_parked = 0
    total_assembled = 0
    for i in range(m):
        sp = [r.survival_probability[i] for r in reports]
        parked = [not math.isnan(r.assembly_times[i]) for r in reports]
        n_parked = sum(parked)
        n_assembled = sum(r.outcomes[i] == "assembled" for r in reports)
        expected = math.fsum(sp)
        var = math.fsum(p * (1 - p) for p in sp)
        closed = expected / n_parked if n_parked else 0.0
        rows.append(SiteSurvival(
            site=i + 1, n_runs=len(reports), n_parked=n_parked,
            n_assembled=n_assembled, expected_assembled=expected,
            sd_expected=math.sqrt(var), closed_form_survival=closed,
            mc_survival=n_assembled / n_parked if n_parked else 0.0))
        total_sp += expected
        total_parked += n_parked
        total_assembled += n_assembled

    return SurvivalSummary(
        per_site=tuple(rows),
        n_runs=len(reports),
        expected_assembled=total_sp / len(reports),
        observed_assembled=total_assembled / len(reports),
        mean_closed_form_survival=total_sp / total_parked if total_parked else 0.0,
    )
