"""Single-trajectory stochastic engine for the molecule / logic-ion system.

The engine owns the hidden truth (rotor model, thermal bath, Raman rates) and
a seeded random source. Each operation is also available as a pure function
``op(state, ...) -> (state, EventRecord)`` over an immutable
:class:`SystemState`.

Only the selected normal mode carries a motional quantum number; the other
mode is assumed cooled and its sidebands are not modelled. Each comb pulse
is coarse-grained into one continuous Rabi drive at the comb-aggregated rate
and its outcome is sampled projectively.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .constants import TWO_PI
from .crystal import Mode, ModeStructure
from .molecule import (CombDrive, RotorModel, ThermalEnvironment, carrier_rabi_rate,
                       level_energy, thermal_distribution)


class ProtocolSequenceError(RuntimeError):
    """An operation was issued in a state where the protocol forbids it."""


class AtomLevel(str, Enum):
    G = "g"
    E = "e"


@dataclass(frozen=True)
class SystemState:
    J: int
    n_motion: int = 0
    atomic_level: AtomLevel = AtomLevel.G
    sim_clock: float = 0.0
    # Time not yet accounted for by a rethermalization check.
    time_since_last_projection: float = 0.0

    def snapshot(self):
        return {"J": self.J, "n": self.n_motion, "atom": self.atomic_level.value}


@dataclass(frozen=True)
class PulseSpec:
    delta_omega_o: float
    duration: float
    mode: Optional[Mode] = None
    omega_m: Optional[float] = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("pulse duration must be positive")


@dataclass(frozen=True)
class NoiseModel:
    detection_fidelity_bright: float = 0.8
    detection_fidelity_dark: float = 0.8
    heating_rate: float = 0.0
    recool_residual_nbar: float = 0.0
    pump_success: float = 1.0
    transfer_fidelity: float = 1.0
    pulse_error: float = 0.0

    def __post_init__(self):
        for name in ("detection_fidelity_bright", "detection_fidelity_dark", "pump_success",
                     "transfer_fidelity", "pulse_error"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.heating_rate < 0 or self.recool_residual_nbar < 0:
            raise ValueError("heating_rate and recool_residual_nbar must be nonnegative")

    @classmethod
    def ideal(cls):
        return cls(detection_fidelity_bright=1.0, detection_fidelity_dark=1.0)

    @property
    def resets_cleanly(self):
        return self.recool_residual_nbar == 0 and self.pump_success == 1 and self.heating_rate == 0


@dataclass(frozen=True)
class Timing:
    """Durations (s) of the non-pulse steps of one detection cycle."""
    transfer: float = 10e-6
    detect: float = 250e-6
    reset: float = 730e-6

    def cycle(self, pulse_duration):
        return pulse_duration + self.transfer + self.detect + self.reset


@dataclass
class EventRecord:
    timestamp: float
    kind: str
    params: dict
    outcome: object
    state: dict

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


IDEAL = NoiseModel.ideal()
DEFAULT_TIMING = Timing()


@dataclass(frozen=True)
class _Coupling:
    target: int
    direction: int  # +1 raising J, -1 lowering J
    dn: int         # change of the motional quantum number
    nu: float       # Raman difference frequency that drives it, rad/s


class MoleculePhysics:
    """Hidden truth: which comb settings couple which levels, and how strongly.

    Parameters
    ----------
    model, env : RotorModel, ThermalEnvironment
    modes : ModeStructure
        Crystal modes; only ``selected_mode`` is tracked.
    drive : CombDrive
        Supplies the optical parameters for the carrier rate and the comb span.
    carrier_rate : float, optional
        Override of the carrier Raman rate f0 (cyclic Hz).
    """

    def __init__(self, model: RotorModel, env: ThermalEnvironment, modes: ModeStructure,
                 drive: CombDrive, selected_mode=Mode.MINUS, carrier_rate=None):
        self.model = model
        self.env = env
        self.modes = modes
        self.drive = drive
        self.selected_mode = Mode(selected_mode)
        if carrier_rate is None:
            carrier_rate = carrier_rabi_rate(model, drive) if drive.power_per_comb > 0 else 0.0
        self.f0 = float(carrier_rate)
        self.omega_mode = modes.omega(self.selected_mode)
        self.eta = modes.eta(self.selected_mode)
        self.thermal = thermal_distribution(model, env)
        self._cumulative = np.cumsum(self.thermal)
        self._couplings = [self._build(J) for J in range(model.J_max + 1)]

    def _build(self, J):
        out = []
        for step in self.model.selection_rule.steps:
            for direction in (-1, 1):
                target = J + direction * step
                if not 0 <= target <= self.model.J_max:
                    continue
                f_transition = abs(level_energy(self.model, J) - level_energy(self.model, target))
                if f_transition > self.drive.span:
                    continue
                omega_t = TWO_PI * f_transition
                for dn in (0, 1, -1):
                    out.append(_Coupling(target, direction, dn, omega_t + direction * dn * self.omega_mode))
        return out

    def sideband_rate(self, n_motion, dn):
        if dn == 0:
            return self.f0
        if dn > 0:
            return self.f0 * self.eta * math.sqrt(n_motion + 1)
        return self.f0 * self.eta * math.sqrt(n_motion)

    def resolve(self, J, n_motion, delta_omega_o, omega_m, duration, fourier_factor=1.0):
        """Nearest allowed coupling within the Fourier window.

        Returns ``(coupling, rate_hz, detuning_hz)`` or None.
        """
        window = fourier_factor / duration
        best = None
        half = 0.5 * omega_m
        for c in self._couplings[J]:
            if c.dn < 0 and n_motion == 0:
                continue  # would need to remove a quantum that is not there
            offset = (c.nu - delta_omega_o) % omega_m
            if offset > half:
                offset -= omega_m
            detuning = offset / TWO_PI
            if abs(detuning) >= window:
                continue
            if best is None or abs(detuning) < abs(best[2]):
                best = (c, self.sideband_rate(n_motion, c.dn), detuning)
        return best

    def sample_J(self, rng):
        return int(np.searchsorted(self._cumulative, rng.random() * self._cumulative[-1], side="right"))


def rabi_probability(rate, detuning, duration):
    """Generalised two-level transfer probability (rate and detuning in cyclic Hz)."""
    if rate <= 0:
        return 0.0
    generalised = math.hypot(rate, detuning)
    return (rate / generalised) ** 2 * math.sin(math.pi * generalised * duration) ** 2


def pulse_outcome(state, pulse, physics, noise=IDEAL, fourier_factor=1.0):
    """Transfer probability and target of a pulse for the current state, without sampling."""
    omega_m = physics.drive.omega_m if pulse.omega_m is None else pulse.omega_m
    hit = physics.resolve(state.J, state.n_motion, pulse.delta_omega_o, omega_m, pulse.duration,
                          fourier_factor)
    if hit is None:
        return 0.0, None, 0.0, 0.0
    coupling, rate, detuning = hit
    p = rabi_probability(rate, detuning, pulse.duration) * (1.0 - noise.pulse_error)
    return p, coupling, rate, detuning


def _record(kind, state, params, outcome):
    return EventRecord(timestamp=state.sim_clock, kind=kind, params=params, outcome=outcome,
                       state=state.snapshot())


def _advance(state, dt, **changes):
    return replace(state, sim_clock=state.sim_clock + dt,
                   time_since_last_projection=state.time_since_last_projection + dt, **changes)


def rethermalize(state, physics, rng):
    """Resample J from the thermal distribution with probability 1 - exp(-dt/tau)."""
    dt = state.time_since_last_projection
    tau = physics.env.rethermalization_time
    p = 0.0 if dt <= 0 or math.isinf(tau) else -math.expm1(-dt / tau)
    resampled = p > 0 and rng.random() < p
    J = physics.sample_J(rng) if resampled else state.J
    state = replace(state, J=J, time_since_last_projection=0.0)
    return state, _record("retherm", state, {"dt": dt}, resampled)


def apply_raman_pulse(state, pulse, physics, rng, noise=IDEAL, fourier_factor=1.0):
    """Drive one comb pulse; J and the motional quantum change together or not at all."""
    if pulse.mode is not None and Mode(pulse.mode) is not physics.selected_mode:
        raise ValueError("pulse addresses an untracked mode")
    if noise.heating_rate > 0:
        state = replace(state, n_motion=state.n_motion + int(rng.poisson(noise.heating_rate * pulse.duration)))
    p, coupling, rate, detuning = pulse_outcome(state, pulse, physics, noise, fourier_factor)
    flipped = p > 0 and rng.random() < p
    if flipped:
        state = replace(state, J=coupling.target, n_motion=state.n_motion + coupling.dn)
    state = _advance(state, pulse.duration)
    params = {"delta_omega_o": pulse.delta_omega_o, "duration": pulse.duration,
              "omega_m": pulse.omega_m, "p": p}
    return state, _record("pulse", state, params, flipped)


def atomic_sideband_transfer(state, rng, noise=IDEAL, timing=DEFAULT_TIMING):
    """Red-sideband pulse on the atom: (g, n>=1) -> (e, n-1); (g, 0) is untouched."""
    if state.atomic_level is not AtomLevel.G:
        raise ProtocolSequenceError("sideband transfer requires the atom in g")
    moved = state.n_motion >= 1 and (noise.transfer_fidelity >= 1 or rng.random() < noise.transfer_fidelity)
    if moved:
        state = replace(state, n_motion=state.n_motion - 1, atomic_level=AtomLevel.E)
    state = _advance(state, timing.transfer)
    return state, _record("transfer", state, {}, moved)


def fluorescence_detect(state, noise=IDEAL, rng=None, timing=DEFAULT_TIMING):
    """State-selective fluorescence; returns ``(state, bright, record)``."""
    if state.atomic_level is AtomLevel.G:
        f = noise.detection_fidelity_bright
        bright = f >= 1 or rng.random() < f
    else:
        f = noise.detection_fidelity_dark
        bright = not (f >= 1 or rng.random() < f)
    state = _advance(state, timing.detect)
    return state, bright, _record("detect", state, {}, "bright" if bright else "dark")


def reset(state, noise=IDEAL, rng=None, timing=DEFAULT_TIMING):
    """Optically pump the atom to g and recool the tracked mode."""
    level = state.atomic_level
    if level is AtomLevel.E and (noise.pump_success >= 1 or rng.random() < noise.pump_success):
        level = AtomLevel.G
    n = 0
    if noise.recool_residual_nbar > 0:
        n = int(rng.geometric(1.0 / (1.0 + noise.recool_residual_nbar))) - 1
    state = _advance(state, timing.reset, atomic_level=level, n_motion=n)
    return state, _record("reset", state, {}, None)


class Engine:
    """Stateful trajectory: hidden physics, a seeded RNG, a simulated clock and an event log.

    Protocols should talk to :meth:`apparatus`, which exposes only the
    controls and detection outcomes of a real experiment.
    """

    def __init__(self, physics: MoleculePhysics, noise: NoiseModel = IDEAL, timing: Timing = DEFAULT_TIMING,
                 seed=None, initial_J=None, fourier_factor=1.0, log=True):
        self.physics = physics
        self.noise = noise
        self.timing = timing
        self.fourier_factor = fourier_factor
        self.rng = np.random.default_rng(seed)
        J = physics.sample_J(self.rng) if initial_J is None else int(initial_J)
        if not 0 <= J <= physics.model.J_max:
            raise ValueError("initial_J out of range")
        self.state = SystemState(J=J)
        self.omega_m = physics.drive.omega_m
        self.log_enabled = log
        self.events = []
        self.counters = {"pulse": 0, "transfer": 0, "detect": 0, "reset": 0, "retherm": 0,
                         "cycle": 0, "dark": 0}
        self.time_by_kind = {"pulse": 0.0, "transfer": 0.0, "detect": 0.0, "reset": 0.0}

    def _log(self, record):
        if self.log_enabled:
            self.events.append(record)

    @property
    def clock(self):
        return self.state.sim_clock

    def pin(self, J):
        """Force the molecule into level J (test and calibration hook)."""
        self.state = replace(self.state, J=int(J))

    def set_comb_spacing(self, omega_m):
        if not omega_m > 0:
            raise ValueError("omega_m must be positive")
        self.omega_m = float(omega_m)
        self._log(_record("comb", self.state, {"omega_m": self.omega_m}, None))

    def idle(self, duration):
        self.state = _advance(self.state, duration)

    # -- single steps -------------------------------------------------------

    def pulse(self, delta_omega_o, duration):
        self.state, rec = rethermalize(self.state, self.physics, self.rng)
        if rec.outcome:
            self.counters["retherm"] += 1
            self._log(rec)
        spec = PulseSpec(delta_omega_o % self.omega_m, duration, omega_m=self.omega_m)
        self.state, rec = apply_raman_pulse(self.state, spec, self.physics, self.rng, self.noise,
                                            self.fourier_factor)
        self.counters["pulse"] += 1
        self.time_by_kind["pulse"] += duration
        self._log(rec)
        return rec.outcome

    def transfer(self):
        self.state, rec = atomic_sideband_transfer(self.state, self.rng, self.noise, self.timing)
        self.counters["transfer"] += 1
        self.time_by_kind["transfer"] += self.timing.transfer
        self._log(rec)

    def detect(self):
        self.state, bright, rec = fluorescence_detect(self.state, self.noise, self.rng, self.timing)
        self.counters["detect"] += 1
        self.time_by_kind["detect"] += self.timing.detect
        if not bright:
            self.counters["dark"] += 1
        self._log(rec)
        return bright

    def reset(self):
        self.state, rec = reset(self.state, self.noise, self.rng, self.timing)
        self.counters["reset"] += 1
        self.time_by_kind["reset"] += self.timing.reset
        self._log(rec)

    def cycle(self, delta_omega_o, duration):
        """Pulse, transfer, detect, reset. Returns True when the atom reads dark."""
        if self.state.atomic_level is AtomLevel.E and self.noise.pump_success <= 0:
            raise ProtocolSequenceError("atom stuck in e: optical pumping never succeeds")
        while self.state.atomic_level is AtomLevel.E:
            # A failed pump leaves the atom in e; pump again before the next attempt.
            self.reset()
        if not self.log_enabled:
            return self._cycle_fused(delta_omega_o % self.omega_m, duration)
        self.pulse(delta_omega_o, duration)
        self.transfer()
        dark = not self.detect()
        self.reset()
        self.counters["cycle"] += 1
        return dark

    def _cycle_fused(self, delta_omega_o, duration):
        # Same random draws, in the same order, as the step-by-step path.
        rng, noise, physics, timing = self.rng, self.noise, self.physics, self.timing
        st = self.state
        J, n = st.J, st.n_motion
        dt = st.time_since_last_projection
        tau = physics.env.rethermalization_time
        if dt > 0 and not math.isinf(tau):
            if rng.random() < -math.expm1(-dt / tau):
                J = physics.sample_J(rng)
                self.counters["retherm"] += 1
        if noise.heating_rate > 0:
            n += int(rng.poisson(noise.heating_rate * duration))
        hit = physics.resolve(J, n, delta_omega_o, self.omega_m, duration, self.fourier_factor)
        if hit is not None:
            coupling, rate, detuning = hit
            p = rabi_probability(rate, detuning, duration) * (1.0 - noise.pulse_error)
            if p > 0 and rng.random() < p:
                J, n = coupling.target, n + coupling.dn
        excited = n >= 1 and (noise.transfer_fidelity >= 1 or rng.random() < noise.transfer_fidelity)
        if excited:
            n -= 1
            f = noise.detection_fidelity_dark
            bright = not (f >= 1 or rng.random() < f)
            if not (noise.pump_success >= 1 or rng.random() < noise.pump_success):
                excited_after = True
            else:
                excited_after = False
        else:
            f = noise.detection_fidelity_bright
            bright = f >= 1 or rng.random() < f
            excited_after = False
        if noise.recool_residual_nbar > 0:
            n = int(rng.geometric(1.0 / (1.0 + noise.recool_residual_nbar))) - 1
        else:
            n = 0
        total = timing.cycle(duration)
        self.state = SystemState(J=J, n_motion=n, atomic_level=AtomLevel.E if excited_after else AtomLevel.G,
                                 sim_clock=st.sim_clock + total, time_since_last_projection=total)
        c = self.counters
        c["pulse"] += 1
        c["transfer"] += 1
        c["detect"] += 1
        c["reset"] += 1
        c["cycle"] += 1
        if not bright:
            c["dark"] += 1
        tk = self.time_by_kind
        tk["pulse"] += duration
        tk["transfer"] += timing.transfer
        tk["detect"] += timing.detect
        tk["reset"] += timing.reset
        return not bright

    # -- repeated attempts ---------------------------------------------------

    def repeat_cycles(self, delta_omega_o, duration, max_cycles, stop_on_dark=True):
        """Run up to ``max_cycles`` identical cycles; returns ``(cycles_run, darks)``.

        With a clean reset, stretches of cycles in which nothing happens are
        skipped by sampling their length from the geometric distribution; the
        result has the same distribution as running the cycles one by one.
        """
        if max_cycles <= 0:
            return 0, 0
        start_clock = self.clock
        delta_omega_o %= self.omega_m
        if not (self.noise.resets_cleanly and self.state.n_motion == 0
                and self.state.atomic_level is AtomLevel.G):
            return self._repeat_explicit(delta_omega_o, duration, max_cycles, stop_on_dark)

        logging, self.log_enabled = self.log_enabled, False
        try:
            done = darks = 0
            counts = {"retherm": 0, "transitions": 0}
            # The first cycle carries whatever rethermalization time has accumulated.
            dark, moved = self._cycle_quiet(delta_omega_o, duration, counts)
            done, darks = 1, int(dark)
            t_cycle = self.timing.cycle(duration)
            tau = self.physics.env.rethermalization_time
            p_retherm = 0.0 if math.isinf(tau) else -math.expm1(-t_cycle / tau)
            f_bright = self.noise.detection_fidelity_bright
            while done < max_cycles and not (dark and stop_on_dark):
                p_flip, _, _, _ = pulse_outcome(self.state, PulseSpec(delta_omega_o, duration, omega_m=self.omega_m),
                                                self.physics, self.noise, self.fourier_factor)
                q_idle = (1.0 - p_retherm) * (1.0 - p_flip) * f_bright
                remaining = max_cycles - done
                if q_idle >= 1.0 or 1.0 - q_idle < 1e-15:
                    skip = remaining
                else:
                    skip = min(int(self.rng.geometric(1.0 - q_idle)) - 1, remaining)
                if skip:
                    self._advance_idle(skip, duration)
                    done += skip
                if done >= max_cycles:
                    break
                dark = self._eventful_cycle(delta_omega_o, duration, p_retherm, p_flip, counts)
                done += 1
                darks += int(dark)
        finally:
            self.log_enabled = logging
        self._log(_record("cycles", self.state,
                          {"delta_omega_o": delta_omega_o, "duration": duration, "max_cycles": max_cycles,
                           "omega_m": self.omega_m, "elapsed": self.clock - start_clock},
                          {"cycles": done, "darks": darks, **counts}))
        return done, darks

    def _repeat_explicit(self, delta_omega_o, duration, max_cycles, stop_on_dark):
        done = darks = 0
        while done < max_cycles:
            dark = self.cycle(delta_omega_o, duration)
            done += 1
            darks += int(dark)
            if dark and stop_on_dark:
                break
        return done, darks

    def _cycle_quiet(self, delta_omega_o, duration, counts):
        before = self.counters["retherm"]
        J0 = self.state.J
        dark = self.cycle(delta_omega_o, duration)
        counts["retherm"] += self.counters["retherm"] - before
        moved = self.state.J != J0
        counts["transitions"] += int(moved)
        return dark, moved

    def _advance_idle(self, k, duration):
        t = self.timing
        self.state = replace(self.state, sim_clock=self.state.sim_clock + k * t.cycle(duration),
                             time_since_last_projection=t.cycle(duration))
        for kind in ("pulse", "transfer", "detect", "reset", "cycle"):
            self.counters[kind] += k
        self.time_by_kind["pulse"] += k * duration
        self.time_by_kind["transfer"] += k * t.transfer
        self.time_by_kind["detect"] += k * t.detect
        self.time_by_kind["reset"] += k * t.reset

    def _eventful_cycle(self, delta_omega_o, duration, p_retherm, p_flip, counts):
        """One cycle drawn conditionally on not being idle."""
        f_bright = self.noise.detection_fidelity_bright
        w_retherm = p_retherm
        w_other = (1.0 - p_retherm) * (1.0 - (1.0 - p_flip) * f_bright)
        if self.rng.random() * (w_retherm + w_other) < w_retherm:
            self.state = replace(self.state, J=self.physics.sample_J(self.rng), time_since_last_projection=0.0)
            self.counters["retherm"] += 1
            counts["retherm"] += 1
            dark, _ = self._cycle_quiet(delta_omega_o, duration, counts)
            return dark
        # No resample this cycle: either the pulse flips, or it does not and the atom misreads.
        self.state = replace(self.state, time_since_last_projection=0.0)
        u = self.rng.random() * (p_flip + (1.0 - p_flip) * (1.0 - f_bright))
        if u < p_flip:
            _, coupling, _, _ = pulse_outcome(self.state, PulseSpec(delta_omega_o, duration, omega_m=self.omega_m),
                                              self.physics, self.noise, self.fourier_factor)
            self.state = replace(self.state, J=coupling.target, n_motion=self.state.n_motion + coupling.dn)
            counts["transitions"] += 1
            self.state = _advance(self.state, duration)
            self.counters["pulse"] += 1
            self.time_by_kind["pulse"] += duration
            self.transfer()
            dark = not self.detect()
        else:
            self.state = _advance(self.state, duration)
            self.counters["pulse"] += 1
            self.time_by_kind["pulse"] += duration
            self.transfer()
            self.state = _advance(self.state, self.timing.detect)
            self.counters["detect"] += 1
            self.counters["dark"] += 1
            self.time_by_kind["detect"] += self.timing.detect
            dark = True
        self.reset()
        self.counters["cycle"] += 1
        return dark

    def events_jsonl(self):
        return "".join(rec.to_json() + "\n" for rec in self.events)

    def apparatus(self):
        return Apparatus(self)


class Apparatus:
    """What an experimenter controls and observes; no access to the molecule's truth."""

    __slots__ = ("_engine",)

    def __init__(self, engine: Engine):
        self._engine = engine

    @property
    def clock(self):
        return self._engine.clock

    @property
    def comb_spacing(self):
        return self._engine.omega_m

    def set_comb_spacing(self, omega_m):
        self._engine.set_comb_spacing(omega_m)

    @property
    def mode_frequency(self):
        """Angular frequency of the tracked mode (known from mass spectrometry)."""
        return self._engine.physics.omega_mode

    @property
    def fourier_width(self):
        return self._engine.fourier_factor

    def window(self, duration):
        """Half-width (Hz) of the frequency window a pulse of ``duration`` addresses."""
        return self._engine.fourier_factor / duration

    @property
    def timing(self):
        return self._engine.timing

    @property
    def detection_fidelity(self):
        n = self._engine.noise
        return n.detection_fidelity_bright, n.detection_fidelity_dark

    def cycle(self, delta_omega_o, duration):
        return self._engine.cycle(delta_omega_o, duration)

    def repeat_cycles(self, delta_omega_o, duration, max_cycles, stop_on_dark=True):
        return self._engine.repeat_cycles(delta_omega_o, duration, max_cycles, stop_on_dark)

    def pulse(self, delta_omega_o, duration):
        self._engine.pulse(delta_omega_o, duration)

    def transfer(self):
        self._engine.transfer()

    def detect(self):
        return self._engine.detect()

    def reset(self):
        self._engine.reset()

    def idle(self, duration):
        self._engine.idle(duration)


@dataclass(frozen=True)
class TimeSummary:
    per_cycle: float
    cycles: int
    total: float
    points_per_second: float
    attempts_per_point: int
    by_kind: dict

    def projected(self, points):
        """Simulated time to take ``points`` scan points at this rate."""
        return points / self.points_per_second


def cycle_time_accounting(run, pulse_duration=10e-6, attempts_per_point=100):
    """Per-cycle duration and totals for a finished engine run."""
    per_cycle = run.timing.cycle(pulse_duration)
    return TimeSummary(per_cycle=per_cycle, cycles=run.counters["cycle"], total=run.clock,
                       points_per_second=1.0 / (attempts_per_point * per_cycle),
                       attempts_per_point=attempts_per_point, by_kind=dict(run.time_by_kind))


def build_engine(crystal_modes: ModeStructure, model: RotorModel, env: ThermalEnvironment,
                 drive: CombDrive, *, selected_mode=Mode.MINUS, noise=IDEAL, timing=DEFAULT_TIMING,
                 seed=None, initial_J=None, carrier_rate=None, fourier_factor=1.0, log=True):
    physics = MoleculePhysics(model, env, crystal_modes, drive, selected_mode, carrier_rate)
    return Engine(physics, noise, timing, seed=seed, initial_J=initial_J,
                  fourier_factor=fourier_factor, log=log)
