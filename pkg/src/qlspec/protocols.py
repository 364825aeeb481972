"""Experimental procedures as deterministic state machines over an :class:`~qlspec.dynamics.Apparatus`.

A protocol sees only what a real experiment sees: the controls (comb offset,
comb spacing, pulse duration) and the bright/dark detection record. Where a
procedure needs prior knowledge of the molecule (state preparation, rate
measurement, QND readout) it receives a :class:`LineBook` built from the
experimenter's model, never from the engine.

Line naming: for a pair (J_upper, J_lower) at transition frequency Omega,
the *red* line sits at ``Omega - omega_mode`` and lowers J while adding a
motional quantum; the *blue* line sits at ``Omega + omega_mode`` and raises
J while adding a quantum. Both leave a quantum the atom can detect.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .constants import TWO_PI
from .crystal import Mode, ModeStructure
from .molecule import (CombDrive, ResonanceLine, RotorModel, ThermalEnvironment, carrier_rabi_rate,
                       level_energy, thermal_distribution)


class OrderUndeterminedError(RuntimeError):
    """The dithered resonance could not be re-established."""


@dataclass(frozen=True)
class ProtocolConfig:
    """Budgets and thresholds shared by the protocols.

    ``scan_step`` defaults to the Fourier width ``1/pulse_duration``;
    ``scan_passes`` interleaved passes offset by ``scan_step/scan_passes``
    give an effective grid of ``scan_step/scan_passes``.
    """
    attempts_per_point: int = 100
    pulse_duration: float = 10e-6
    scan_step: Optional[float] = None          # Hz
    scan_passes: int = 10
    scan_start: float = 0.0                    # rad/s
    scan_stop: Optional[float] = None          # rad/s, default omega_m
    empty_threshold: int = 30
    qnd_repetitions: int = 15
    qnd_threshold: float = 0.5
    max_sim_time: float = 2.0e4
    search_attempts: int = 10
    refine_offsets: int = 41
    refine_attempts: int = 8
    dither_ladder: tuple = (1e-6, 1e-5, 1e-4, 1e-3)
    max_comb_order: int = 30000
    order_retries: int = 10
    recapture_time: float = 120.0
    rate_durations: int = 20
    rate_cycles: int = 200
    rate_periods: float = 3.0
    verify_ground: bool = True

    def __post_init__(self):
        counts = ("attempts_per_point", "scan_passes", "empty_threshold", "qnd_repetitions",
                  "search_attempts", "refine_offsets", "refine_attempts", "max_comb_order",
                  "rate_durations", "rate_cycles")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.pulse_duration > 0:
            raise ValueError("pulse_duration must be positive")
        if self.scan_step is not None and not self.scan_step > 0:
            raise ValueError("scan_step must be positive")
        if not 0 < self.qnd_threshold < 1:
            raise ValueError("qnd_threshold must lie in (0, 1)")
        object.__setattr__(self, "dither_ladder", tuple(float(x) for x in self.dither_ladder))
        if not self.dither_ladder or any(not 0 < x < 0.5 for x in self.dither_ladder):
            raise ValueError("dither_ladder entries must lie in (0, 0.5)")

    def step_hz(self, fourier_factor=1.0):
        return self.scan_step if self.scan_step is not None else fourier_factor / self.pulse_duration


@dataclass
class ProtocolResult:
    kind: str
    payload: dict
    confidence: float
    elapsed: float
    success: bool = True
    partial: bool = False

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


class LineBook:
    """Comb settings and rates predicted from the experimenter's model of the molecule."""

    def __init__(self, model: RotorModel, drive: CombDrive, modes: ModeStructure, mode=Mode.MINUS,
                 env: ThermalEnvironment = None, carrier_rate=None):
        self.model = model
        self.drive = drive
        self.mode = Mode(mode)
        self.omega_mode = modes.omega(self.mode)
        self.eta = modes.eta(self.mode)
        self.env = env or ThermalEnvironment()
        if carrier_rate is None:
            carrier_rate = carrier_rabi_rate(model, drive) if drive.power_per_comb > 0 else 0.0
        self.f0 = float(carrier_rate)

    @property
    def sideband_rate(self):
        return self.f0 * self.eta

    def omega(self, J_upper, J_lower):
        return TWO_PI * (level_energy(self.model, J_upper) - level_energy(self.model, J_lower))

    def red(self, J_upper, J_lower, omega_m=None):
        return (self.omega(J_upper, J_lower) - self.omega_mode) % (omega_m or self.drive.omega_m)

    def blue(self, J_upper, J_lower, omega_m=None):
        return (self.omega(J_upper, J_lower) + self.omega_mode) % (omega_m or self.drive.omega_m)

    def carrier(self, J_upper, J_lower, omega_m=None):
        return self.omega(J_upper, J_lower) % (omega_m or self.drive.omega_m)

    def partner(self, J):
        """Level that the QND cycle for J swaps with: J-step if possible, else J+step."""
        step = max(self.model.selection_rule.steps)
        if J - step >= 0:
            return J - step
        if J + step <= self.model.J_max:
            return J + step
        raise ValueError(f"level {J} has no partner")

    def away_back(self, J, omega_m=None):
        """(line that leaves J, line that returns to J)."""
        other = self.partner(J)
        if other < J:
            return self.red(J, other, omega_m), self.blue(J, other, omega_m)
        return self.blue(other, J, omega_m), self.red(other, J, omega_m)

    def couplings(self, omega_m=None):
        """Every drive position as ``(x, J_from, J_to, kind)``; kind is carrier, red or blue."""
        out = []
        for J in range(self.model.J_max + 1):
            for step in self.model.selection_rule.steps:
                if J - step < 0:
                    continue
                c = self.carrier(J, J - step, omega_m)
                out += [(c, J, J - step, "carrier"), (c, J - step, J, "carrier"),
                        (self.red(J, J - step, omega_m), J, J - step, "red"),
                        (self.blue(J, J - step, omega_m), J - step, J, "blue")]
        return out

    def clean_spacing(self, drives, margin=3.0, relative_step=1e-6, max_tries=2000):
        """Comb spacing nearest the nominal one at which every drive is isolated.

        Round constants can put unrelated transitions on the same comb offset.
        Each drive is ``(J_upper, J_lower, kind, window_hz, sources)``; it is
        isolated when no coupling of another pair out of a level in
        ``sources`` (None means every level) lies within ``margin * window_hz`` of it. Moving
        the spacing by a few ppm separates lines of different comb order.
        """
        key = (tuple((d[0], d[1], d[2], d[3], None if d[4] is None else tuple(sorted(d[4]))) for d in drives),
               margin, relative_step)
        cache = self.__dict__.setdefault("_clean_cache", {})
        if key in cache:
            return cache[key]
        om0 = self.drive.omega_m
        for i in range(max_tries):
            k = (i + 1) // 2 * (1 if i % 2 else -1)
            om = om0 * (1.0 + k * relative_step)
            table = self.couplings(om)
            if all(self._isolated(d, table, om, margin) for d in drives):
                cache[key] = om
                return om
        raise RuntimeError("no comb spacing isolates the requested lines")

    def _isolated(self, drive, table, omega_m, margin):
        Ju, Jl, kind, window_hz, sources = drive
        x = getattr(self, kind)(Ju, Jl, omega_m)
        reach = margin * TWO_PI * window_hz
        for y, Jf, Jt, k2 in table:
            if {Jf, Jt} == {Ju, Jl}:
                continue  # same pair: its own sidebands sit a fixed mode frequency away
            if sources is not None and Jf not in sources:
                continue
            if abs((y - x + omega_m / 2) % omega_m - omega_m / 2) < reach:
                return False
        return True

    def detectable_lines(self, J):
        """``(position, target)`` of every line that moves J while adding a quantum."""
        out = []
        for step in self.model.selection_rule.steps:
            if J - step >= 0:
                out.append((self.red(J, J - step), J - step))
            if J + step <= self.model.J_max:
                out.append((self.blue(J + step, J), J + step))
        return out

    def response(self, x, window_hz, omega_m=None):
        """Map level -> target for every level with a detectable line within ``window_hz`` of ``x``.

        Distinct transitions can alias onto the same comb offset; this is
        the set a dark detection at ``x`` cannot tell apart.
        """
        omega_m = omega_m or self.drive.omega_m
        half = TWO_PI * window_hz
        hit = {}
        for J in range(self.model.J_max + 1):
            best = None
            for pos, target in self.detectable_lines(J):
                d = abs((pos - x + omega_m / 2) % omega_m - omega_m / 2)
                if d < half and (best is None or d < best[0]):
                    best = (d, target)
            if best is not None:
                hit[J] = best[1]
        return hit

    def pi_time(self, rate=None):
        return 1.0 / (2.0 * (self.sideband_rate if rate is None else rate))

    def prior(self):
        return thermal_distribution(self.model, self.env)


# -- state preparation ----------------------------------------------------

def _binary_entropy(m):
    if m <= 0.0 or m >= 1.0:
        return 0.0
    return -(m * math.log(m) + (1 - m) * math.log(1 - m))


def project_rotational_state(apparatus, book: LineBook, config: ProtocolConfig = ProtocolConfig(),
                             prior=None, max_probes=200):
    """Collapse the thermal mixture into one known J.

    Hypotheses are the level the molecule started in; each carries the level
    it would occupy now. A probe at comb offset ``x`` either gives a dark
    (every hypothesis whose current level has a line at ``x`` survives and
    moves to its target) or ``k`` consecutive brights (those hypotheses are
    excluded). Probes are chosen greedily by outcome entropy, starting from
    the most probable level. Stops when one current level holds the
    posterior mass ``1 - 1e-3``.
    """
    start = apparatus.clock
    weights = np.array(book.prior() if prior is None else prior, dtype=float)
    weights = weights / weights.sum()
    current = {J: J for J in range(weights.size) if weights[J] > 0}
    t_pi = book.pi_time()
    window = apparatus.window(t_pi)
    k = config.empty_threshold
    excluded = []
    probes = 0
    cache = {}

    def response(x):
        if x not in cache:
            cache[x] = book.response(x, window)
        return cache[x]

    def level_mass():
        mass = {}
        for origin, J in current.items():
            mass[J] = mass.get(J, 0.0) + weights[origin]
        return mass

    while current and probes < max_probes and apparatus.clock - start < config.max_sim_time:
        total = sum(weights[o] for o in current)
        mass = level_mass()
        J_best = max(mass, key=mass.get)
        if mass[J_best] >= (1.0 - 1e-3) * total and probes > 0:
            origins = [o for o, J in current.items() if J == J_best]
            origin = max(origins, key=lambda o: weights[o])
            return ProtocolResult("projected-J", {"J": J_best, "found_in": origin, "excluded": excluded,
                                                  "probes": probes},
                                  confidence=float(mass[J_best] / total), elapsed=apparatus.clock - start)
        # Candidate probes: lines of every level still in play.
        best = None
        for J in sorted(mass, key=lambda j: -mass[j]):
            for x, _ in book.detectable_lines(J):
                r = response(x)
                moved = sum(weights[o] for o, c in current.items() if c in r) / total
                score = (_binary_entropy(moved), moved if J == J_best else 0.0)
                if best is None or score > best[0]:
                    best = (score, x, r)
        if best is None:
            break
        _, x, r = best
        probes += 1
        _, darks = apparatus.repeat_cycles(x, t_pi, k, stop_on_dark=True)
        if darks:
            if apparatus.detection_fidelity != (1.0, 1.0) and not _confirm_return(apparatus, book, config, x, r, current):
                continue
            current = {o: r[c] for o, c in current.items() if c in r}
        else:
            gone = [o for o, c in current.items() if c in r]
            excluded.extend(sorted({current[o] for o in gone}))
            current = {o: c for o, c in current.items() if c not in r}
    return ProtocolResult("projection-failed", {"J": None, "excluded": excluded, "probes": probes},
                          confidence=0.0, elapsed=apparatus.clock - start, success=False)


def _confirm_return(apparatus, book, config, x, response, current):
    """After a dark at ``x``, check that a return line also fires; guards against false darks.

    On success the molecule has been moved back and forth and sits at the target again.
    """
    t_pi = book.pi_time()
    k = config.empty_threshold
    # Return line of the most probable surviving hypothesis.
    movers = [c for c in current.values() if c in response]
    if not movers:
        return False
    source = max(set(movers), key=movers.count)
    target = response[source]
    back = book.red(target, source) if target > source else book.blue(source, target)
    if not _try(apparatus, back, t_pi, k):
        return False
    return _try(apparatus, x, t_pi, k)


def pump_to_rotational_ground(apparatus, book: LineBook, config: ProtocolConfig, J_start: int):
    """Chain carrier pi-pulses J -> J-2 -> ... -> 0, then verify on the 0 -> 2 blue line."""
    start = apparatus.clock
    steps = book.model.selection_rule.steps
    step = 2 if steps == (2,) else 1
    if J_start % step:
        return ProtocolResult("unreachable-ground", {"J_start": J_start, "pulses": 0}, 0.0,
                              apparatus.clock - start, success=False)
    t_carrier = 1.0 / (2.0 * book.f0)
    t_pi = book.pi_time()
    w_carrier, w_side = apparatus.window(t_carrier), apparatus.window(t_pi)
    drives = [(J, J - step, "carrier", w_carrier, {J}) for J in range(J_start, 0, -step)]
    if config.verify_ground:
        drives += [(step, 0, "blue", w_side, {0}), (step, 0, "red", w_side, {step})]
    nominal = apparatus.comb_spacing
    om = book.clean_spacing(drives)
    apparatus.set_comb_spacing(om)
    pulses = 0
    for J in range(J_start, 0, -step):
        apparatus.pulse(book.carrier(J, J - step, om), t_carrier)
        pulses += 1
    verified = None
    if config.verify_ground:
        up, down = book.blue(step, 0, om), book.red(step, 0, om)
        apparatus.reset()
        _, darks = apparatus.repeat_cycles(up, t_pi, config.empty_threshold)
        verified = bool(darks)
        if verified:
            # Return to the ground state the verification left.
            _, back = apparatus.repeat_cycles(down, t_pi, config.empty_threshold)
            verified = bool(back)
    apparatus.set_comb_spacing(nominal)
    return ProtocolResult("ground", {"J_start": J_start, "pulses": pulses, "verified": verified,
                                     "omega_m": om},
                          confidence=1.0 if verified or verified is None else 0.0,
                          elapsed=apparatus.clock - start, success=verified is not False)


# -- rate measurement -----------------------------------------------------

def _sin2(params, t):
    amplitude, rate, offset = params
    return amplitude * np.sin(np.pi * rate * t) ** 2 + offset


def fit_rabi(durations, probabilities, weights=None, rate_guess=None):
    """Least-squares fit of ``A sin^2(pi f t) + c``; returns (f, sigma_f, A, sigma_A, c, cost).

    Several starting rates around ``rate_guess`` guard against locking onto an alias.
    """
    t = np.asarray(durations, float)
    y = np.asarray(probabilities, float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, float)
    if rate_guess is None:
        rate_guess = 1.0 / (2.0 * np.median(np.diff(np.sort(t)))) / 3.0
    best = None
    for scale in np.linspace(0.5, 1.6, 12):
        x0 = [max(y.max() - y.min(), 0.1), rate_guess * scale, max(y.min(), 0.0)]
        try:
            sol = least_squares(lambda p: w * (_sin2(p, t) - y), x0,
                                bounds=([0.0, 0.0, -0.5], [1.5, np.inf, 1.0]))
        except ValueError:
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None or not best.success:
        return None
    J = best.jac
    dof = max(len(y) - 3, 1)
    s2 = 2.0 * best.cost / dof
    try:
        cov = np.linalg.inv(J.T @ J) * s2
    except np.linalg.LinAlgError:
        return None
    errs = np.sqrt(np.clip(np.diag(cov), 0.0, np.inf))
    amplitude, rate, offset = best.x
    return rate, errs[1], amplitude, errs[0], offset, best.cost


def measure_transition_rate(apparatus, book: LineBook, config: ProtocolConfig, J_pair,
                            start_in_upper=True, durations=None):
    """Sideband Rabi rate of one pair from a duration sweep.

    Durations are visited round-robin so that loss of the molecule by
    rethermalization thins every point equally. After each dark the
    belief about which level of the pair is occupied toggles, so the next
    drive uses the line that returns the molecule.
    """
    start = apparatus.clock
    J_upper, J_lower = J_pair
    w = apparatus.window(book.pi_time()) if book.sideband_rate > 0 else apparatus.window(config.pulse_duration)
    nominal = apparatus.comb_spacing
    om = book.clean_spacing([(J_upper, J_lower, "red", w, None), (J_upper, J_lower, "blue", w, None)])
    apparatus.set_comb_spacing(om)
    red, blue = book.red(J_upper, J_lower, om), book.blue(J_upper, J_lower, om)
    guess = book.sideband_rate if book.sideband_rate > 0 else 1.0 / (4 * config.pulse_duration)
    if durations is None:
        t_max = config.rate_periods / guess
        durations = np.linspace(t_max / config.rate_durations, t_max, config.rate_durations)
    durations = np.asarray(durations, float)
    darks = np.zeros(durations.size)
    trials = np.zeros(durations.size)
    upper = bool(start_in_upper)
    for _ in range(config.rate_cycles):
        round_darks = 0
        for i, t in enumerate(durations):
            dark = apparatus.cycle(red if upper else blue, t)
            trials[i] += 1
            if dark:
                darks[i] += 1
                round_darks += 1
                upper = not upper
        if round_darks == 0:
            # Nothing moved for a whole sweep; the belief is probably stale.
            upper = not upper
    apparatus.set_comb_spacing(nominal)
    p = darks / trials
    sigma = np.sqrt(np.clip(p * (1 - p), 0.25 / trials, None) / trials)
    fit = fit_rabi(durations, p, 1.0 / sigma, guess)
    payload = {"J_pair": list(J_pair), "durations": durations.tolist(), "p_dark": p.tolist(),
               "trials": trials.tolist()}
    if fit is None:
        return ProtocolResult("rate-undetermined", payload, 0.0, apparatus.clock - start, success=False)
    rate, sigma_rate, amplitude, sigma_amp, offset, _ = fit
    payload.update(rate=rate, rate_sigma=sigma_rate, ci95=[rate - 1.96 * sigma_rate, rate + 1.96 * sigma_rate],
                   amplitude=amplitude, amplitude_sigma=sigma_amp, offset=offset)
    if not (amplitude > 3 * sigma_amp and amplitude > 0.05 and np.isfinite(sigma_rate)):
        return ProtocolResult("rate-undetermined", payload, 0.0, apparatus.clock - start, success=False)
    confidence = float(min(1.0, max(0.0, 1.0 - sigma_rate / rate))) if rate > 0 else 0.0
    return ProtocolResult("rate-estimate", payload, confidence, apparatus.clock - start)


# -- QND readout ----------------------------------------------------------

def qnd_posterior(outcomes, fidelity_bright, fidelity_dark, prior=(1 / 3, 1 / 3, 1 / 3)):
    """Posterior over (in J, in partner, elsewhere) from alternating away/back detections.

    ``outcomes`` holds True for dark, one row per trial. In J every pulse
    moves the molecule and every detection should be dark; in the partner
    the first pulse misses and every later one moves it; elsewhere nothing
    moves.
    """
    d = np.atleast_2d(np.asarray(outcomes, bool))
    fb, fd = fidelity_bright, fidelity_dark
    eps = 1e-300
    log_dark_if_e, log_bright_if_e = math.log(max(fd, eps)), math.log(max(1 - fd, eps))
    log_dark_if_g, log_bright_if_g = math.log(max(1 - fb, eps)), math.log(max(fb, eps))
    darks = d.sum(axis=1)
    brights = d.shape[1] - darks
    ll_in = darks * log_dark_if_e + brights * log_bright_if_e
    ll_out = darks * log_dark_if_g + brights * log_bright_if_g
    first = d[:, 0]
    ll_partner = (ll_in - np.where(first, log_dark_if_e, log_bright_if_e)
                  + np.where(first, log_dark_if_g, log_bright_if_g))
    logs = np.stack([ll_in, ll_partner, ll_out], axis=1) + np.log(np.maximum(np.asarray(prior, float), eps))
    logs -= logs.max(axis=1, keepdims=True)
    w = np.exp(logs)
    return w / w.sum(axis=1, keepdims=True)


def qnd_readout(apparatus, book: LineBook, config: ProtocolConfig, J_hypothesis, prior=(1 / 3, 1 / 3, 1 / 3)):
    """Repeat away/back sideband cycles on J and its partner, then aggregate.

    The verdict states whether the molecule ends the readout in
    ``J_hypothesis``; a molecule that started in the partner level is
    carried into J by the first return pulse and counts as present.
    """
    start = apparatus.clock
    t_pi = book.pi_time()
    other = book.partner(J_hypothesis)
    pair = (max(J_hypothesis, other), min(J_hypothesis, other))
    w = apparatus.window(t_pi)
    nominal = apparatus.comb_spacing
    om = book.clean_spacing([pair + ("red", w, None), pair + ("blue", w, None)])
    apparatus.set_comb_spacing(om)
    away, back = book.away_back(J_hypothesis, om)
    record = []
    for _ in range(config.qnd_repetitions):
        record.append(apparatus.cycle(away, t_pi))
        record.append(apparatus.cycle(back, t_pi))
    apparatus.set_comb_spacing(nominal)
    fb, fd = apparatus.detection_fidelity
    post = qnd_posterior(record, fb, fd, prior)[0]
    final = float(post[0] + post[1])
    verdict = final >= config.qnd_threshold
    return ProtocolResult("qnd-verdict",
                          {"J": J_hypothesis, "verdict": bool(verdict), "posterior_in": float(post[0]),
                           "posterior_partner": float(post[1]), "posterior_final": final,
                           "darks": int(sum(record)), "detections": len(record)},
                          confidence=final if verdict else 1.0 - final, elapsed=apparatus.clock - start)


# -- blind spectroscopy ---------------------------------------------------

def _wrap(x, omega_m):
    return x % omega_m


def _search(apparatus, positions, duration, attempts):
    """First position in ``positions`` giving a dark; returns its index or None."""
    for i, x in enumerate(positions):
        _, darks = apparatus.repeat_cycles(x, duration, attempts, stop_on_dark=True)
        if darks:
            return i
    return None


def _try(apparatus, x, duration, attempts):
    return apparatus.repeat_cycles(x, duration, attempts, stop_on_dark=True)[1] > 0


@dataclass
class _Pair:
    red: float          # unwrapped red position, rad/s
    upper: bool         # True when the molecule sits in the upper level
    omega_mode: float

    @property
    def blue(self):
        return self.red + 2.0 * self.omega_mode

    @property
    def carrier(self):
        return self.red + self.omega_mode

    def drivable(self):
        return self.red if self.upper else self.blue


def _disambiguate(apparatus, x, config, omega_mode, omega_m):
    """Resolve whether a dark at ``x`` came from a red or a blue line."""
    t, k = config.pulse_duration, config.empty_threshold
    if _try(apparatus, _wrap(x - 2 * omega_mode, omega_m), t, k):
        # x was blue; the red partner has now lowered J.
        return _Pair(red=x - 2 * omega_mode, upper=False, omega_mode=omega_mode)
    if _try(apparatus, _wrap(x + 2 * omega_mode, omega_m), t, k):
        # The red-detuned attempts sat on an n=-3 line; x itself was red.
        return _Pair(red=x, upper=True, omega_mode=omega_mode)
    return None


def _refine(apparatus, pair, config, window):
    """Centre the pair by a pooled red/blue ping-pong sweep over +-2 windows."""
    omega_m = apparatus.comb_spacing
    t = config.pulse_duration
    offsets = np.linspace(-2.0, 2.0, config.refine_offsets) * TWO_PI * window
    order = np.argsort(np.array([int(format(i, "016b")[::-1], 2) for i in range(offsets.size)]))
    hits = np.zeros(offsets.size)
    tries = np.zeros(offsets.size)
    for i in order:
        x = pair.drivable() + offsets[i]
        done, darks = apparatus.repeat_cycles(_wrap(x, omega_m), t, config.refine_attempts)
        tries[i] += done
        if darks:
            hits[i] += 1
            pair.upper = not pair.upper
    rate = hits / np.maximum(tries, 1)
    if rate.sum() > 0:
        shift = float((offsets * rate).sum() / rate.sum())
        pair.red += shift
    return rate


def _recapture(apparatus, pair, config, spacing, red):
    """Wait for the molecule to come back into the pair; returns True on success.

    ``red`` is the pair's red line at comb spacing ``spacing``.
    """
    t = config.pulse_duration
    two = 2.0 * pair.omega_mode
    deadline = apparatus.clock + config.recapture_time
    apparatus.set_comb_spacing(spacing)
    while apparatus.clock < deadline:
        for upper in (True, False):
            x = red if upper else red + two
            if _try(apparatus, _wrap(x, spacing), t, config.search_attempts):
                pair.upper = not upper
                return True
    return False


def infer_comb_order(apparatus, config: ProtocolConfig, pair_or_line, upper=None, omega_mode=None):
    """Comb order N of the red line of a confirmed pair, from a ladder of comb-spacing dithers.

    At spacing ``omega_m + eps`` a line of order N reappears at
    ``delta - N eps`` (modulo the new spacing). Each rung searches only the
    shifts allowed by the previous estimate of N, and the last rung
    (``eps = 1e-3 omega_m`` by default) pins N exactly. A single dither of
    that size leaves N ambiguous modulo ``omega_m/eps + 1``, hence the
    ladder.
    """
    omega_m = apparatus.comb_spacing
    if omega_mode is None:
        omega_mode = apparatus.mode_frequency
    if isinstance(pair_or_line, _Pair):
        pair = pair_or_line
    else:
        line = pair_or_line
        if upper is None:
            raise ValueError("state of the molecule (upper) is required for a bare line")
        red = line.delta_omega_o if line.n <= 0 else line.delta_omega_o - 2 * omega_mode
        pair = _Pair(red=red, upper=bool(upper), omega_mode=omega_mode)
    base = _wrap(pair.red, omega_m)
    window = TWO_PI * apparatus.window(config.pulse_duration)
    step = window / 2.0
    lo, hi = 1.0, float(config.max_comb_order)
    estimate = None
    # Where the pair was last seen. Lines of other pairs can alias onto it at the
    # nominal spacing but separate under dither, so each rung hands on its own.
    ref = (omega_m, base)
    try:
        for eps_rel in config.dither_ladder:
            eps = eps_rel * omega_m
            margin = window / eps + 1.0
            shifts = np.arange(max(lo - margin, 0.0) * eps, (hi + margin) * eps + step, step)
            found = _dither_rung(apparatus, pair, config, omega_m, eps, shifts, base, ref)
            if found is None:
                raise OrderUndeterminedError(f"resonance not re-established at dither {eps_rel:g}")
            estimate = found / eps
            ref = (omega_m + eps, base - found)
            lo, hi = max(1.0, estimate - window / eps), estimate + window / eps
    finally:
        apparatus.set_comb_spacing(omega_m)
    return int(round(estimate))


def _locate_pair(apparatus, y, pair, spacing, config):
    """After a dark at ``y``, find out whether it was the red or the blue line.

    Returns the red position or None; leaves ``pair.upper`` matching the molecule.
    """
    t, k = config.pulse_duration, config.empty_threshold
    two = 2.0 * pair.omega_mode
    half = np.pi * apparatus.window(t)
    for d in (0.0, half, -half):
        if _try(apparatus, _wrap(y - two + d, spacing), t, k):
            pair.upper = False
            return y - two
        if _try(apparatus, _wrap(y + two + d, spacing), t, k):
            pair.upper = True
            return y
    return None


def _dither_rung(apparatus, pair, config, omega_m, eps, shifts, base, ref, chunk=25):
    """Search for the red line at ``base - s``, spacing ``omega_m + eps``; return the shift or None.

    Both lines of the pair are tried at every shift: sweeping across the
    carrier, one mode frequency away, can move the molecule to the other
    level without leaving a detectable quantum. Shifts are swept in chunks;
    after each one the molecule's presence in the pair is checked at the
    reference ``(spacing, red position)``, and a chunk swept while it was
    away is repeated after recapture.
    """
    two = 2.0 * pair.omega_mode
    t = config.pulse_duration
    spacing = omega_m + eps
    index, departures = 0, 0
    while index < shifts.size:
        stop = min(index + chunk, shifts.size)
        apparatus.set_comb_spacing(spacing)
        hit = None
        for i in range(index, stop):
            x = base - shifts[i]
            for y in ((x, x + two) if pair.upper else (x + two, x)):
                if _try(apparatus, _wrap(y, spacing), t, config.search_attempts):
                    hit = (i, x, y)
                    break
            if hit is not None:
                break
        if hit is not None:
            i, x, y = hit
            red = _locate_pair(apparatus, y, pair, spacing, config)
            if red is not None:
                apparatus.set_comb_spacing(omega_m)
                return float(shifts[i] + (x - red))
        ref_spacing, ref_red = ref
        apparatus.set_comb_spacing(ref_spacing)
        probe = ref_red if pair.upper else ref_red + two
        if _try(apparatus, _wrap(probe, ref_spacing), t, config.search_attempts):
            pair.upper = not pair.upper
            index = hit[0] + 1 if hit is not None else stop
            continue
        departures += 1
        if departures > config.order_retries or not _recapture(apparatus, pair, config, ref_spacing, ref_red):
            return None
    return None


def _distance(a, b, omega_m):
    return abs((a - b + omega_m / 2) % omega_m - omega_m / 2)


def _order_check(apparatus, pair, config, omega_m, known):
    """Does the freshly found pair follow ``known`` under the largest dither?"""
    eps = config.dither_ladder[-1] * omega_m
    spacing = omega_m + eps
    red = known["N"] * omega_m + _wrap(known["pair"].red, omega_m)
    two = 2.0 * pair.omega_mode
    window = TWO_PI * apparatus.window(config.pulse_duration)
    t = config.pulse_duration
    try:
        apparatus.set_comb_spacing(spacing)
        for d in np.arange(-window, window + 1.0, window / 2):
            # Only the side that leaves the level the molecule is in: the other side of a
            # known pair can share that level with the fresh pair and fire regardless.
            y = red + d if pair.upper else red + d + two
            if _try(apparatus, _wrap(y, spacing), t, config.search_attempts):
                return _locate_pair(apparatus, y, pair, spacing, config) is not None
        return False
    finally:
        apparatus.set_comb_spacing(omega_m)


def spectrum_scan(apparatus, config: ProtocolConfig = ProtocolConfig(), infer_orders=True):
    """Blind scan of the comb offset over one comb spacing.

    Runs ``scan_passes`` interleaved passes at the Fourier-width step. A
    dark detection triggers disambiguation of red/blue, a centring sweep,
    and (optionally) comb-order inference; the windows of lines already
    found are skipped afterwards. Returns red/blue ResonanceLine pairs.
    """
    start = apparatus.clock
    omega_m = apparatus.comb_spacing
    omega_mode = apparatus.mode_frequency
    t = config.pulse_duration
    false_darks = (1.0 - apparatus.detection_fidelity[0]) * config.attempts_per_point
    if false_darks >= 1.0:
        # A line gives one dark per visit; it cannot be told from this many false ones.
        reason = (f"bright-state fidelity {apparatus.detection_fidelity[0]} gives {false_darks:.1f} "
                  f"false darks per point; single-event scanning needs well under one")
        return ProtocolResult("scan-refused", {"lines": [], "carriers": [], "trace": [], "points": 0,
                                               "omega_m": omega_m, "omega_mode": omega_mode,
                                               "pulse_duration": t,
                                               "attempts_per_point": config.attempts_per_point,
                                               "duplicates": 0, "errors": [reason]},
                              confidence=0.0, elapsed=0.0, success=False, partial=True)
    window = apparatus.window(t)
    step = TWO_PI * config.step_hz(apparatus.fourier_width)
    lo = config.scan_start
    hi = omega_m if config.scan_stop is None else config.scan_stop
    # Integer point count; a float arange can overshoot the stop by one step.
    grid = lo + step * np.arange(max(int(math.ceil((hi - lo) / step - 1e-9)), 0))
    guard = TWO_PI * window
    pairs = []
    trace = []
    partial = False
    points = 0
    duplicates = 0
    for p in range(config.scan_passes):
        offset = step * p / config.scan_passes
        for x0 in grid:
            x = _wrap(x0 + offset, omega_m)
            if apparatus.clock - start > config.max_sim_time:
                partial = True
                break
            done, darks = apparatus.repeat_cycles(x, t, config.attempts_per_point, stop_on_dark=True)
            points += 1
            trace.append((x, done, darks))
            if not darks:
                continue
            pair = _disambiguate(apparatus, x, config, omega_mode, omega_m)
            if pair is None:
                continue
            # Several transitions can share one comb offset; a known position is only a
            # duplicate if the comb order matches too.
            near = [e for e in pairs if _distance(e["pair"].red, pair.red, omega_m) < 2 * guard]
            if near and not infer_orders:
                duplicates += 1
                continue
            if any(e["N"] is not None and _order_check(apparatus, pair, config, omega_m, e) for e in near):
                duplicates += 1
                continue
            _refine(apparatus, pair, config, window)
            entry = {"pair": pair, "N": None, "found_at": apparatus.clock - start}
            if infer_orders:
                try:
                    entry["N"] = infer_comb_order(apparatus, config, pair, omega_mode=omega_mode)
                except OrderUndeterminedError as exc:
                    entry["error"] = str(exc)
                if entry["N"] is not None and any(e["N"] == entry["N"] and
                                                  _distance(e["pair"].red, pair.red, omega_m) < 2 * guard
                                                  for e in pairs):
                    duplicates += 1
                    continue
            pairs.append(entry)
        if partial:
            break
    lines = []
    for i, entry in enumerate(pairs):
        pair = entry["pair"]
        red_wrapped = _wrap(pair.red, omega_m)
        N_red = entry["N"]
        blue_abs = None if N_red is None else N_red * omega_m + red_wrapped + 2 * omega_mode
        N_blue = None if blue_abs is None else int(math.floor(blue_abs / omega_m))
        lines.append(ResonanceLine(red_wrapped, N=N_red, n=-1, mode=None, pair_id=i,
                                   uncertainty=window / 2, extra={"side": "red"}))
        lines.append(ResonanceLine(_wrap(pair.blue, omega_m), N=N_blue, n=1, mode=None, pair_id=i,
                                   uncertainty=window / 2, extra={"side": "blue"}))
    carriers = [_wrap(e["pair"].carrier, omega_m) for e in pairs]
    payload = {"lines": lines, "carriers": carriers, "trace": trace, "points": points,
               "omega_m": omega_m, "omega_mode": omega_mode, "pulse_duration": t,
               "attempts_per_point": config.attempts_per_point,
               "duplicates": duplicates, "errors": [e.get("error") for e in pairs if e.get("error")]}
    return ProtocolResult("resonance-list", payload, confidence=1.0 if not partial else 0.5,
                          elapsed=apparatus.clock - start, partial=partial)
