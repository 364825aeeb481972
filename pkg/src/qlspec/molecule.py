"""Rotational structure of the molecular ion and the comb-driven Raman couplings.

Energies and rotational constants are cyclic frequencies (Hz). Comb
parameters (``omega_m``, ``delta_omega_o``) are angular (rad/s), as are the
resonance offsets returned by :func:`resonance_offsets`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .constants import CONSTANTS, TWO_PI
from .crystal import Mode, ModeStructure

DEFAULT_COMB_SPAN = 30e12


class ForbiddenTransitionError(ValueError):
    pass


class InvalidDetuningError(ValueError):
    pass


class UnsupportedOrderError(ValueError):
    pass


class SelectionRule(str, Enum):
    DELTA_J_2_ONLY = "delta_J_2_only"
    DELTA_J_1_AND_2 = "delta_J_1_and_2"

    @property
    def steps(self):
        return (2,) if self is SelectionRule.DELTA_J_2_ONLY else (1, 2)


@dataclass(frozen=True)
class RotorModel:
    B: float
    D: float = 0.0
    selection_rule: SelectionRule = SelectionRule.DELTA_J_2_ONLY
    dipole_moment: float = 1.0
    resonance_wavelength: float = 400e-9
    J_max: int = 20

    def __post_init__(self):
        object.__setattr__(self, "selection_rule", SelectionRule(self.selection_rule))
        if not self.B > 0:
            raise ValueError("B must be positive")
        if not 0 <= self.D < 1e-3 * self.B:
            raise ValueError("D must satisfy 0 <= D < 1e-3 * B")
        if int(self.J_max) != self.J_max or self.J_max < 1:
            raise ValueError("J_max must be a positive integer")
        object.__setattr__(self, "J_max", int(self.J_max))
        if self.D > 0 and 2 * self.D * self.J_max * (self.J_max + 1) >= self.B:
            # Beyond this J the truncated expansion stops increasing.
            raise ValueError("J_max too large for the centrifugal expansion")
        if not (self.dipole_moment >= 0 and self.resonance_wavelength > 0):
            raise ValueError("dipole_moment must be >= 0 and resonance_wavelength > 0")

    def with_j_max_for(self, env, tail=1e-6):
        """Copy with the smallest J_max whose thermal tail above it is below ``tail``."""
        return replace(self, J_max=required_j_max(self.B, self.D, env.temperature, tail))


@dataclass(frozen=True)
class ThermalEnvironment:
    temperature: float = 300.0
    rethermalization_time: float = 5.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.rethermalization_time > 0:
            raise ValueError("rethermalization_time must be positive (math.inf freezes J)")


@dataclass(frozen=True)
class CombDrive:
    omega_m: float = TWO_PI * 1e9
    delta_omega_o: float = 0.0
    center_wavelength: float = 800e-9
    power_per_comb: float = 1.0
    beam_waist: float = 20e-6
    span: float = DEFAULT_COMB_SPAN

    def __post_init__(self):
        if not self.omega_m > 0:
            raise ValueError("omega_m must be positive")
        if not (self.center_wavelength > 0 and self.beam_waist > 0 and self.span > 0):
            raise ValueError("center_wavelength, beam_waist and span must be positive")
        if self.power_per_comb < 0:
            raise ValueError("power_per_comb must be nonnegative")
        object.__setattr__(self, "delta_omega_o", self.delta_omega_o % self.omega_m)

    @property
    def k_effective(self):
        return 2.0 * TWO_PI / self.center_wavelength


@dataclass(frozen=True)
class ResonanceLine:
    """One Raman resonance as seen through the comb, ``N*omega_m + delta_omega_o``.

    ``n`` is the sideband order on ``mode`` (``n = 0`` carrier, ``mode`` None).
    ``J_upper``/``J_lower`` and ``rate`` are known for computed lines and
    None for measured ones.
    """
    delta_omega_o: float
    N: Optional[int] = None
    n: int = 0
    mode: Optional[Mode] = None
    J_upper: Optional[int] = None
    J_lower: Optional[int] = None
    rate: Optional[float] = None
    uncertainty: float = 0.0
    pair_id: Optional[int] = None
    extra: dict = field(default_factory=dict, compare=False)

    def raman_frequency(self, omega_m):
        """Absolute Raman difference frequency in rad/s (requires N)."""
        if self.N is None:
            raise ValueError("comb order N not known")
        return self.N * omega_m + self.delta_omega_o

    def absolute_frequency(self, omega_m, omega_mode=0.0):
        """Rotational transition frequency in Hz implied by this line."""
        return (self.raman_frequency(omega_m) - self.n * omega_mode) / TWO_PI


def required_j_max(B, D, temperature, tail=1e-6, limit=400):
    """Smallest J_max whose thermal population above it is below ``tail``."""
    j_top = limit
    while D > 0 and 2 * D * j_top * (j_top + 1) >= B:
        j_top -= 1
    p = _boltzmann(B, D, temperature, j_top)
    above = np.cumsum(p[::-1])[::-1]  # above[j] = P(J >= j)
    for j_max in range(1, j_top):
        if above[j_max + 1] < tail:
            return j_max
    raise ValueError("no J_max below limit satisfies the tail criterion")


def level_energy(model: RotorModel, J: int) -> float:
    """Energy of level J relative to J=0, in cyclic Hz."""
    if not 0 <= J <= model.J_max:
        raise ValueError(f"J={J} outside [0, {model.J_max}]")
    x = J * (J + 1)
    return model.B * x - model.D * x * x


def allowed_pairs(model: RotorModel):
    """All allowed ``(J_upper, J_lower)`` pairs with J_upper <= J_max."""
    return [(j, j - step) for j in range(1, model.J_max + 1)
            for step in model.selection_rule.steps if j - step >= 0]


def transition_frequency(model: RotorModel, J_upper: int, J_lower: int) -> float:
    if J_upper <= J_lower:
        raise ValueError("J_upper must exceed J_lower")
    if (J_upper - J_lower) not in model.selection_rule.steps:
        raise ForbiddenTransitionError(
            f"J={J_upper} -> {J_lower} is forbidden under {model.selection_rule.value}")
    return level_energy(model, J_upper) - level_energy(model, J_lower)


def _boltzmann(B, D, temperature, j_max):
    J = np.arange(j_max + 1)
    x = J * (J + 1.0)
    energy = B * x - D * x * x
    logw = np.log(2 * J + 1.0) - CONSTANTS.h * energy / (CONSTANTS.k_B * temperature)
    return np.exp(logw - logsumexp(logw))


def thermal_distribution(model: RotorModel, env: ThermalEnvironment) -> np.ndarray:
    """Boltzmann populations with (2J+1) degeneracy over J = 0..J_max."""
    return _boltzmann(model.B, model.D, env.temperature, model.J_max)


def electric_field_from_power(power: float, waist: float) -> float:
    """Peak field (V/m) of a Gaussian beam with average ``power`` (W) and 1/e^2 radius ``waist`` (m)."""
    if power < 0 or not waist > 0:
        raise ValueError("power must be >= 0 and waist > 0")
    return math.sqrt(4.0 * power / (math.pi * waist**2 * CONSTANTS.c * CONSTANTS.epsilon_0))


def raman_detuning(model: RotorModel, drive: CombDrive) -> float:
    """Detuning of the comb centre from the electronic resonance, cyclic Hz."""
    return CONSTANTS.c * (1.0 / model.resonance_wavelength - 1.0 / drive.center_wavelength)


def carrier_rabi_rate(model: RotorModel, drive: CombDrive) -> float:
    """Carrier Raman rate f0 in cyclic Hz.

    f0 = (d E / hbar)**2 / (4 * Delta) with Delta = 2*pi*c*(1/lambda_res - 1/lambda_comb)
    in rad/s, where d = dipole_moment * e * a_0 and E is the peak field per comb.
    The two-photon Rabi frequency in rad/s is reported as a cyclic rate; this
    reading gives ~824 kHz for d = e a_0, 1 W in 20 um, 800 nm combs, 400 nm resonance.
    """
    delta = raman_detuning(model, drive)
    if not delta > 0:
        raise InvalidDetuningError(
            "comb centre must be red of the electronic resonance "
            f"(detuning {delta:.4g} Hz)")
    d = model.dipole_moment * CONSTANTS.e * CONSTANTS.a_0
    field_ = electric_field_from_power(drive.power_per_comb, drive.beam_waist)
    return (d * field_ / CONSTANTS.hbar) ** 2 / (4.0 * TWO_PI * delta)


def sideband_rabi_rate(f0: float, eta: float, n: int) -> float:
    """Rate of the n-th motional sideband in the Lamb-Dicke regime, ``f0 * eta**|n|``."""
    if abs(n) > 2:
        raise UnsupportedOrderError(f"sideband order |n|={abs(n)} > 2 is not modelled")
    if not 0 <= eta < 1:
        raise ValueError("eta must lie in [0, 1)")
    return f0 * eta ** abs(n)


def comb_decompose(nu: float, omega_m: float):
    """Split a Raman frequency into ``(N, delta)`` with ``nu = N*omega_m + delta`` and 0 <= delta < omega_m."""
    N = math.floor(nu / omega_m)
    delta = nu - N * omega_m
    # Guard against floor landing one off at an exact multiple.
    if delta < 0:
        N -= 1
        delta += omega_m
    elif delta >= omega_m:
        N += 1
        delta -= omega_m
    return N, delta


def resonance_offsets(model: RotorModel, drive: CombDrive, modes: ModeStructure,
                      orders=(-1, 0, 1), select_modes=(Mode.PLUS, Mode.MINUS)):
    """Every comb setting that drives an allowed transition.

    Solves ``N*omega_m + delta_omega_o = Omega + n*omega_mode`` for each allowed
    pair, each order in ``orders`` and each selected mode. Carriers (n=0) are
    listed once with ``mode=None``. Transitions beyond the comb span are
    dropped with a warning.
    """
    f0 = carrier_rabi_rate(model, drive) if drive.power_per_comb > 0 else 0.0
    lines = []
    dropped = 0
    for upper, lower in allowed_pairs(model):
        f_transition = transition_frequency(model, upper, lower)
        if f_transition > drive.span:
            dropped += 1
            continue
        omega_t = TWO_PI * f_transition
        for n in orders:
            for mode in ((None,) if n == 0 else select_modes):
                omega_mode = 0.0 if mode is None else modes.omega(mode)
                eta = 1.0 if mode is None else modes.eta(mode)
                nu = omega_t + n * omega_mode
                N, delta = comb_decompose(nu, drive.omega_m)
                lines.append(ResonanceLine(
                    delta_omega_o=delta, N=N, n=n, mode=None if mode is None else Mode(mode),
                    J_upper=upper, J_lower=lower,
                    rate=f0 if n == 0 else sideband_rabi_rate(f0, eta, n),
                ))
    if dropped:
        warnings.warn(f"{dropped} transition(s) beyond the {drive.span:.3g} Hz comb span were excluded",
                      stacklevel=2)
    return lines


# Bundled presets.  Masses are isotopic values in amu.
MGH_PLUS = RotorModel(B=190e9, D=10e6, selection_rule=SelectionRule.DELTA_J_2_ONLY,
                      dipole_moment=1.57, resonance_wavelength=280e-9, J_max=21)
GENERIC_DIPOLE = RotorModel(B=190e9, D=10e6, dipole_moment=1.0, resonance_wavelength=400e-9, J_max=21)

MOLECULE_PRESETS = {
    "MgH+": MGH_PLUS,
    "generic": GENERIC_DIPOLE,
}

MASSES_AMU = {"Mg+": 23.985, "MgH+": 24.993}
