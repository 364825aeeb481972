"""Axial normal modes of a two-ion crystal (one atomic logic ion, one molecular ion).

All angular frequencies are in rad/s. Masses are in kg; use
:meth:`CrystalSpec.from_amu` to build a crystal from atomic mass units and
cyclic trap frequencies.

Eigenvectors are physical displacement amplitudes normalised to unit
Euclidean length, ordered ``(atom, molecule)``. For unequal masses they are
orthogonal in the mass-weighted metric ``diag(m_atom, m_molecule)``, not in
the Euclidean one.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .constants import CONSTANTS, TWO_PI

# Range of mass ratios m_atom/m_other over which mixed-species ground-state
# cooling has been demonstrated.
COOLING_RATIO_RANGE = (1.0 / 3.0, 2.0)


class InconsistentMeasurementError(ValueError):
    """Mode frequencies that no positive molecular mass can produce."""


class Mode(str, Enum):
    PLUS = "plus"
    MINUS = "minus"


@dataclass(frozen=True)
class CrystalSpec:
    m_atom: float
    m_molecule: float
    omega_atom: float

    def __post_init__(self):
        for name in ("m_atom", "m_molecule", "omega_atom"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")

    @classmethod
    def from_amu(cls, m_atom_amu, m_molecule_amu, f_atom_hz=None, *, omega_atom=None):
        """Build a crystal from masses in amu and the atom's trap frequency.

        Give either the cyclic frequency ``f_atom_hz`` or the angular
        ``omega_atom`` (rad/s), not both.
        """
        if (f_atom_hz is None) == (omega_atom is None):
            raise ValueError("give exactly one of f_atom_hz or omega_atom")
        if omega_atom is None:
            omega_atom = TWO_PI * f_atom_hz
        return cls(m_atom_amu * CONSTANTS.amu, m_molecule_amu * CONSTANTS.amu, omega_atom)

    @property
    def mu(self) -> float:
        """Mass ratio m_molecule / m_atom."""
        return self.m_molecule / self.m_atom


@dataclass(frozen=True)
class ModeStructure:
    omega_plus: float
    omega_minus: float
    v_plus: tuple
    v_minus: tuple
    eta_plus: float
    eta_minus: float
    k_effective: float

    def omega(self, mode) -> float:
        return self.omega_plus if Mode(mode) is Mode.PLUS else self.omega_minus

    def eta(self, mode) -> float:
        return self.eta_plus if Mode(mode) is Mode.PLUS else self.eta_minus

    def vector(self, mode) -> tuple:
        return self.v_plus if Mode(mode) is Mode.PLUS else self.v_minus


@dataclass(frozen=True)
class CoolingAdvisory:
    mass_ratio: float
    within_range: bool
    message: str


def _light_heavy(spec):
    # Always evaluate the closed forms with the heavier ion in the mu position.
    # Returns (mu >= 1, single-ion frequency of the lighter ion, swapped?).
    if spec.m_molecule >= spec.m_atom:
        return spec.m_molecule / spec.m_atom, spec.omega_atom, False
    # Same charge, same well curvature: omega^2 scales as 1/m.
    omega_light = spec.omega_atom * math.sqrt(spec.m_atom / spec.m_molecule)
    return spec.m_atom / spec.m_molecule, omega_light, True


def _frequencies(mu, omega_light):
    root = math.sqrt(1.0 + 1.0 / mu**2 - 1.0 / mu)
    return (omega_light * math.sqrt(1.0 + 1.0 / mu + root),
            omega_light * math.sqrt(1.0 + 1.0 / mu - root))


def normal_mode_frequencies(spec: CrystalSpec):
    """Return ``(omega_plus, omega_minus)`` in rad/s, with omega_plus > omega_minus."""
    mu, omega_light, _ = _light_heavy(spec)
    return _frequencies(mu, omega_light)


def normal_mode_vectors(spec: CrystalSpec):
    """Return unit displacement vectors ``(v_plus, v_minus)`` as ``(atom, molecule)`` pairs."""
    mu, _, swapped = _light_heavy(spec)
    root = math.sqrt(mu * mu - mu + 1.0)
    vectors = []
    for sign in (-1.0, 1.0):
        light = 1.0 - mu + sign * root
        norm = math.sqrt(light * light + 1.0)
        pair = (light / norm, 1.0 / norm)
        vectors.append(pair[::-1] if swapped else pair)
    return tuple(vectors)


def infer_molecule_mass(omega_atom, omega_plus, omega_minus, m_atom):
    """Molecular mass from the atom's single-ion frequency and both mode frequencies.

    Uses the trace identity ``omega_plus**2 + omega_minus**2 = 2 omega_atom**2 (1 + 1/mu)``.
    """
    denominator = omega_plus**2 + omega_minus**2 - 2.0 * omega_atom**2
    if not denominator > 0:
        raise InconsistentMeasurementError(
            "omega_plus**2 + omega_minus**2 must exceed 2*omega_atom**2 "
            f"(got difference {denominator:.6g} rad^2/s^2)")
    return m_atom * 2.0 * omega_atom**2 / denominator


def lamb_dicke(spec: CrystalSpec, mode, k_effective: float) -> float:
    """Molecular Lamb-Dicke parameter on one mode for effective wave number ``k_effective``.

    For counter-propagating beams of wave number k, ``k_effective = 2*k``.
    """
    if not k_effective > 0:
        raise ValueError("k_effective must be positive")
    mode = Mode(mode)
    omega = normal_mode_frequencies(spec)[0 if mode is Mode.PLUS else 1]
    v_plus, v_minus = normal_mode_vectors(spec)
    amplitude = abs((v_plus if mode is Mode.PLUS else v_minus)[1])
    return k_effective * amplitude * math.sqrt(CONSTANTS.hbar / (2.0 * spec.m_molecule * omega))


def counter_propagating_k(wavelength: float) -> float:
    """Effective wave number 2|k| of two counter-propagating beams."""
    return 2.0 * TWO_PI / wavelength


def mode_structure(spec: CrystalSpec, k_effective: float) -> ModeStructure:
    omega_plus, omega_minus = normal_mode_frequencies(spec)
    v_plus, v_minus = normal_mode_vectors(spec)
    return ModeStructure(
        omega_plus=omega_plus,
        omega_minus=omega_minus,
        v_plus=v_plus,
        v_minus=v_minus,
        eta_plus=lamb_dicke(spec, Mode.PLUS, k_effective),
        eta_minus=lamb_dicke(spec, Mode.MINUS, k_effective),
        k_effective=k_effective,
    )


def ground_cooling_advisory(spec: CrystalSpec) -> CoolingAdvisory:
    """Flag mass ratios outside the range where ground-state cooling is demonstrated.

    Advisory only; nothing downstream refuses to run.
    """
    ratio = spec.m_atom / spec.m_molecule
    low, high = COOLING_RATIO_RANGE
    inside = low <= ratio <= high
    if inside:
        message = f"m_atom/m_molecule = {ratio:.4g} is within the demonstrated range [1/3, 2]"
    else:
        message = (f"m_atom/m_molecule = {ratio:.4g} is outside the demonstrated range [1/3, 2]; "
                   "ground-state cooling may be ineffective")
    return CoolingAdvisory(mass_ratio=ratio, within_range=inside, message=message)


class MotionalMassEstimator(BaseEstimator):
    """Estimate a molecular ion's mass from measured motional frequencies.

    Parameters
    ----------
    m_atom_amu : float
        Mass of the co-trapped atomic ion in amu.

    Each row of ``X`` is one measurement ``(omega_atom, omega_plus, omega_minus)``
    in rad/s. ``fit`` averages the per-row estimates; ``predict`` returns the
    per-row estimates in amu.
    """

    def __init__(self, m_atom_amu=23.985):
        self.m_atom_amu = m_atom_amu

    def _row_masses(self, X):
        X = check_array(X, ensure_min_features=3)
        if X.shape[1] != 3:
            raise ValueError(f"expected 3 columns (omega_atom, omega_plus, omega_minus), got {X.shape[1]}")
        return np.array([infer_molecule_mass(a, p, m, self.m_atom_amu) for a, p, m in X])

    def fit(self, X, y=None):
        masses = self._row_masses(X)
        self.mass_amu_ = float(masses.mean())
        self.mass_std_amu_ = float(masses.std(ddof=1)) if masses.size > 1 else 0.0
        self.n_measurements_ = masses.size
        return self

    def predict(self, X):
        check_is_fitted(self, "mass_amu_")
        return self._row_masses(X)

    def advisory(self):
        check_is_fitted(self, "mass_amu_")
        spec = CrystalSpec.from_amu(self.m_atom_amu, self.mass_amu_, omega_atom=1.0)
        advice = ground_cooling_advisory(spec)
        if not advice.within_range:
            warnings.warn(advice.message, stacklevel=2)
        return advice
