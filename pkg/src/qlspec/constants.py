"""Physical constants (CODATA 2018, SI units) used throughout the package."""
from dataclasses import dataclass

import scipy.constants as _sc


@dataclass(frozen=True)
class Constants:
    hbar: float = _sc.hbar
    h: float = _sc.h
    k_B: float = _sc.k
    e: float = _sc.e
    a_0: float = _sc.physical_constants["Bohr radius"][0]
    c: float = _sc.c
    epsilon_0: float = _sc.epsilon_0
    amu: float = _sc.atomic_mass


CONSTANTS = Constants()

TWO_PI = 2.0 * _sc.pi
