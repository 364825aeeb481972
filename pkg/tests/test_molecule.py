import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from qlspec.constants import CONSTANTS, TWO_PI
from qlspec.molecule import (GENERIC_DIPOLE, MGH_PLUS, CombDrive, ForbiddenTransitionError, InvalidDetuningError,
                             RotorModel, SelectionRule, ThermalEnvironment, UnsupportedOrderError, allowed_pairs,
                             carrier_rabi_rate, comb_decompose, level_energy, required_j_max, resonance_offsets,
                             sideband_rabi_rate, thermal_distribution, transition_frequency)


def boltzmann_oracle(B, D, T, j_max):
    w = []
    for J in range(j_max + 1):
        x = J * (J + 1)
        w.append((2 * J + 1) * math.exp(-CONSTANTS.h * (B * x - D * x * x) / (CONSTANTS.k_B * T)))
    total = math.fsum(w)
    return np.array([v / total for v in w])


def test_level_energy_closed_form():
    for J in range(MGH_PLUS.J_max + 1):
        x = J * (J + 1)
        assert level_energy(MGH_PLUS, J) == 190e9 * x - 10e6 * x * x
    with pytest.raises(ValueError):
        level_energy(MGH_PLUS, MGH_PLUS.J_max + 1)


def test_selection_rules():
    assert all(u - l == 2 for u, l in allowed_pairs(MGH_PLUS))
    both = RotorModel(B=10e9, selection_rule="delta_J_1_and_2")
    assert {u - l for u, l in allowed_pairs(both)} == {1, 2}
    with pytest.raises(ForbiddenTransitionError):
        transition_frequency(MGH_PLUS, 3, 2)
    with pytest.raises(ValueError):
        transition_frequency(MGH_PLUS, 2, 4)


def test_model_validation():
    with pytest.raises(ValueError):
        RotorModel(B=-1)
    with pytest.raises(ValueError):
        RotorModel(B=1e9, D=2e6)
    with pytest.raises(ValueError):
        RotorModel(B=1e9, D=1e5, J_max=80)  # centrifugal expansion turns over


@given(st.floats(1e9, 1e12), st.floats(0, 1e-5), st.floats(4.0, 1000.0))
def test_thermal_distribution_oracle(B, d_rel, T):
    model = RotorModel(B=B, D=d_rel * B, J_max=20)
    assume(2 * model.D * 20 * 21 < B)
    p = thermal_distribution(model, ThermalEnvironment(T))
    np.testing.assert_allclose(p, boltzmann_oracle(B, model.D, T, 20), rtol=1e-9, atol=1e-300)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_mgh_thermal_anchor():
    p = thermal_distribution(MGH_PLUS, ThermalEnvironment())
    assert int(np.argmax(p)) == 4
    assert p[4] == pytest.approx(0.14, abs=0.01)
    assert int((p > 0.01).sum()) in (11, 12)


def test_required_j_max_tail():
    j = required_j_max(190e9, 10e6, 300.0, tail=1e-6)
    p = boltzmann_oracle(190e9, 10e6, 300.0, j + 30)
    assert p[j + 1:].sum() < 1e-6 <= p[j:].sum()


@given(st.floats(0, 1e15), st.floats(1e6, 1e11))
def test_comb_decompose(nu, omega_m):
    N, delta = comb_decompose(nu, omega_m)
    assert 0 <= delta < omega_m
    assert N * omega_m + delta == pytest.approx(nu, rel=1e-12, abs=1e-6)


def test_resonance_offsets_bruteforce(modes, drive):
    lines = resonance_offsets(MGH_PLUS, drive, modes)
    pairs = allowed_pairs(MGH_PLUS)
    assert len(lines) == len(pairs) * 5  # carrier once, +-1 on two modes
    for line in lines:
        omega_t = TWO_PI * transition_frequency(MGH_PLUS, line.J_upper, line.J_lower)
        omega_mode = 0.0 if line.mode is None else modes.omega(line.mode)
        assert 0 <= line.delta_omega_o < drive.omega_m
        assert line.N * drive.omega_m + line.delta_omega_o == pytest.approx(omega_t + line.n * omega_mode,
                                                                               rel=1e-13)
        assert line.absolute_frequency(drive.omega_m, omega_mode) == pytest.approx(omega_t / TWO_PI, rel=1e-13)
    carriers = [ln for ln in lines if ln.n == 0]
    assert len(carriers) == len(pairs) and all(ln.mode is None for ln in carriers)


def test_resonance_offsets_span_warning(modes):
    narrow = CombDrive(span=3e12)
    with pytest.warns(UserWarning, match="comb span"):
        lines = resonance_offsets(MGH_PLUS, narrow, modes)
    assert all(transition_frequency(MGH_PLUS, ln.J_upper, ln.J_lower) <= 3e12 for ln in lines)


def field_oracle(power, waist):
    intensity = 2 * power / (math.pi * waist**2)  # Gaussian peak
    return math.sqrt(2 * intensity / (CONSTANTS.c * CONSTANTS.epsilon_0))


def test_carrier_rate_oracle(drive):
    d = GENERIC_DIPOLE.dipole_moment * CONSTANTS.e * CONSTANTS.a_0
    delta = TWO_PI * CONSTANTS.c * (1 / 400e-9 - 1 / 800e-9)
    expected = (d * field_oracle(1.0, 20e-6) / CONSTANTS.hbar) ** 2 / (4 * delta)
    assert carrier_rabi_rate(GENERIC_DIPOLE, drive) == pytest.approx(expected, rel=1e-12)


def test_carrier_rate_anchors(drive):
    assert carrier_rabi_rate(GENERIC_DIPOLE, drive) == pytest.approx(824e3, rel=0.03)
    assert carrier_rabi_rate(MGH_PLUS, drive) == pytest.approx(1.1e6, rel=0.05)


def test_carrier_rate_scales_with_power(drive):
    lo = carrier_rabi_rate(MGH_PLUS, CombDrive(power_per_comb=0.5))
    assert carrier_rabi_rate(MGH_PLUS, drive) == pytest.approx(2 * lo, rel=1e-12)


def test_blue_comb_rejected():
    with pytest.raises(InvalidDetuningError):
        carrier_rabi_rate(MGH_PLUS, CombDrive(center_wavelength=200e-9))


def test_sideband_rate():
    assert sideband_rabi_rate(1e6, 0.1, 0) == 1e6
    assert sideband_rabi_rate(1e6, 0.1, -1) == pytest.approx(1e5)
    assert sideband_rabi_rate(1e6, 0.1, 2) == pytest.approx(1e4)
    with pytest.raises(UnsupportedOrderError):
        sideband_rabi_rate(1e6, 0.1, 3)


def test_drive_validation():
    with pytest.raises(ValueError):
        CombDrive(omega_m=0)
    with pytest.raises(ValueError):
        CombDrive(power_per_comb=-1)
    assert CombDrive(delta_omega_o=TWO_PI * 1.5e9).delta_omega_o == pytest.approx(TWO_PI * 0.5e9)


def test_environment_validation():
    with pytest.raises(ValueError):
        ThermalEnvironment(temperature=0)
    with pytest.raises(ValueError):
        ThermalEnvironment(rethermalization_time=0)
    ThermalEnvironment(rethermalization_time=math.inf)


def test_no_warnings_for_preset(modes, drive):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        resonance_offsets(MGH_PLUS, drive, modes)
    assert SelectionRule("delta_J_2_only").steps == (2,)
