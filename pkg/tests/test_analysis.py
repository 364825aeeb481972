import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from qlspec.analysis import (CombDeconvolver, FitFailedError, RotationalConstantFitter, assign_and_fit,
                             candidate_transitions, deconvolute, end_to_end_recover, transition_coefficients)
from qlspec.constants import TWO_PI
from qlspec.molecule import MGH_PLUS, CombDrive, ResonanceLine, RotorModel, resonance_offsets, transition_frequency


def line_frequencies(B, D, pairs):
    a, b = transition_coefficients([p[0] for p in pairs], [p[1] for p in pairs])
    return B * a - D * b


@given(f_m=st.floats(0.5e9, 5e9))
def test_deconvolution_roundtrip(f_m, modes):
    drive = CombDrive(omega_m=TWO_PI * f_m)
    lines = resonance_offsets(MGH_PLUS, drive, modes)
    for line in lines:
        omega_mode = 0.0 if line.mode is None else modes.omega(line.mode)
        d = deconvolute([line], drive.omega_m, omega_mode)
        truth = transition_frequency(MGH_PLUS, line.J_upper, line.J_lower)
        assert d.frequencies[0] == pytest.approx(truth, rel=1e-12)


def test_deconvolution_groups_pairs_and_rejects_unknown_order():
    om, wm = TWO_PI * 1e9, TWO_PI * 1.7e6
    nu = TWO_PI * 2.28e12
    red = ResonanceLine((nu - wm) % om, N=int((nu - wm) // om), n=-1, pair_id=0, uncertainty=5e4)
    blue = ResonanceLine((nu + wm) % om, N=int((nu + wm) // om), n=1, pair_id=0, uncertainty=5e4)
    lost = ResonanceLine(0.3 * om, N=None, n=-1, pair_id=1)
    d = deconvolute([red, blue, lost], om, wm)
    assert len(d.carriers) == 1 and d.carriers[0].n_lines == 2
    assert d.frequencies[0] == pytest.approx(2.28e12, rel=1e-13)
    assert d.uncertainties[0] == pytest.approx(5e4 / np.sqrt(2))
    assert d.rejected[0][1] == "comb order N unknown"
    # Sideband lines need a mode frequency.
    assert deconvolute([red], om).rejected


def exhaustive_fit(freqs, sigma, j_max, max_relative_D=1e-3):
    """Every injective assignment, weighted lstsq, lowest chi2 then lowest J-sum."""
    cands = candidate_transitions("delta_J_2_only", j_max)
    best = None
    for choice in itertools.permutations(cands, len(freqs)):
        a, b = transition_coefficients([c[0] for c in choice], [c[1] for c in choice])
        A = np.column_stack([a, -b]) / sigma
        sol, *_ = np.linalg.lstsq(A, freqs / sigma, rcond=None)
        B, D = sol
        if not (B > 0 and abs(D) < max_relative_D * B):
            continue
        chi2 = float(np.sum((A @ sol - freqs / sigma) ** 2))
        key = (round(chi2, 6), sum(c[0] for c in choice))
        if best is None or key < best[0]:
            best = (key, B, D, list(choice))
    return best


@pytest.mark.parametrize("seed", range(20))
def test_assignment_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    j_max = 10
    cands = candidate_transitions("delta_J_2_only", j_max)
    k = 3 + seed % 2
    chosen = [cands[i] for i in sorted(rng.choice(len(cands), k, replace=False))]
    B, D = rng.uniform(5e10, 3e11), rng.uniform(1e6, 2e7)
    sigma = 2e4
    f = line_frequencies(B, D, chosen) + rng.normal(0, sigma, k)
    fit = assign_and_fit(f, sigma=sigma, j_max=j_max)
    _, B_o, D_o, assignment = exhaustive_fit(f, sigma, j_max)
    assert fit.assignments == assignment
    assert fit.B == pytest.approx(B_o, rel=1e-9)
    assert fit.D == pytest.approx(D_o, rel=1e-6, abs=1e-3)


def test_preset_lines_recover_constants():
    pairs = [(2, 0), (4, 2), (6, 4), (9, 7), (12, 10)]
    f = line_frequencies(190e9, 10e6, pairs)
    fit = assign_and_fit(f[::-1], sigma=1.0)
    assert fit.assignments == pairs[::-1]
    assert fit.B == pytest.approx(190e9, rel=1e-12) and fit.D == pytest.approx(10e6, rel=1e-9)
    assert fit.rms < 1e-3


def test_relabelling_tie_prefers_lowest_levels():
    # Without distortion, J -> 3J - 1 rescales every line by 3; both fits are exact.
    f = line_frequencies(190e9, 0.0, [(4, 2), (6, 4)])
    fit = assign_and_fit(f, sigma=1.0, j_max=30)
    assert fit.degenerate >= 1
    assert fit.assignments == [(4, 2), (6, 4)]
    assert fit.B == pytest.approx(190e9, rel=1e-12)


def test_covariance_interval_coverage():
    rng = np.random.default_rng(5)
    pairs = [(4, 2), (6, 4), (8, 6), (10, 8), (12, 10)]
    truth = line_frequencies(190e9, 10e6, pairs)
    sigma = 5e4
    cover_B = cover_D = 0
    trials = 1000
    for _ in range(trials):
        fit = assign_and_fit(truth + rng.normal(0, sigma, truth.size), sigma=sigma, j_max=20)
        cover_B += abs(fit.B - 190e9) < 1.96 * fit.B_err
        cover_D += abs(fit.D - 10e6) < 1.96 * fit.D_err
    for c in (cover_B, cover_D):
        assert 0.93 <= c / trials <= 0.97


def test_unit_weights_scale_covariance():
    rng = np.random.default_rng(0)
    f = line_frequencies(190e9, 10e6, [(4, 2), (6, 4), (8, 6), (10, 8)]) + rng.normal(0, 1e4, 4)
    fit = assign_and_fit(f, j_max=20)
    dof = 2
    assert np.allclose(fit.covariance * 0 + fit.B_err**2, fit.covariance[0, 0])
    absolute = assign_and_fit(f, sigma=1.0, j_max=20)
    assert fit.B_err**2 == pytest.approx(absolute.covariance[0, 0] * absolute.chi2 / dof, rel=1e-9)


@pytest.mark.parametrize("bad", [[2e12], [2e12, 2e12], [-1.0, 2e12], [np.nan, 2e12]])
def test_fit_failures(bad):
    with pytest.raises(FitFailedError):
        assign_and_fit(bad)


def test_no_admissible_assignment():
    with pytest.raises(FitFailedError):
        assign_and_fit([1e12, 1.0000001e12], j_max=3)


def test_end_to_end_from_exact_lines(modes):
    drive = CombDrive()
    lines = [ln for ln in resonance_offsets(MGH_PLUS, drive, modes)
             if ln.n != 0 and ln.mode is not None and ln.mode.name == "MINUS" and ln.J_upper in (4, 6, 8, 10)]
    payload = {"lines": [ResonanceLine(ln.delta_omega_o, ln.N, ln.n, None, pair_id=ln.J_upper, uncertainty=5e4)
                         for ln in lines],
               "omega_m": drive.omega_m, "omega_mode": modes.omega_minus}
    fit = end_to_end_recover(payload, truth=MGH_PLUS)
    assert abs(fit.report["B_error"]) < 1.0 and abs(fit.report["D_error"]) < 1e-3
    assert fit.assignments == [(4, 2), (6, 4), (8, 6), (10, 8)]
    with pytest.raises(FitFailedError):
        end_to_end_recover({**payload, "lines": payload["lines"][:1]})


def test_fitter_estimator():
    pairs = [(2, 0), (4, 2), (6, 4), (8, 6)]
    X = line_frequencies(190e9, 10e6, pairs).reshape(-1, 1)
    est = RotationalConstantFitter(sigma=1.0).fit(X)
    assert est.B_ == pytest.approx(190e9, rel=1e-12)
    np.testing.assert_allclose(est.predict(np.array(pairs)), X[:, 0], rtol=1e-12)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(Exception):
        RotationalConstantFitter().predict([[2, 0]])


def test_deconvolver_estimator():
    om, wm = TWO_PI * 1e9, TWO_PI * 1.7e6
    X = np.array([[0.25 * om, 2000, -1], [0.5 * om, 3000, 1], [0.1 * om, 10, 0]])
    out = CombDeconvolver(om, wm).fit_transform(X)
    expected = (X[:, 1] * om + X[:, 0] - X[:, 2] * wm) / TWO_PI
    np.testing.assert_allclose(out[:, 0], expected, rtol=1e-14)
    with pytest.raises(ValueError):
        CombDeconvolver(om, wm).fit(X).transform(np.ones((2, 4)))


def test_fit_on_alternative_selection_rule():
    model = RotorModel(B=20e9, D=1e4, selection_rule="delta_J_1_and_2", J_max=20)
    pairs = [(1, 0), (3, 1), (4, 3), (6, 4)]
    f = [transition_frequency(model, u, lo) for u, lo in pairs]
    fit = assign_and_fit(f, "delta_J_1_and_2", sigma=1.0, j_max=20)
    assert fit.B == pytest.approx(20e9, rel=1e-9)
