"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""
import math
import time

import numpy as np

from qlspec.analysis import end_to_end_recover
from qlspec.cli import main
from qlspec.constants import TWO_PI
from qlspec.crystal import CrystalSpec, infer_molecule_mass, normal_mode_frequencies
from qlspec.dynamics import NoiseModel, PulseSpec, SystemState, apply_raman_pulse
from qlspec.molecule import (GENERIC_DIPOLE, MGH_PLUS, ResonanceLine, RotorModel, carrier_rabi_rate,
                             sideband_rabi_rate, thermal_distribution)
from qlspec.protocols import LineBook, ProtocolConfig, infer_comb_order, measure_transition_rate, qnd_readout, \
    spectrum_scan

from conftest import FROZEN


def within(x, target, rel=None, abs_=None):
    tol = abs_ if abs_ is not None else rel * abs(target)
    return abs(x - target) <= tol


def test_criterion_01_mode_frequencies(spec, criterion):
    f = sorted(w / TWO_PI / 1e6 for w in normal_mode_frequencies(spec))
    ok = within(f[0], 0.99, abs_=0.01) and within(f[1], 1.72, abs_=0.01)
    criterion(1, ok, f"modes {f[0]:.4f}, {f[1]:.4f} MHz vs {{0.99, 1.72}} +-0.01")
    assert ok


def test_criterion_02_mass_roundtrip(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        mu = rng.uniform(1, 50)
        m_atom = rng.uniform(1, 200)
        spec = CrystalSpec.from_amu(m_atom, mu * m_atom, rng.uniform(1e5, 1e7))
        wp, wm = normal_mode_frequencies(spec)
        m = infer_molecule_mass(spec.omega_atom, wp, wm, spec.m_atom)
        worst = max(worst, abs(m / spec.m_molecule - 1))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt < 1.0
    criterion(2, ok, f"worst relative error {worst:.2e} over 1000 specs in {dt:.2f} s")
    assert ok


def test_criterion_03_lamb_dicke(modes, criterion):
    low, high = modes.eta_minus, modes.eta_plus  # 0.99 MHz and 1.72 MHz modes
    ok = within(low, 0.16, abs_=0.01) and within(high, 0.13, abs_=0.01)
    criterion(3, ok, f"eta {low:.4f} (0.99 MHz, want 0.16) and {high:.4f} (1.72 MHz, want 0.13), +-0.01")
    assert ok


def test_criterion_04_raman_rates(drive, modes, criterion):
    generic = carrier_rabi_rate(GENERIC_DIPOLE, drive)
    f0 = carrier_rabi_rate(MGH_PLUS, drive)
    sb_low = sideband_rabi_rate(f0, modes.eta_minus, -1)
    sb_high = sideband_rabi_rate(f0, modes.eta_plus, -1)
    checks = [within(generic, 824e3, rel=0.03), within(f0, 1.1e6, rel=0.05),
              within(sb_low, 174e3, rel=0.05), within(sb_high, 137e3, rel=0.05)]
    criterion(4, all(checks), f"f0 generic {generic / 1e3:.1f} kHz, MgH+ {f0 / 1e6:.4f} MHz, "
                              f"sidebands {sb_low / 1e3:.1f} / {sb_high / 1e3:.1f} kHz "
                              f"(want 824, 1.1, 174, 137) -> {['ok' if c else 'out' for c in checks]}")
    assert all(checks)


def test_criterion_05_thermal(env, criterion):
    p = thermal_distribution(MGH_PLUS, env)
    J = int(np.argmax(p))
    count = int((p > 0.01).sum())
    ok = J == 4 and within(p[J], 0.14, abs_=0.01) and count in (11, 12)
    criterion(5, ok, f"max p={p[J]:.4f} at J={J}; {count} levels above 1 %")
    assert ok


def test_criterion_06_one_way_invariant(make_engine, book, criterion):
    # Random red-sideband pulse trains from n=0. Raising J needs a quantum to remove.
    # Durations of at least a pi-time keep the Fourier window (<= 350 kHz) inside the
    # 0.99 MHz mode spacing; shorter pulses are not sideband-resolved and reach the carrier.
    physics = make_engine(seed=0, env=FROZEN).physics
    rng = np.random.default_rng(6)
    pairs = [(u, u - 2) for u in range(2, MGH_PLUS.J_max + 1)]
    reds = np.array([book.red(u, lo) for u, lo in pairs])
    t_pi = book.pi_time()
    sequences, violations, raised_with_quantum, lowered = 100_000, 0, 0, 0
    t0 = time.perf_counter()
    for _ in range(sequences):
        state = SystemState(J=physics.sample_J(rng))
        for _ in range(3):
            # Half the pulses target a line of the current level so that events actually happen.
            if rng.random() < 0.5 and state.J >= 2:
                x = book.red(state.J, state.J - 2)
            elif rng.random() < 0.5 and state.J + 2 <= MGH_PLUS.J_max:
                x = book.red(state.J + 2, state.J)
            else:
                x = reds[rng.integers(len(reds))]
            n_before, J_before = state.n_motion, state.J
            state, rec = apply_raman_pulse(state, PulseSpec(x, t_pi * rng.uniform(1.0, 3.0)), physics, rng)
            if rec.outcome and state.J > J_before:
                if n_before == 0:
                    violations += 1
                else:
                    raised_with_quantum += 1
            lowered += rec.outcome and state.J < J_before
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 10.0 and lowered > 0 and raised_with_quantum > 0
    criterion(6, ok, f"{violations} raising events from n=0 in {sequences} sequences "
                     f"({lowered} lowerings, {raised_with_quantum} raisings that used a quantum), {dt:.1f} s")
    assert ok


def test_criterion_07_qnd_amplification(make_engine, frozen_book, criterion):
    trials = 100_000
    engine = make_engine(seed=7, env=FROZEN, noise=NoiseModel())
    app = engine.apparatus()
    cfg = ProtocolConfig(qnd_repetitions=15)
    correct = 0
    t0 = time.perf_counter()
    for _ in range(trials):
        engine.pin(engine.physics.sample_J(engine.rng))  # fresh thermal draw
        verdict = qnd_readout(app, frozen_book, cfg, 4).payload["verdict"]
        correct += verdict == (engine.state.J == 4)
    dt = time.perf_counter() - t0
    accuracy = correct / trials
    ok = accuracy >= 0.999 and dt < 60
    criterion(7, ok, f"accuracy {accuracy:.5f} over {trials} trials at single-shot 0.8, 15 cycles, {dt:.1f} s")
    assert ok


def test_criterion_08_rate_recovery(make_engine, book, modes, criterion):
    truth = 174e3
    out = []
    t0 = time.perf_counter()
    for noise, tol in ((NoiseModel.ideal(), 0.02), (NoiseModel(), 0.05)):
        e = make_engine(seed=8, initial_J=4, noise=noise, carrier_rate=truth / modes.eta_minus)
        r = measure_transition_rate(e.apparatus(), book, ProtocolConfig(), (4, 2))
        rate = r.payload.get("rate", math.nan)
        out.append((r.success and within(rate, truth, rel=tol), rate, tol))
    dt = time.perf_counter() - t0
    ok = all(o[0] for o in out) and dt < 60
    criterion(8, ok, "; ".join(f"{rate / 1e3:.2f} kHz (+-{tol:.0%})" for _, rate, tol in out)
              + f" vs 174 kHz, {dt:.1f} s")
    assert ok


def test_criterion_09_comb_order(make_engine, modes, drive, criterion):
    fm = modes.omega_minus / TWO_PI
    cfg = ProtocolConfig()
    assert cfg.dither_ladder[-1] == 1e-3
    got = {}
    t0 = time.perf_counter()
    for N in (1, 10, 100, 1000, 10000):
        # A rotor whose 2 -> 0 red line sits at comb order N, offset 0.35 omega_m.
        model = RotorModel(B=(N * 1e9 + 0.35e9 + fm) / 6, D=0.0, J_max=4)
        e = make_engine(seed=N, initial_J=2, env=FROZEN, model=model, carrier_rate=1.1e6)
        delta = (TWO_PI * 6 * model.B - modes.omega_minus) % drive.omega_m
        got[N] = infer_comb_order(e.apparatus(), cfg, ResonanceLine(delta, n=-1), upper=True)
    dt = time.perf_counter() - t0
    ok = all(k == v for k, v in got.items()) and dt < 10
    criterion(9, ok, f"inferred {got} in {dt:.2f} s")
    assert ok


def test_criterion_10_end_to_end(make_engine, modes, drive, criterion):
    t0 = time.perf_counter()
    e = make_engine(seed=0)  # thermal start, ideal detection, default rethermalization
    scan = spectrum_scan(e.apparatus(), ProtocolConfig())
    fit = end_to_end_recover(scan, truth=MGH_PLUS)
    wall = time.perf_counter() - t0
    sim = e.clock
    dB, dD = fit.report["B_error"], fit.report["D_error"]
    # Every recovered carrier is a real transition of the hidden molecule.
    book = LineBook(MGH_PLUS, drive, modes)
    true_f = {pair: book.omega(*pair) / TWO_PI for pair in fit.assignments}
    genuine = all(abs(f - true_f[a]) < 2e5 for f, a in zip(fit.report["carriers"], fit.assignments))
    ok = (abs(dB) <= 50e3 and abs(dD) <= 1e6 and within(sim, 1e4, rel=0.2) and wall < 600 and genuine
          and not scan.partial)
    criterion(10, ok, f"{len(fit.assignments)} lines, B error {dB:+.0f} Hz, D error {dD:+.2f} Hz, "
                      f"{sim:.0f} s simulated ({sim / 3600:.2f} h), {wall:.1f} s wall")
    assert ok


def test_criterion_11_determinism(tmp_path, criterion, capsys):
    t0 = time.perf_counter()
    logs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["run", "--config", "mgh_qnd", "--seed", "11", "--trials", "50", "--out", str(out)]) == 0
        logs.append((out / "events.jsonl").read_bytes())
    replay_code = main(["replay", str(tmp_path / "a" / "manifest.json")])
    dt = time.perf_counter() - t0
    capsys.readouterr()
    ok = logs[0] == logs[1] and len(logs[0]) > 0 and replay_code == 0
    criterion(11, ok, f"event logs identical ({len(logs[0])} bytes), replay exit {replay_code}, {dt:.1f} s")
    assert ok
