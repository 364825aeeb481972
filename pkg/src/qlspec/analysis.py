"""Offline pipeline: undo comb aliasing, assign rotational quantum numbers, fit B and D.

Frequencies are cyclic (Hz) throughout; comb parameters are angular (rad/s)
as elsewhere in the package.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .constants import TWO_PI
from .crystal import Mode, ModeStructure
from .molecule import SelectionRule


class FitFailedError(ValueError):
    pass


@dataclass(frozen=True)
class Carrier:
    frequency: float      # Hz
    uncertainty: float    # Hz
    pair_id: object = None
    n_lines: int = 1


@dataclass
class Deconvolution:
    carriers: list
    rejected: list = field(default_factory=list)

    @property
    def frequencies(self):
        return np.array([c.frequency for c in self.carriers])

    @property
    def uncertainties(self):
        return np.array([c.uncertainty for c in self.carriers])


@dataclass
class FitResult:
    B: float
    D: float
    B_err: float
    D_err: float
    covariance: np.ndarray
    assignments: list       # (J_upper, J_lower) per input frequency, input order
    residuals: np.ndarray   # Hz, observed - model
    chi2: float
    ambiguity: float        # chi2 gap to the best non-equivalent assignment (inf when none)
    frequencies: np.ndarray
    degenerate: int = 0     # other assignments fitting exactly as well
    report: dict = field(default_factory=dict)

    @property
    def rms(self):
        return float(np.sqrt(np.mean(self.residuals**2)))


def _omega_mode_for(line, modes, default_mode):
    if modes is None:
        return 0.0
    if isinstance(modes, ModeStructure):
        return modes.omega(line.mode if line.mode is not None else default_mode)
    return float(modes)


def deconvolute(lines, omega_m, mode_structure=None, default_mode=Mode.MINUS):
    """Absolute transition frequencies from comb-aliased lines.

    ``mode_structure`` may be a ModeStructure (the line's mode, or
    ``default_mode`` when unset, supplies the sideband frequency) or a bare
    angular mode frequency. Lines sharing a ``pair_id`` are averaged into one
    carrier. Lines with unknown N are returned in ``rejected`` with a reason.
    """
    groups = {}
    rejected = []
    for index, line in enumerate(lines):
        if line.N is None:
            rejected.append((line, "comb order N unknown"))
            continue
        omega_mode = _omega_mode_for(line, mode_structure, default_mode)
        if line.n != 0 and omega_mode == 0.0:
            rejected.append((line, "sideband line without a mode frequency"))
            continue
        f = line.absolute_frequency(omega_m, omega_mode)
        key = ("pair", line.pair_id) if line.pair_id is not None else ("single", index)
        groups.setdefault(key, []).append((f, line.uncertainty))
    carriers = []
    for key, members in groups.items():
        fs = np.array([m[0] for m in members])
        us = np.array([m[1] for m in members])
        carriers.append(Carrier(frequency=float(fs.mean()),
                                uncertainty=float(np.sqrt(np.sum(us**2)) / len(us)),
                                pair_id=key[1] if key[0] == "pair" else None, n_lines=len(members)))
    carriers.sort(key=lambda c: c.frequency)
    return Deconvolution(carriers, rejected)


def transition_coefficients(J_upper, J_lower):
    """(a, b) with f = B a - D b for J_upper -> J_lower."""
    xu = np.asarray(J_upper, float) * (np.asarray(J_upper, float) + 1)
    xl = np.asarray(J_lower, float) * (np.asarray(J_lower, float) + 1)
    return xu - xl, xu**2 - xl**2


def candidate_transitions(selection_rule, j_max):
    rule = SelectionRule(selection_rule)
    pairs = [(j, j - s) for j in range(1, j_max + 1) for s in rule.steps if j - s >= 0]
    a, _ = transition_coefficients([p[0] for p in pairs], [p[1] for p in pairs])
    return [pairs[i] for i in np.argsort(a, kind="stable")]


def _solve(f, w, a, b):
    """Weighted least squares for (B, D); returns (B, D, chi2, cov)."""
    A = np.column_stack([a, -b]) * w[:, None]
    y = f * w
    # a and b differ by orders of magnitude; equilibrate columns before solving.
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0):
        raise np.linalg.LinAlgError("empty design column")
    As = A / scale
    sol, _, rank, _ = np.linalg.lstsq(As, y, rcond=None)
    if rank < 2:
        raise np.linalg.LinAlgError("rank-deficient design")
    r = y - As @ sol
    cov = np.linalg.inv(As.T @ As) / np.outer(scale, scale)
    B, D = sol / scale
    return B, D, float(r @ r), cov


def assign_and_fit(frequencies, selection_rule=SelectionRule.DELTA_J_2_ONLY, sigma=None, j_max=60,
                   max_relative_D=1e-3):
    """Assign each frequency to a distinct allowed transition and fit ``f = B a - D b``.

    The search enumerates every ordered choice of transitions for the two
    lowest frequencies; those two fix (B, D), which places every other line
    on its nearest unused transition, and the full weighted fit then scores
    the assignment. Candidates must have B > 0 and ``|D| < max_relative_D * B``.
    Ties are broken by lower chi^2, then by lower total J.

    ``sigma`` (Hz, scalar or per line) sets absolute weights; the covariance
    is then the textbook ``(A^T W A)^-1``. Without ``sigma`` unit weights are
    used and the covariance is scaled by the residual variance.
    """
    f = np.asarray(frequencies, float).ravel()
    if f.size < 2:
        raise FitFailedError(f"need at least 2 distinct frequencies, got {f.size}")
    if not np.all(np.isfinite(f)) or np.any(f <= 0):
        raise FitFailedError("frequencies must be positive and finite")
    if np.unique(f).size < 2:
        raise FitFailedError("degenerate input: all frequencies identical")
    order = np.argsort(f, kind="stable")
    fs = f[order]
    absolute = sigma is not None
    s = np.broadcast_to(np.asarray(1.0 if sigma is None else sigma, float), f.shape)[order]
    if np.any(s <= 0):
        raise FitFailedError("sigma must be positive")
    w = 1.0 / s
    cands = candidate_transitions(selection_rule, j_max)
    ca, cb = transition_coefficients([c[0] for c in cands], [c[1] for c in cands])
    jsum = np.array([c[0] for c in cands])
    results = {}
    for i, j in itertools.combinations(range(len(cands)), 2):
        # Two equations, two unknowns: the lowest two lines pin (B, D).
        det = ca[i] * (-cb[j]) - ca[j] * (-cb[i])
        if det == 0:
            continue
        B = (fs[0] * (-cb[j]) - fs[1] * (-cb[i])) / det
        D = (ca[i] * fs[1] - ca[j] * fs[0]) / det
        if not (B > 0 and abs(D) < max_relative_D * B):
            continue
        chosen = [i, j]
        if f.size > 2:
            predicted = B * ca - D * cb
            used = {i, j}
            ok = True
            for fk in fs[2:]:
                dist = np.abs(predicted - fk)
                dist[list(used)] = np.inf
                k = int(np.argmin(dist))
                if not np.isfinite(dist[k]):
                    ok = False
                    break
                used.add(k)
                chosen.append(k)
            if not ok:
                continue
        key = tuple(chosen)
        if key in results:
            continue
        idx = np.array(chosen)
        try:
            Bf, Df, chi2, cov = _solve(fs, w, ca[idx], cb[idx])
        except np.linalg.LinAlgError:
            continue
        if not (Bf > 0 and abs(Df) < max_relative_D * Bf):
            continue
        results[key] = (chi2, int(jsum[idx].sum()), Bf, Df, cov)
    if not results:
        raise FitFailedError("no physically admissible assignment")
    # Relabelling J -> kJ - (k-1)/2 (odd k) rescales a = 4J-2 and spans the same model,
    # so such assignments tie exactly; compare chi^2 with a tolerance, then prefer lower J.
    chi2_min = min(v[0] for v in results.values())
    # Floor: chi^2 that double-precision rounding of the weighted data alone produces.
    roundoff = f.size * (64 * np.finfo(float).eps * float(np.max(np.abs(fs * w)))) ** 2
    tol = 1e-6 * max(1.0, chi2_min) + roundoff
    tied = [kv for kv in results.items() if kv[1][0] <= chi2_min + tol]
    best_key, (chi2, _, B, D, cov) = min(tied, key=lambda kv: kv[1][1])
    others = [v[0] for k, v in results.items() if v[0] > chi2_min + tol]
    ambiguity = min(others) - chi2 if others else math.inf
    dof = f.size - 2
    if not absolute:
        cov = cov * (chi2 / dof if dof > 0 else 0.0)
    idx = np.array(best_key)
    a, b = ca[idx], cb[idx]
    resid_sorted = fs - (B * a - D * b)
    assignments = [None] * f.size
    residuals = np.empty(f.size)
    for pos, k in enumerate(order):
        assignments[k] = cands[idx[pos]]
        residuals[k] = resid_sorted[pos]
    return FitResult(B=float(B), D=float(D), B_err=float(math.sqrt(max(cov[0, 0], 0.0))),
                     D_err=float(math.sqrt(max(cov[1, 1], 0.0))), covariance=cov,
                     assignments=assignments, residuals=residuals, chi2=chi2, ambiguity=float(ambiguity),
                     frequencies=f, degenerate=len(tied) - 1)


def end_to_end_recover(scan_result, selection_rule=SelectionRule.DELTA_J_2_ONLY, truth=None, j_max=60):
    """Deconvolute a finished spectrum scan and fit its rotational constants.

    ``truth`` (a RotorModel) switches on a self-test report comparing the
    fit with the configured constants.
    """
    payload = scan_result.payload if hasattr(scan_result, "payload") else scan_result
    decon = deconvolute(payload["lines"], payload["omega_m"], payload["omega_mode"])
    if len(decon.carriers) < 2:
        reasons = [r for _, r in decon.rejected]
        raise FitFailedError(f"only {len(decon.carriers)} usable line(s); rejected: {reasons or 'none found'}")
    fit = assign_and_fit(decon.frequencies, selection_rule, sigma=decon.uncertainties, j_max=j_max)
    fit.report = {"carriers": [c.frequency for c in decon.carriers], "rejected": len(decon.rejected)}
    if truth is not None:
        fit.report.update(B_true=truth.B, D_true=truth.D, B_error=fit.B - truth.B, D_error=fit.D - truth.D)
    return fit


class RotationalConstantFitter(BaseEstimator):
    """Estimator wrapper around :func:`assign_and_fit`.

    ``fit(X)`` takes carrier frequencies in Hz (shape ``(n,)`` or ``(n, 1)``);
    ``predict(X)`` maps rows of ``(J_upper, J_lower)`` to model frequencies.
    """

    def __init__(self, selection_rule="delta_J_2_only", sigma=None, j_max=60):
        self.selection_rule = selection_rule
        self.sigma = sigma
        self.j_max = j_max

    def fit(self, X, y=None):
        X = check_array(np.asarray(X, float).reshape(-1, 1), ensure_min_samples=2)
        result = assign_and_fit(X[:, 0], self.selection_rule, self.sigma, self.j_max)
        self.B_, self.D_ = result.B, result.D
        self.cov_ = result.covariance
        self.assignment_ = result.assignments
        self.residuals_ = result.residuals
        self.ambiguity_ = result.ambiguity
        self.result_ = result
        return self

    def predict(self, X):
        check_is_fitted(self, "B_")
        X = check_array(X, ensure_min_features=2)
        a, b = transition_coefficients(X[:, 0], X[:, 1])
        return self.B_ * a - self.D_ * b


class CombDeconvolver(TransformerMixin, BaseEstimator):
    """Rows ``(delta_omega_o, N, n)`` -> absolute transition frequency in Hz."""

    def __init__(self, omega_m=TWO_PI * 1e9, omega_mode=0.0):
        self.omega_m = omega_m
        self.omega_mode = omega_mode

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=3)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, ensure_min_features=3)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        delta, N, n = X[:, 0], X[:, 1], X[:, 2]
        return ((N * self.omega_m + delta - n * self.omega_mode) / TWO_PI).reshape(-1, 1)
