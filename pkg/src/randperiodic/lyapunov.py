"""Lyapunov spectra, extremal exponents and semiuniform growth bounds.

``Phi_n(omega, s, x) = log ||D_x phi(n t1, omega, s, x)||`` with ``n`` in
periods.  Estimators here are finite-sample surrogates: the sup over
invariant measures on ``K`` becomes a max over a sampled cloud, and the
adjusted random variable ``C`` becomes the minimal constant that fits the
observed data.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .base import NoisePath
from .cocycle import (
    BlowUpError,
    CocycleSystem,
    CylinderState,
    SubadditiveRecord,
    advance,
    circle_advance,
    log_spectral_norms,
    phi_profile,
)
from .invariant import FibreCloud

log = logging.getLogger(__name__)

DEFAULT_N_GRID = tuple(2 ** k for k in range(4, 11))
DEFAULT_K_MAX = 2 ** 10


class DegenerateSpectrumWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LyapunovEstimate:
    """Exponents per unit time, sorted non-increasing, with per-path values."""

    exponents: np.ndarray
    stderr: np.ndarray
    per_path: np.ndarray
    n_steps: int
    qr_stride: int
    log_det_rate: float = 0.0

    @property
    def top(self) -> float:
        return float(self.exponents[0])

    def to_dict(self) -> dict:
        return {
            "exponents": self.exponents.tolist(),
            "stderr": self.stderr.tolist(),
            "n_steps": self.n_steps,
            "qr_stride": self.qr_stride,
        }


def _stderr(per_path: np.ndarray, blocks: Optional[np.ndarray]) -> np.ndarray:
    if per_path.shape[0] >= 2:
        return per_path.std(axis=0, ddof=1) / math.sqrt(per_path.shape[0])
    # one path: batch means over time blocks
    return blocks.std(axis=0, ddof=1) / math.sqrt(blocks.shape[0])


def estimate_spectrum(
    sys: CocycleSystem,
    paths,
    z,
    n_steps: int,
    qr_stride: int = 10,
    *,
    check_pre: bool = True,
) -> LyapunovEstimate:
    """Lyapunov spectrum by repeated QR of the tangent flow.

    ``paths`` is one noise path or a list; ``z`` a CylinderState or one per
    path.  ``n_steps`` and ``qr_stride`` count grid steps.  Exponents are
    averaged over paths.
    """
    if isinstance(paths, NoisePath):
        paths = [paths]
    paths = list(paths)
    P = len(paths)
    zs = [z] * P if isinstance(z, CylinderState) else list(z)
    if len(zs) != P:
        raise ValueError("need one initial state per path")
    if qr_stride < 1:
        raise ValueError("qr_stride must be >= 1")
    if check_pre and n_steps < 100 * qr_stride:
        raise ValueError("n_steps must be at least 100 * qr_stride")
    for p in paths:
        sys.check_path(p)

    d = sys.dim
    N = sys.steps_per_period
    s0 = np.array([zz.s for zz in zs])
    x = np.array([zz.x for zz in zs], dtype=float).reshape(P, d)
    Q = np.broadcast_to(np.eye(d), (P, d, d)).copy()
    acc = np.zeros((P, d))
    nblocks = 10
    block_len = max(n_steps // nblocks, 1)
    block_acc = np.zeros((nblocks, d))
    logdet = np.zeros(P)
    s_cur = s0.copy()
    chunk = 2048
    done = 0
    while done < n_steps:
        count = min(chunk, n_steps - done)
        dw_all = np.stack([p.increments(done, count) for p in paths], axis=1)
        for j in range(count):
            k = done + j
            s_next = circle_advance(s0, k + 1, N)
            x, J = sys.step(s_cur, s_next, x, dw_all[j], True)
            s_cur = s_next
            Q = np.matmul(J, Q)
            if (k + 1) % qr_stride == 0 or k + 1 == n_steps:
                Q, R = np.linalg.qr(Q)
                diag = np.diagonal(R, axis1=1, axis2=2)
                sign = np.sign(diag)
                sign[sign == 0] = 1.0
                Q = Q * sign[:, None, :]
                with np.errstate(divide="ignore"):
                    lg = np.log(np.abs(diag))
                acc += lg
                logdet += lg.sum(axis=1)
                b = min(k // block_len, nblocks - 1)
                block_acc[b] += lg.mean(axis=0)
            if not np.all(np.isfinite(x)) or np.abs(x).max() > sys.escape_radius:
                raise BlowUpError(k + 1, sys.escape_radius, float(np.abs(x).max()))
        done += count

    T = n_steps * sys.h
    per_path = acc / T
    # R diagonals come out roughly ordered; sort each path to be safe
    per_path = -np.sort(-per_path, axis=1)
    exps = per_path.mean(axis=0)
    blocks = block_acc / (block_len * sys.h)
    err = _stderr(per_path, -np.sort(-blocks, axis=1))
    order = np.argsort(-exps, kind="stable")
    exps, err = exps[order], err[order]
    if d >= 2 and abs(exps[0] - exps[1]) <= 2 * math.hypot(err[0], err[1]):
        warnings.warn(
            "top two exponents are within two standard errors; splitting is not resolved",
            DegenerateSpectrumWarning,
        )
    return LyapunovEstimate(exps, err, per_path, n_steps, qr_stride, float(logdet.mean() / T))


# --- extremal exponent ------------------------------------------------------


def cloud_sample(cloud: FibreCloud, per_bin: Optional[int] = None, bins: Optional[int] = None):
    """Up to ``per_bin`` points from each of ``bins`` evenly spaced bins."""
    chosen = np.arange(cloud.nbins)
    if bins is not None and bins < cloud.nbins:
        chosen = np.unique(np.linspace(0, cloud.nbins - 1, bins).round().astype(int))
    idx = cloud.bin_index
    keep = []
    for j in chosen:
        rows = np.flatnonzero(idx == j)
        if per_bin is not None and len(rows) > per_bin:
            rows = rows[np.linspace(0, len(rows) - 1, per_bin).round().astype(int)]
        keep.append(rows)
    keep = np.concatenate(keep) if keep else np.zeros(0, dtype=int)
    return cloud.s[keep], cloud.x[keep]


def _as_clouds(clouds) -> list:
    return [clouds] if isinstance(clouds, FibreCloud) else list(clouds)


def _profiles(sys, clouds, n_grid, per_bin, bins):
    """``Phi_n`` on every sampled point of every cloud; list of (len(n_grid), P_i)."""
    rows_s, rows_x, rows_p, sizes = [], [], [], []
    for cl in clouds:
        s, x = cloud_sample(cl, per_bin, bins)
        if len(s) == 0:
            raise ValueError("cloud has no points")
        rows_s.append(s)
        rows_x.append(x)
        rows_p.extend([cl.path] * len(s))
        sizes.append(len(s))
    prof = phi_profile(sys, n_grid, rows_p, np.concatenate(rows_s), np.concatenate(rows_x))
    cuts = np.cumsum([0] + sizes)
    return [prof[:, cuts[i]:cuts[i + 1]] for i in range(len(clouds))], rows_s, rows_x


@dataclass(frozen=True)
class ExtremalEstimate:
    """``inf_n (1/n) mean_omega max_K Phi_n`` with the per-n sequence."""

    value: float
    n_grid: tuple
    rates: np.ndarray
    stderr: np.ndarray
    non_monotone: tuple = ()

    def __float__(self):
        return self.value


def extremal_exponent(
    sys: CocycleSystem,
    clouds,
    n_grid: Sequence[int] = DEFAULT_N_GRID,
    *,
    per_bin: Optional[int] = None,
    bins: Optional[int] = None,
) -> ExtremalEstimate:
    """Empirical ``inf_n (1/n) E max_{x in K} Phi_n`` over the given clouds (one per path).

    Subadditivity makes the rate non-increasing along a doubling grid;
    increases beyond two standard errors are flagged.
    """
    clouds = _as_clouds(clouds)
    grid = tuple(sorted(int(n) for n in n_grid))
    profs, _, _ = _profiles(sys, clouds, grid, per_bin, bins)
    maxima = np.array([p.max(axis=1) for p in profs])  # (paths, n)
    n = np.array(grid, dtype=float)
    rates_all = maxima / n
    rates = rates_all.mean(axis=0)
    err = rates_all.std(axis=0, ddof=1) / math.sqrt(len(clouds)) if len(clouds) > 1 else np.zeros(len(grid))
    flags = []
    for i in range(1, len(grid)):
        noise = 2 * math.hypot(err[i], err[i - 1]) + 1e-12
        if rates[i] > rates[i - 1] + noise:
            flags.append(grid[i])
    if flags:
        log.warning("extremal rate increases at n=%s; n_grid may be too small", flags)
    return ExtremalEstimate(float(rates.min()), grid, rates, err, tuple(flags))


# --- semiuniform bound ------------------------------------------------------


def semiuniform_records(
    sys: CocycleSystem,
    clouds,
    n_grid: Sequence[int] = DEFAULT_N_GRID,
    *,
    per_bin: Optional[int] = None,
    bins: Optional[int] = None,
) -> list[SubadditiveRecord]:
    """``Phi_n`` records for sampled cloud points; ``path_id`` is the cloud's path."""
    clouds = _as_clouds(clouds)
    grid = tuple(sorted(int(n) for n in n_grid))
    profs, ss, xs = _profiles(sys, clouds, grid, per_bin, bins)
    out = []
    for cl, prof, s, x in zip(clouds, profs, ss, xs):
        states = [CylinderState(si, xi) for si, xi in zip(s, x)]
        for i, n in enumerate(grid):
            for j, z in enumerate(states):
                out.append(SubadditiveRecord(n, float(prof[i, j]), z, cl.path))
    return out


@dataclass(frozen=True)
class SemiuniformReport:
    """Outcome of fitting ``Phi_n <= C(omega) + n lambda'``.

    ``C_estimates`` is the max-deficit over all tested ``n``, so the bound
    holds on every record by construction.  The test is the holdout:
    ``C_fit`` uses only the smaller half of the ``n`` values, and
    ``violations`` are records at larger ``n`` that exceed it.
    """

    lam: float
    lambda_prime: float
    C_estimates: dict
    C_fit: dict
    N_estimates: dict
    violations: list
    adjustedness_slope: Optional[float] = None
    adjustedness_pvalue: Optional[float] = None
    adjusted: bool = True
    vacuous: bool = False
    slack: float = 1e-8
    notes: tuple = ()

    @property
    def passed(self) -> bool:
        return not self.violations and self.adjusted

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "lambda_prime": self.lambda_prime,
            "C": [float(v) for v in self.C_estimates.values()],
            "N": [None if v is None else int(v) for v in self.N_estimates.values()],
            "violations": [
                {"path": _path_label(p), "s": z.s, "x": z.x.tolist(), "n": n, "value": v}
                for p, z, n, v in self.violations
            ],
            "adjustedness_slope": self.adjustedness_slope,
            "vacuous": self.vacuous,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def _path_label(p):
    if isinstance(p, NoisePath):
        return f"{p.seed}@{p.shift_offset}"
    return str(p)


def _shift_of(path_id) -> Optional[float]:
    if isinstance(path_id, NoisePath):
        return path_id.shift_offset * path_id.grid_step
    return None


def fit_adjusted_variable(
    records: Sequence[SubadditiveRecord],
    lambda_prime: float,
    lam: float = 0.0,
    *,
    slack: float = 1e-8,
) -> SemiuniformReport:
    """Fit the adjusted random variable ``C(omega)`` per path and test the bound.

    ``lam`` is the target rate ``lambda`` with ``lambda' < lambda``; it sets
    ``delta = (lambda - lambda')/2`` for the eventual-rate estimate ``N``.
    """
    if not lambda_prime < lam:
        raise ValueError("need lambda_prime < lambda")
    by_path: dict = {}
    for r in records:
        by_path.setdefault(r.path_id, []).append(r)
    delta = (lam - lambda_prime) / 2
    C_all, C_fit, N_est, violations = {}, {}, {}, []
    for pid, recs in by_path.items():
        ns = sorted({r.n for r in recs})
        fit_ns = set(ns[: max(1, (len(ns) + 1) // 2)])
        deficit = np.array([r.value - r.n * lambda_prime for r in recs])
        C_all[pid] = max(0.0, float(deficit.max()))
        fit = max(0.0, max(dv for r, dv in zip(recs, deficit) if r.n in fit_ns))
        C_fit[pid] = fit
        for r, dv in zip(recs, deficit):
            if r.n not in fit_ns and dv > fit + slack:
                violations.append((pid, r.state, r.n, r.value))
        # smallest tested N with Phi_n / n <= lam - delta for all n >= N
        worst = {n: max(r.value for r in recs if r.n == n) / n for n in ns}
        N = None
        for n in reversed(ns):
            if worst[n] <= lam - delta:
                N = n
            else:
                break
        N_est[pid] = N

    slope = pval = None
    adjusted = True
    shifts = [_shift_of(p) for p in C_all]
    if all(t is not None for t in shifts) and len(set(shifts)) >= 3:
        c_vals = np.array(list(C_all.values()))
        mag = np.abs(np.array(shifts, dtype=float))
        if np.ptp(c_vals) == 0:
            slope, pval = 0.0, 1.0
        else:
            res = stats.linregress(mag, c_vals)
            slope, pval = float(res.slope), float(res.pvalue)
        adjusted = not (pval < 0.05 and slope > 0)
    notes = []
    vacuous = lambda_prime >= 0
    if vacuous:
        notes.append("lambda' >= 0: bound is vacuous for a contracting system")
    if not adjusted:
        notes.append("C grows with shift magnitude; lambda' is too tight")
    return SemiuniformReport(
        lam, lambda_prime, C_all, C_fit, N_est, violations, slope, pval, adjusted, vacuous, slack, tuple(notes)
    )


# --- contraction certificate ------------------------------------------------


@dataclass(frozen=True)
class ContractionReport:
    passed: bool
    worst_margin: float
    first_failure: Optional[int]
    k_grid: tuple
    margins: np.ndarray
    points: int
    c: float
    delta: float
    r: float

    def __bool__(self):
        return self.passed


def ball_samples(centers: np.ndarray, r: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points uniform in the r-ball around each centre, shape (len(centers)*count, d)."""
    d = centers.shape[1]
    g = rng.standard_normal((len(centers), count, d))
    g /= np.linalg.norm(g, axis=2, keepdims=True)
    rad = r * rng.random((len(centers), count, 1)) ** (1.0 / d)
    return (centers[:, None, :] + g * rad).reshape(-1, d)


def contraction_certificate(
    sys: CocycleSystem,
    cloud: FibreCloud,
    r: float,
    c: float,
    delta: float,
    *,
    k_max: int = DEFAULT_K_MAX,
    per_bin: int = 50,
    bins: Optional[int] = None,
    seed: int = 0,
    atol: float = 1e-10,
) -> ContractionReport:
    """Check ``||D_x phi(k)|| <= c exp(-delta k)`` on the r-neighbourhood of the cloud.

    Each sampled bin contributes ``per_bin`` points drawn uniformly from the
    r-balls around its cloud points.  ``k`` runs over powers of two up to
    ``k_max`` periods.
    """
    if r <= 0 or c <= 0:
        raise ValueError("r and c must be positive")
    rng = np.random.default_rng(seed)
    chosen = np.arange(cloud.nbins)
    if bins is not None and bins < cloud.nbins:
        chosen = np.unique(np.linspace(0, cloud.nbins - 1, bins).round().astype(int))
    idx = cloud.bin_index
    s_rows, x_rows = [], []
    for j in chosen:
        rows = np.flatnonzero(idx == j)
        if len(rows) == 0:
            continue
        pick = rows[rng.integers(0, len(rows), per_bin)]
        x_rows.append(ball_samples(cloud.x[pick], r, 1, rng))
        s_rows.append(cloud.s[pick])
    s0, x0 = np.concatenate(s_rows), np.concatenate(x_rows)
    k_grid = tuple(2 ** i for i in range(int(math.log2(k_max)) + 1))
    N = sys.steps_per_period
    wanted = {k * N: i for i, k in enumerate(k_grid)}
    margins = np.full(len(k_grid), np.nan)

    def record(step, ens):
        i = wanted.get(step)
        if i is None:
            return
        phi = log_spectral_norms(ens.jac, ens.log_scale)
        margins[i] = float((math.log(c) - delta * k_grid[i] - phi).min())
        if margins[i] < -atol:
            raise _EnvelopeBroken

    try:
        advance(sys, k_grid[-1] * N, cloud.path, s0, x0, jacobian=True, observe=record, observe_every=N)
    except _EnvelopeBroken:
        pass
    done = margins[~np.isnan(margins)]
    failing = np.flatnonzero(done < -atol)
    first = int(k_grid[failing[0]]) if len(failing) else None
    return ContractionReport(
        first is None, float(done.min()), first, k_grid, margins, len(s0), c, delta, r
    )


class _EnvelopeBroken(Exception):
    pass
