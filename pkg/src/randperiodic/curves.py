"""Random periodic curves: strip graphs, stitching, winding periods.

The cloud is cut into ``M`` overlapping strips.  Inside a strip, per-bin
clusters are chained into continuous branches.  Consecutive strips are
matched on their overlap, and composing the matches once around the circle
gives a permutation of branch labels (label at ``s`` to label at ``s+1``).
Each cycle of that permutation is one closed curve, and its length is the
curve's winding period.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cocycle import CocycleSystem, advance
from .invariant import FibreCloud, bin_spread, cluster_points, hausdorff

log = logging.getLogger(__name__)


class ExtractionError(RuntimeError):
    pass


class AmbiguousContinuationError(ExtractionError):
    def __init__(self, strip: int, bin_index: int, distances):
        self.strip = strip
        self.bin_index = bin_index
        self.distances = tuple(float(d) for d in distances)
        super().__init__(
            f"ambiguous continuation in strip {strip} at bin {bin_index}: candidates at {self.distances}"
        )


class StitchingError(ExtractionError):
    def __init__(self, strip: int, distances):
        self.strip = strip
        self.distances = np.asarray(distances)
        super().__init__(f"no unique overlap match between strips {strip} and {strip + 1}")


# --- strips -----------------------------------------------------------------


@dataclass(frozen=True)
class StripGraphs:
    """Branches of one strip, sampled at its bins.

    ``bins`` are lifted bin indices (may be negative for the first strip);
    ``branches`` has shape (d, len(bins), dim).  ``modulus`` is the largest
    deviation of a branch from its slope-extrapolated prediction and
    ``jumps`` the largest raw adjacent-bin step, both per branch.
    """

    index: int
    bins: np.ndarray
    nbins: int
    branches: np.ndarray
    modulus: np.ndarray
    jumps: np.ndarray
    merged_bins: tuple = ()

    @property
    def count(self) -> int:
        return self.branches.shape[0]

    @property
    def interval(self) -> tuple:
        return (self.bins[0] / self.nbins, (self.bins[-1] + 1) / self.nbins)

    def at(self, lifted_bins) -> np.ndarray:
        """Branch values at the given lifted bins, shape (d, k, dim)."""
        pos = np.searchsorted(self.bins, lifted_bins)
        return self.branches[:, pos]


def _centroids(points: np.ndarray, gap: float) -> np.ndarray:
    return np.array([g.mean(axis=0) for g in cluster_points(points, gap)]).reshape(-1, points.shape[1])


def _chain(cents, order, d, threshold, strip):
    """Continue ``d`` branches through the bins in ``order`` (positions into ``cents``)."""
    dim = cents[order[0]].shape[1]
    vals = {order[0]: cents[order[0]]}
    modulus = np.zeros(d)
    jumps = np.zeros(d)
    merged = []
    prev2 = None
    prev = cents[order[0]]
    for pos in order[1:]:
        cand = cents[pos]
        pred = prev if prev2 is None else 2 * prev - prev2
        cost = np.linalg.norm(pred[:, None, :] - cand[None, :, :], axis=2)
        if len(cand) == d:
            rows, cols = linear_sum_assignment(cost)
            nxt = cand[cols[np.argsort(rows)]]
            if prev2 is not None:
                for i in range(d):
                    near = np.flatnonzero(cost[i] <= threshold)
                    if len(near) > 1:
                        raise AmbiguousContinuationError(strip, pos, cost[i][near])
        else:
            # touching branches share a cluster
            merged.append(pos)
            nxt = cand[np.argmin(cost, axis=1)]
        if prev2 is not None:
            modulus = np.maximum(modulus, np.linalg.norm(nxt - pred, axis=1))
        jumps = np.maximum(jumps, np.linalg.norm(nxt - prev, axis=1))
        prev2, prev = prev, nxt
        vals[pos] = nxt
    return vals, modulus, jumps, merged


def default_jump_threshold(cloud: FibreCloud, gap: float) -> float:
    return max(10.0 * float(bin_spread(cloud, gap).max()), cloud.tol_K)


def default_tol_match(strips: Sequence[StripGraphs]) -> float:
    return 4.0 * max(float(s.modulus.max()) for s in strips) + 1e-9


def extract_strip_graphs(
    cloud: FibreCloud,
    M: int = 8,
    *,
    gap: Optional[float] = None,
    jump_threshold: Optional[float] = None,
) -> list[StripGraphs]:
    """Chain per-bin clusters into branches inside each of ``M`` overlapping strips.

    Strip ``m`` spans bins ``[(m-1)B, (m+1)B)`` with ``B = nbins / M``.
    Chaining starts at the strip bin whose clusters are best separated and
    runs outwards in both directions, predicting each next point by linear
    extrapolation.  A branch whose prediction error exceeds
    ``jump_threshold`` is a continuity failure.
    """
    nb = cloud.nbins
    if M < 3:
        raise ValueError("need at least 3 strips")
    if nb % M or nb // M < 2:
        raise ValueError("each strip core must be a whole number (>= 2) of bins")
    if not cloud.accepted:
        raise ExtractionError("cloud is not accepted")
    gap = cloud.tol_K if gap is None else gap
    thr = default_jump_threshold(cloud, gap) if jump_threshold is None else jump_threshold
    B = nb // M
    per_bin = cloud.bins()
    cents_all = [_centroids(p, gap) if len(p) else np.zeros((0, cloud.dim)) for p in per_bin]

    strips = []
    for m in range(M):
        lifted = np.arange((m - 1) * B, (m + 1) * B)
        cents = [cents_all[j % nb] for j in lifted]
        counts = np.array([len(c) for c in cents])
        if np.any(counts == 0):
            raise ExtractionError(f"strip {m} has empty bins")
        vals, freq = np.unique(counts, return_counts=True)
        d = int(vals[np.argmax(freq)])
        if counts.max() > d:
            raise ExtractionError(f"strip {m}: bin {int(lifted[np.argmax(counts)])} has {counts.max()} clusters, expected {d}")
        sep = np.array([_min_sep(c) if len(c) == d else -1.0 for c in cents])
        start = int(np.argmax(sep))
        fwd, mod_f, jmp_f, mg_f = _chain(cents, list(range(start, len(lifted))), d, thr, m)
        bwd, mod_b, jmp_b, mg_b = _chain(cents, list(range(start, -1, -1)), d, thr, m)
        branches = np.empty((d, len(lifted), cloud.dim))
        for pos, v in {**bwd, **fwd}.items():
            branches[:, pos] = v
        modulus = np.maximum(mod_f, mod_b)
        if np.any(modulus > thr):
            raise ExtractionError(f"strip {m}: continuity modulus {modulus.max():.3e} exceeds {thr:.3e}")
        merged = tuple(int(lifted[p]) for p in sorted(set(mg_f + mg_b)))
        strips.append(StripGraphs(m, lifted, nb, branches, modulus, np.maximum(jmp_f, jmp_b), merged))

    counts = {s.count for s in strips}
    if len(counts) != 1:
        raise ExtractionError(f"branch count differs between strips: {sorted(counts)}")
    return strips


def _min_sep(c: np.ndarray) -> float:
    if len(c) < 2:
        return np.inf
    D = np.linalg.norm(c[:, None] - c[None, :], axis=2)
    return float(D[np.triu_indices(len(c), 1)].min())


# --- stitching --------------------------------------------------------------


@dataclass(frozen=True)
class Stitching:
    """Label permutation and lifted branches.

    ``perm[i]`` is the strip-0 label reached from label ``i`` after one
    revolution in the stitching direction.  ``lifts[i]`` holds the values of
    label ``i`` at every bin over one revolution, shape (d, nbins, dim).
    """

    perm: tuple
    lifts: np.ndarray
    match_distances: np.ndarray
    direction: str = "forward"


def _match(a: np.ndarray, b: np.ndarray, tol: float, strip: int) -> np.ndarray:
    """Unique assignment of branches ``a`` to ``b`` by sup distance on the overlap."""
    cost = np.abs(a[:, None] - b[None, :]).max(axis=(2, 3))
    rows, cols = linear_sum_assignment(cost)
    assign = cols[np.argsort(rows)]
    best = cost[np.arange(len(a)), assign]
    if np.any(best > tol):
        raise StitchingError(strip, cost)
    for i in range(len(a)):
        if np.sum(cost[i] <= tol) > 1:
            raise StitchingError(strip, cost)
    return assign


def stitch_and_lift(
    strips: Sequence[StripGraphs],
    tol_match: Optional[float] = None,
    direction: str = "forward",
) -> Stitching:
    """Match branches across strip overlaps and compose the matches around the circle."""
    M = len(strips)
    d = strips[0].count
    if any(s.count != d for s in strips):
        raise ExtractionError("strips disagree on branch count")
    nb = strips[0].nbins
    B = nb // M
    if tol_match is None:
        tol_match = default_tol_match(strips)
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be forward or backward")

    dim = strips[0].branches.shape[2]
    lifts = np.empty((d, nb, dim))
    dist = np.zeros(M)
    label = np.arange(d)  # current label in strip m for each starting label
    if direction == "forward":
        seq = list(range(M))
        for m in seq:
            core = np.arange(m * B, (m + 1) * B)
            lifts[:, core] = strips[m].at(core)[label]
            nxt = strips[(m + 1) % M]
            a = strips[m].at(core)
            b = nxt.at(core if m + 1 < M else core - nb)
            assign = _match(a, b, tol_match, m)
            dist[m] = np.abs(a - b[assign]).max() if d else 0.0
            label = assign[label]
    else:
        for step, m in enumerate([0] + list(range(M - 1, 0, -1))):
            # overlap of strip m with the strip below it is strip m's first core
            core = np.arange((m - 1) * B, m * B)
            prev = strips[(m - 1) % M]
            a = strips[m].at(core)
            b = prev.at(core if m > 0 else core + nb)
            lifts[:, core % nb] = a[label]
            assign = _match(a, b, tol_match, (m - 1) % M)
            dist[step] = np.abs(a - b[assign]).max() if d else 0.0
            label = assign[label]
    return Stitching(tuple(int(v) for v in label), lifts, dist, direction)


def decompose_periods(perm: Sequence[int]) -> list[tuple[tuple, int]]:
    """Cycle decomposition: ``[(cycle, length), ...]`` ordered by smallest label."""
    perm = list(perm)
    if sorted(perm) != list(range(len(perm))):
        raise ValueError("not a permutation")
    seen = [False] * len(perm)
    out = []
    for i in range(len(perm)):
        if seen[i]:
            continue
        cyc = []
        j = i
        while not seen[j]:
            seen[j] = True
            cyc.append(j)
            j = perm[j]
        out.append((tuple(cyc), len(cyc)))
    return out


def cycle_notation(perm: Sequence[int]) -> str:
    """1-based cycle notation, fixed points included, e.g. ``(1 2)(3)``."""
    return "".join("(" + " ".join(str(i + 1) for i in c) + ")" for c, _ in decompose_periods(perm))


# --- curve sets -------------------------------------------------------------


@dataclass(frozen=True)
class PeriodicCurve:
    """One closed curve on its lift: ``x[l * nbins + j]`` is the value at ``s = l + (j + 0.5)/nbins``."""

    labels: tuple
    tau: int
    nbins: int
    x: np.ndarray

    @property
    def s(self) -> np.ndarray:
        return (np.arange(self.tau * self.nbins) + 0.5) / self.nbins

    def laps(self) -> np.ndarray:
        return self.x.reshape(self.tau, self.nbins, -1)

    def __call__(self, s) -> np.ndarray:
        """Piecewise-linear evaluation on the lift, periodic with period ``tau``."""
        s = np.asarray(s, dtype=float)
        grid = np.concatenate([self.s - self.tau, self.s, self.s + self.tau])
        vals = np.concatenate([self.x, self.x, self.x])
        u = np.mod(s, self.tau)
        return np.stack([np.interp(u, grid, vals[:, k]) for k in range(self.x.shape[1])], axis=-1)

    def periodicity_residual(self) -> float:
        """``max |phi(s + tau) - phi(s)|`` over the samples; zero up to rounding by construction."""
        x = self(self.s + self.tau)
        return float(np.abs(x - self.x).max())


@dataclass(frozen=True)
class PeriodicCurveSet:
    curves: tuple
    perm: tuple
    nbins: int
    path: object = None
    tol_K: float = 1e-3
    strips: int = 0
    merged_bins: tuple = ()
    gap: Optional[float] = None
    jump_threshold: Optional[float] = None
    tol_match: Optional[float] = None

    @property
    def n(self) -> int:
        return len(self.curves)

    @property
    def periods(self) -> list[int]:
        return [c.tau for c in self.curves]

    @property
    def label_count(self) -> int:
        return len(self.perm)

    @property
    def permutation(self) -> str:
        return cycle_notation(self.perm)

    def fibre_points(self) -> list[np.ndarray]:
        """Points of all curves over each bin."""
        laps = [c.laps() for c in self.curves]
        return [np.concatenate([l[:, j] for l in laps]) for j in range(self.nbins)]

    def reconstruction_distance(self, cloud: FibreCloud) -> float:
        pts = self.fibre_points()
        return max(hausdorff(p, q) for p, q in zip(pts, cloud.bins()))

    def rows(self):
        """CSV rows ``(curve_id, s_lift, x_1..x_d)``."""
        for i, c in enumerate(self.curves):
            for s, x in zip(c.s, c.x):
                yield (i, float(s), *map(float, x))

    def summary(self) -> dict:
        return {"n": self.n, "periods": self.periods, "permutation": self.permutation}


def extract_curves(
    cloud: FibreCloud,
    M: int = 8,
    *,
    gap: Optional[float] = None,
    jump_threshold: Optional[float] = None,
    tol_match: Optional[float] = None,
) -> PeriodicCurveSet:
    gap = cloud.tol_K if gap is None else gap
    if jump_threshold is None:
        jump_threshold = default_jump_threshold(cloud, gap)
    strips = extract_strip_graphs(cloud, M, gap=gap, jump_threshold=jump_threshold)
    if tol_match is None:
        tol_match = default_tol_match(strips)
    st = stitch_and_lift(strips, tol_match)
    curves = []
    for cyc, tau in decompose_periods(st.perm):
        x = np.concatenate([st.lifts[lab] for lab in cyc])
        curves.append(PeriodicCurve(cyc, tau, cloud.nbins, x))
    merged = tuple(sorted({b % cloud.nbins for s in strips for b in s.merged_bins}))
    return PeriodicCurveSet(
        tuple(curves), st.perm, cloud.nbins, cloud.path, cloud.tol_K, M, merged, gap, jump_threshold, tol_match
    )


# --- verification -----------------------------------------------------------


def curve_distance(a: PeriodicCurve, b: PeriodicCurve) -> float:
    """Sup distance between two curves, minimised over lap offsets; inf if periods differ."""
    if a.tau != b.tau or a.nbins != b.nbins:
        return np.inf
    la, lb = a.laps(), b.laps()
    return min(float(np.abs(la - np.roll(lb, -r, axis=0)).max()) for r in range(a.tau))


def graph_distance(a: PeriodicCurve, b: PeriodicCurve) -> float:
    """Per-bin Hausdorff distance between the point sets of two curves."""
    la, lb = a.laps(), b.laps()
    return max(hausdorff(la[:, j], lb[:, j]) for j in range(a.nbins))


def match_curves(a: Sequence[PeriodicCurve], b: Sequence[PeriodicCurve], metric=graph_distance):
    """Minimal-cost assignment of curves ``a[i] -> b[j]``; returns (assignment, costs)."""
    cost = np.array([[metric(x, y) for y in b] for x in a])
    finite = np.where(np.isfinite(cost), cost, 1e300)
    rows, cols = linear_sum_assignment(finite)
    assign = cols[np.argsort(rows)]
    return assign, cost[np.arange(len(a)), assign]


@dataclass(frozen=True)
class PeriodicityReport:
    passed: bool
    k: int
    n: int
    periods: list
    residuals: list
    tol_period: float
    s_exact: bool
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "periods": list(self.periods),
            "residuals": [float(r) for r in self.residuals],
            "k": self.k,
            "tol_period": self.tol_period,
            "s_exact": self.s_exact,
            "pass": self.passed,
            "message": self.message,
        }


def verify_random_periodicity(
    sys: CocycleSystem,
    curves: PeriodicCurveSet,
    curves_prev: PeriodicCurveSet,
    k: int = 1,
    tol_period: Optional[float] = None,
) -> PeriodicityReport:
    """Push the curves at ``theta_{-k t1} omega`` forward ``k`` periods and compare with those at ``omega``."""
    tol = 5.0 * curves.tol_K if tol_period is None else tol_period
    if curves.n != curves_prev.n:
        return PeriodicityReport(
            False, k, curves.n, curves.periods, [], tol, False,
            f"curve count changed: {curves_prev.n} at the earlier base point, {curves.n} now",
        )
    N = sys.steps_per_period
    if curves_prev.path is not None and curves.path is not None:
        if curves.path.shift_offset - curves_prev.path.shift_offset != k * N:
            raise ValueError("curves_prev must sit k periods before curves")
    s0 = np.concatenate([c.s % 1.0 for c in curves_prev.curves])
    x0 = np.concatenate([c.x for c in curves_prev.curves])
    ens = advance(sys, k * N, curves_prev.path, s0, x0)
    s_exact = bool(np.array_equal(ens.s, s0))
    pushed, pos = [], 0
    for c in curves_prev.curves:
        m = len(c.x)
        pushed.append(PeriodicCurve(c.labels, c.tau, c.nbins, ens.x[pos:pos + m]))
        pos += m
    _, costs = match_curves(pushed, curves.curves, curve_distance)
    residuals = [float(v) for v in costs]
    ok = s_exact and all(r <= tol for r in residuals)
    return PeriodicityReport(ok, k, curves.n, curves.periods, residuals, tol, s_exact)


@dataclass(frozen=True)
class ShiftInvarianceReport:
    passed: bool
    periods_a: list
    periods_b: list
    mismatched: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def verify_period_shift_invariance(a: PeriodicCurveSet, b: PeriodicCurveSet) -> ShiftInvarianceReport:
    """Period multisets agree and curves matched by graph distance have equal periods."""
    pa, pb = sorted(a.periods), sorted(b.periods)
    if pa != pb:
        return ShiftInvarianceReport(False, pa, pb, [("multiset", pa, pb)])
    assign, _ = match_curves(a.curves, b.curves)
    bad = [(i, a.curves[i].tau, b.curves[j].tau) for i, j in enumerate(assign) if a.curves[i].tau != b.curves[j].tau]
    return ShiftInvarianceReport(not bad, pa, pb, bad)
