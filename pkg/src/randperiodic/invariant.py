"""Random invariant compact sets, their fibre sections and invariant measures.

``K(omega)`` is approximated by pullback: a grid of seed points at every
circle bin is started at time ``-T`` with noise ``theta_{-T} omega`` and
run to time 0.  Since ``T`` is a whole number of periods, every point comes
back to the bin it started in, so the result is already organised into
fibre sections ``K(omega, s)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import cdist, pdist

from .base import NoisePath
from .cocycle import CocycleSystem, advance, circle_advance

log = logging.getLogger(__name__)


def bin_centers(nbins: int) -> np.ndarray:
    return (np.arange(nbins) + 0.5) / nbins


def bin_of(s, nbins: int) -> np.ndarray:
    return np.minimum((np.asarray(s) * nbins).astype(int), nbins - 1)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    D = cdist(a, b)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


@dataclass(frozen=True)
class FibreCloud:
    """Sampled ``K(omega)``: points ``x`` in circle bins of width ``1/nbins``.

    ``s`` holds each point's exact circle coordinate.  ``convergence_gap`` is
    the per-bin Hausdorff distance between the pullbacks over ``T`` and
    ``T/2``, maximised over bins.
    """

    path: NoisePath
    nbins: int
    s: np.ndarray
    x: np.ndarray
    horizon: float = 0.0
    convergence_gap: float = 0.0
    tol_K: float = 1e-3
    accepted: bool = True

    @property
    def bin_width(self) -> float:
        return 1.0 / self.nbins

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def bin_index(self) -> np.ndarray:
        return bin_of(self.s, self.nbins)

    def bins(self) -> list[np.ndarray]:
        """Points of each bin, in bin order."""
        idx = self.bin_index
        order = np.argsort(idx, kind="stable")
        cuts = np.searchsorted(idx[order], np.arange(self.nbins + 1))
        return [self.x[order[cuts[j]:cuts[j + 1]]] for j in range(self.nbins)]

    def bin_points(self, j: int) -> np.ndarray:
        return self.x[self.bin_index == j]

    def __len__(self):
        return self.x.shape[0]


def cloud_distance(a: FibreCloud, b: FibreCloud) -> float:
    """Largest per-bin Hausdorff distance between two clouds on the same bins."""
    if a.nbins != b.nbins:
        raise ValueError("clouds use different bins")
    return max(hausdorff(p, q) for p, q in zip(a.bins(), b.bins()))


def _seed_grid(seed_box, grid: int):
    lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in seed_box)
    axes = [np.linspace(l, u, grid) for l, u in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1), float(np.linalg.norm(hi - lo))


def _pull(sys: CocycleSystem, path: NoisePath, T_periods: int, s0, x0) -> np.ndarray:
    N = sys.steps_per_period
    start = path.shift_slots(-T_periods * N)
    return advance(sys, T_periods * N, start, s0, x0).x


def pullback_attractor(
    sys: CocycleSystem,
    path: NoisePath,
    seed_box,
    grid: int = 8,
    T: float = 50.0,
    *,
    nbins: int = 256,
    tol_K: Optional[float] = None,
) -> FibreCloud:
    """Approximate ``K(omega)`` by pulling back a gridded box from time ``-T``.

    ``seed_box`` is ``(lower, upper)`` in R^d and must contain the
    absorbing region.  Even ``grid`` keeps the box centre, often an
    unstable point, out of the seeds.
    """
    T_periods = sys.steps(T) // sys.steps_per_period
    if T_periods * sys.steps_per_period != sys.steps(T) or T_periods < 2:
        raise ValueError("T must be a whole number (>= 2) of periods")
    seeds, diameter = _seed_grid(seed_box, grid)
    if seeds.shape[1] != sys.dim:
        raise ValueError("seed box dimension does not match the system")
    tol = 1e-3 * diameter if tol_K is None else tol_K

    centers = bin_centers(nbins)
    s0 = np.repeat(centers, len(seeds))
    x0 = np.tile(seeds, (nbins, 1))

    x_full = _pull(sys, path, T_periods, s0, x0)
    x_half = _pull(sys, path, T_periods // 2, s0, x0)
    full = FibreCloud(path, nbins, s0, x_full, float(T), tol_K=tol)
    half = FibreCloud(path, nbins, s0, x_half, float(T_periods // 2))
    gap = cloud_distance(full, half)
    accepted = gap <= tol
    if not accepted:
        log.warning("pullback not converged: gap %.3e > tol_K %.3e", gap, tol)
    return replace(full, convergence_gap=gap, accepted=accepted)


def evolve_cloud(sys: CocycleSystem, cloud: FibreCloud, periods: int = 1) -> FibreCloud:
    """Push a cloud at ``omega`` forward by whole periods to ``theta^k omega``."""
    N = sys.steps_per_period
    ens = advance(sys, periods * N, cloud.path, cloud.s, cloud.x)
    return replace(cloud, path=cloud.path.shift_slots(periods * N), s=ens.s, x=ens.x)


def invariance_residual(sys: CocycleSystem, cloud_prev: FibreCloud, cloud: FibreCloud) -> float:
    """Hausdorff distance between ``phi(t1, theta_{-t1} omega) K(theta_{-t1} omega)`` and ``K(omega)``."""
    periods = (cloud.path.shift_offset - cloud_prev.path.shift_offset) // sys.steps_per_period
    pushed = evolve_cloud(sys, cloud_prev, periods)
    return cloud_distance(pushed, cloud)


# --- covering numbers ------------------------------------------------------


def greedy_cover(points: np.ndarray, eps: float) -> int:
    """Size of a greedy cover by open ``eps``-balls centred at the points."""
    if len(points) == 0:
        return 0
    pts = points[np.lexsort(points.T[::-1])]
    covered = np.zeros(len(pts), dtype=bool)
    count = 0
    for i in range(len(pts)):
        if covered[i]:
            continue
        count += 1
        covered |= np.linalg.norm(pts - pts[i], axis=1) < eps
    return count


@dataclass(frozen=True)
class CoveringProfile:
    """Greedy bracket of ``N_eps`` per bin: ``lower <= N_eps <= upper``."""

    eps: float
    upper: np.ndarray
    lower: np.ndarray
    empty_bins: tuple = ()

    @property
    def counts(self) -> np.ndarray:
        return self.upper

    @property
    def max_count(self) -> int:
        return int(self.upper.max())

    @property
    def candidate_n(self) -> int:
        vals, freq = np.unique(self.upper[self.upper > 0], return_counts=True)
        return int(vals[np.argmax(freq)])


def covering_number(cloud: FibreCloud, eps: float) -> CoveringProfile:
    """Per-bin covering numbers by greedy ball cover.

    Greedy centres for radius ``2 eps`` are pairwise at least ``2 eps``
    apart, and no open ``eps``-ball holds two of them, which gives the lower
    bound.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    bins = cloud.bins()
    upper = np.array([greedy_cover(b, eps) for b in bins])
    lower = np.array([greedy_cover(b, 2 * eps) for b in bins])
    empty = tuple(int(j) for j in np.flatnonzero(upper == 0))
    if empty:
        warnings.warn(f"{len(empty)} empty fibre bins excluded from covering profile")
    return CoveringProfile(eps, upper, lower, empty)


# --- fibre cardinality ------------------------------------------------------


def cluster_labels(points: np.ndarray, gap: float) -> np.ndarray:
    """Single-linkage labels cut at distance ``gap``, numbered by lexicographic centroid order."""
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    if len(points) == 1:
        return np.zeros(1, dtype=int)
    raw = fcluster(linkage(points, method="single"), t=gap, criterion="distance")
    ids = np.unique(raw)
    cents = np.array([points[raw == k].mean(axis=0) for k in ids])
    rank = np.empty(len(ids), dtype=int)
    rank[np.lexsort(cents.T[::-1])] = np.arange(len(ids))
    return rank[np.searchsorted(ids, raw)]


def cluster_points(points: np.ndarray, gap: float) -> list[np.ndarray]:
    """Single-linkage clusters cut at distance ``gap``, ordered lexicographically by centroid."""
    labels = cluster_labels(points, gap)
    return [points[labels == k] for k in range(labels.max() + 1)] if len(points) else []


def _min_between(groups: list[np.ndarray]) -> float:
    best = np.inf
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            best = min(best, float(cdist(groups[i], groups[j]).min()))
    return best


def bin_spread(cloud: FibreCloud, gap: Optional[float] = None) -> np.ndarray:
    """Largest cluster diameter in each bin (whole-bin diameter when ``gap`` is None)."""
    out = np.zeros(cloud.nbins)
    for j, pts in enumerate(cloud.bins()):
        groups = [pts] if gap is None else cluster_points(pts, gap)
        out[j] = max((pdist(g).max() if len(g) > 1 else 0.0) for g in groups) if groups else 0.0
    return out


@dataclass(frozen=True)
class FibreCardinality:
    n: int
    c: float
    counts: np.ndarray
    flagged: tuple

    def __iter__(self):
        return iter((self.n, self.c, self.counts))


def fibre_cardinality(cloud: FibreCloud, gap_threshold: Optional[float] = None) -> FibreCardinality:
    """Count points per fibre by single-linkage clustering with cut ``gap_threshold``.

    ``n`` is the modal count, ``c`` the smallest distance between distinct
    clusters anywhere, and ``flagged`` lists bins whose count differs from
    ``n``.
    """
    gap = cloud.tol_K if gap_threshold is None else gap_threshold
    floor = 2.0 * cloud.convergence_gap
    if gap <= floor:
        raise ValueError(f"gap threshold {gap:.3e} is inside the cloud noise floor {floor:.3e}")
    counts = np.zeros(cloud.nbins, dtype=int)
    c = np.inf
    for j, pts in enumerate(cloud.bins()):
        groups = cluster_points(pts, gap)
        counts[j] = len(groups)
        if len(groups) > 1:
            c = min(c, _min_between(groups))
    vals, freq = np.unique(counts[counts > 0], return_counts=True)
    n = int(vals[np.argmax(freq)]) if len(vals) else 0
    flagged = tuple(int(j) for j in np.flatnonzero(counts != n))
    return FibreCardinality(n, float(c), counts, flagged)


# --- Krylov-Bogolyubov ------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalRandomMeasure:
    """Weighted samples ``(s, x, w)`` of the fibre measure at each path.

    ``samples[path_id] = (s, x, w)`` with weights summing to one.
    """

    samples: dict
    horizon: int
    scheme: str = "cesaro"

    def mean_distance(self, curve, path_id=None) -> float:
        """Weighted mean of ``|x - curve(s)|``; averaged over paths if ``path_id`` is None."""
        keys = list(self.samples) if path_id is None else [path_id]
        vals = []
        for key in keys:
            s, x, w = self.samples[key]
            ref = np.asarray(curve(s)).reshape(len(s), -1)
            vals.append(float(np.sum(w * np.linalg.norm(x - ref, axis=1))))
        return float(np.mean(vals))


def krylov_bogolyubov(
    sys: CocycleSystem,
    paths,
    nu0_s,
    nu0_x,
    N: int,
) -> EmpiricalRandomMeasure:
    """Cesaro average ``(1/N) sum_{n<N} Theta_n nu`` at the fibre of each path.

    The ``omega``-fibre of ``Theta_n nu`` is the image of ``nu0`` under
    ``phi(n t1, theta_{-n t1} omega)``.  All cohorts run in one forward
    sweep: the cohort for ``n`` joins at period ``-n``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if isinstance(paths, NoisePath):
        paths = [paths]
    nu0_s = np.atleast_1d(np.asarray(nu0_s, dtype=float))
    nu0_x = np.asarray(nu0_x, dtype=float).reshape(len(nu0_s), sys.dim)
    steps = sys.steps_per_period
    out = {}
    for path in paths:
        s_acc = nu0_s.copy()
        x_acc = nu0_x.copy()
        start = path.shift_slots(-(N - 1) * steps)
        for k in range(N - 1):
            x_acc = advance(sys, steps, start.shift_slots(k * steps), s_acc, x_acc).x
            s_acc = circle_advance(s_acc, steps, steps)
            s_acc = np.concatenate([s_acc, nu0_s])
            x_acc = np.concatenate([x_acc, nu0_x])
        w = np.full(len(s_acc), 1.0 / len(s_acc))
        out[path] = (s_acc, x_acc, w)
    return EmpiricalRandomMeasure(out, N)
