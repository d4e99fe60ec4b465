"""Cocycle engine on the cylinder S^1 x R^d.

The system is advanced on a fixed time grid of ``steps_per_period`` steps
per circle revolution ``period`` (t_1).  The circle coordinate is never
integrated: after ``k`` steps from ``s0`` it is ``(s0 + k/N) mod 1``,
evaluated with a single rounding, so it cannot drift.

All time counts ``n`` passed to :func:`jacobian_product`, :func:`phi_n` and
friends are in periods, i.e. steps of the discrete reduction.  The
ensemble routines work in grid steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .base import NoisePath, slots_for

StepFn = Callable[..., tuple]
Paths = Union[NoisePath, Sequence[NoisePath]]

_RESCALE_HI = 1e200
_RESCALE_LO = 1e-200


class BlowUpError(RuntimeError):
    """State left the escape ball; the system is not dissipative here."""

    def __init__(self, step: int, radius: float, norm: float):
        self.step = step
        self.radius = radius
        self.norm = norm
        super().__init__(f"|x| = {norm:.3e} exceeded escape radius {radius:.3e} at step {step}")


class CylinderState:
    """A point ``(s, x)`` with ``s`` reduced into [0, 1)."""

    __slots__ = ("s", "x")

    def __init__(self, s: float, x):
        s = float(s) % 1.0
        if s == 1.0:  # -tiny % 1.0 rounds up
            s = 0.0
        x = np.array(x, dtype=float).reshape(-1)
        x.flags.writeable = False
        self.s = s
        self.x = x

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    def __eq__(self, other):
        if not isinstance(other, CylinderState):
            return NotImplemented
        return self.s == other.s and np.array_equal(self.x, other.x)

    __hash__ = None

    def __repr__(self):
        return f"CylinderState(s={self.s!r}, x={self.x.tolist()!r})"


def circle_advance(s0, k: int, steps_per_period: int):
    """``(s0 + k/N) mod 1`` with one rounding.

    Bit-exact against the rational result whenever ``k/N`` is exactly
    representable, in particular for power-of-two ``N``.
    """
    r = int(k) % steps_per_period
    s0 = np.asarray(s0, dtype=float)
    if r == 0:
        return s0.copy() if s0.ndim else float(s0)
    off = r / steps_per_period
    c = 1.0 - off
    out = np.where(s0 >= c, s0 - c, s0 + off)
    out = np.where(out >= 1.0, 0.0, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class CocycleSystem:
    """A C^1 random dynamical system on S^1 x R^d, realised on a grid.

    ``step(s, s_next, x, dw, jacobian)`` advances an ensemble by one grid
    step: ``s``, ``s_next`` have shape (P,), ``x`` (P, d), ``dw`` (P, m).  It
    returns ``(x_next, J)`` with ``J`` of shape (P, d, d) or ``None`` when
    ``jacobian`` is false.  ``J`` must be the exact derivative of the step
    in ``x``.
    """

    dim: int
    noise_dim: int
    steps_per_period: int
    step: StepFn
    period: float = 1.0
    escape_radius: float = 1e6
    name: str = ""
    order: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.steps_per_period < 1:
            raise ValueError("steps_per_period must be >= 1")

    @property
    def h(self) -> float:
        return self.period / self.steps_per_period

    def tol_cocycle(self, n_steps: int) -> float:
        """Cocycle-law slack: 10 x (local error h^(order+1)) x steps."""
        return 10.0 * self.h ** (self.order + 1) * max(int(n_steps), 1)

    def noise(self, seed: int) -> NoisePath:
        return NoisePath(seed, self.h, self.noise_dim)

    def check_path(self, path: NoisePath) -> None:
        if path.dimension != self.noise_dim:
            raise ValueError(
                f"noise dimension {path.dimension} does not match system ({self.noise_dim})"
            )
        if not math.isclose(path.grid_step, self.h, rel_tol=1e-12):
            raise ValueError(f"noise grid {path.grid_step} does not match step {self.h}")

    def steps(self, t: float) -> int:
        """Grid steps in time ``t`` (must be grid aligned)."""
        return slots_for(t, self.h)


@dataclass
class Ensemble:
    """Result of advancing many points: circle positions, states, tangent products.

    The true Jacobian of row ``p`` is ``exp(log_scale[p]) * jac[p]``.
    """

    s: np.ndarray
    x: np.ndarray
    jac: Optional[np.ndarray] = None
    log_scale: Optional[np.ndarray] = None


def _as_rows(paths: Paths, n: int):
    if isinstance(paths, NoisePath):
        return [paths], None
    paths = list(paths)
    if len(paths) != n:
        raise ValueError("need one path per ensemble row")
    unique: dict = {}
    idx = np.array([unique.setdefault(p, len(unique)) for p in paths])
    return list(unique), idx


def advance(
    sys: CocycleSystem,
    n_steps: int,
    paths: Paths,
    s0,
    x0,
    *,
    jacobian: bool = False,
    start_step: int = 0,
    observe: Optional[Callable[[int, Ensemble], None]] = None,
    observe_every: int = 0,
    chunk: int = 2048,
) -> Ensemble:
    """Advance an ensemble by ``n_steps`` grid steps.

    Row ``p`` starts at ``(s0[p], x0[p])`` and is driven by ``paths[p]`` (or
    by the single shared ``paths``).  Time origin is grid slot
    ``start_step`` of each path.  ``observe(k, ensemble)`` is called after
    every ``observe_every`` steps, ``k`` counting steps taken so far; the
    ensemble it receives is live and must not be kept.
    """
    x = np.array(x0, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, sys.dim)
    npts = x.shape[0]
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), (npts,)).copy()
    uniq, idx = _as_rows(paths, npts)
    for p in uniq:
        sys.check_path(p)

    N = sys.steps_per_period
    eye = np.eye(sys.dim)
    M = np.broadcast_to(eye, (npts, sys.dim, sys.dim)).copy() if jacobian else None
    log_scale = np.zeros(npts) if jacobian else None
    ens = Ensemble(s0.copy(), x, M, log_scale)
    if observe is not None and observe_every:
        observe(0, ens)

    s_cur = s0.copy()
    radius = sys.escape_radius
    done = 0
    while done < n_steps:
        count = min(chunk, n_steps - done)
        block = np.stack([p.increments(start_step + done, count) for p in uniq], axis=1)
        for j in range(count):
            k = done + j
            s_next = circle_advance(s0, k + 1, N)
            dw = block[j, 0][None, :] if idx is None else block[j, idx]
            x, J = sys.step(s_cur, s_next, x, dw, jacobian)
            if jacobian:
                M = np.matmul(J, M)
                if (k + 1) % 10 == 0:
                    M, log_scale = _rescale(M, log_scale)
            s_cur = s_next
            if (k + 1) % 16 == 0 or k + 1 == n_steps:
                _check_escape(x, radius, k + 1)
            if observe is not None and observe_every and (k + 1) % observe_every == 0:
                ens.s, ens.x, ens.jac, ens.log_scale = s_cur, x, M, log_scale
                observe(k + 1, ens)
        done += count
    if jacobian:
        M, log_scale = _rescale(M, log_scale)
    return Ensemble(s_cur, x, M, log_scale)


def _check_escape(x: np.ndarray, radius: float, step: int) -> None:
    norms = np.sqrt(np.einsum("pd,pd->p", x, x))
    worst = float(np.max(norms)) if norms.size else 0.0
    if not np.isfinite(worst) or worst > radius:
        raise BlowUpError(step, radius, worst)


def _rescale(M: np.ndarray, log_scale: np.ndarray):
    mag = np.abs(M).reshape(M.shape[0], -1).max(axis=1)
    bad = (mag > _RESCALE_HI) | ((mag < _RESCALE_LO) & (mag > 0))
    if np.any(bad):
        M = M.copy()
        M[bad] /= mag[bad, None, None]
        log_scale = log_scale + np.where(bad, np.log(np.where(bad, mag, 1.0)), 0.0)
    return M, log_scale


# --- single-orbit API -------------------------------------------------------


def evolve(sys: CocycleSystem, t: float, path: NoisePath, z: CylinderState) -> CylinderState:
    """``H(t, omega, s, x)`` projected to the cylinder: ``(s + t/t1 mod 1, phi(t, omega, s, x))``."""
    n = sys.steps(t)
    if n < 0:
        raise ValueError("evolve only runs forward in time")
    if n == 0:
        return z
    ens = advance(sys, n, path, [z.s], z.x[None, :])
    return CylinderState(ens.s[0], ens.x[0])


def trajectory(sys: CocycleSystem, t: float, path: NoisePath, z: CylinderState, every: int = 1):
    """Sampled orbit as an array of rows ``(t, s, x_1 .. x_d)``."""
    rows = []

    def record(k, ens):
        rows.append(np.concatenate([[k * sys.h, ens.s[0]], ens.x[0]]))

    advance(sys, sys.steps(t), path, [z.s], z.x[None, :], observe=record, observe_every=every)
    return np.array(rows)


@dataclass(frozen=True)
class JacobianProduct:
    """``D_x phi(n, omega, s, x) = exp(log_scale) * matrix``.

    ``log_scaled`` is true when the partial products had to be rescaled to
    stay inside floating-point range; ``dense()`` is then unreliable and the
    pair should be used directly.
    """

    matrix: np.ndarray
    log_scale: float = 0.0

    @property
    def log_scaled(self) -> bool:
        return self.log_scale != 0.0

    def dense(self) -> np.ndarray:
        return math.exp(self.log_scale) * self.matrix

    def log_norm(self) -> float:
        return float(np.log(np.linalg.norm(self.matrix, 2)) + self.log_scale)


def jacobian_product(sys: CocycleSystem, n: int, path: NoisePath, z: CylinderState) -> JacobianProduct:
    """Ordered product of one-period Jacobians along the orbit of ``z``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return JacobianProduct(np.eye(sys.dim))
    ens = advance(sys, n * sys.steps_per_period, path, [z.s], z.x[None, :], jacobian=True)
    return JacobianProduct(ens.jac[0], float(ens.log_scale[0]))


@dataclass(frozen=True)
class SubadditiveRecord:
    """One value ``Phi_n(omega, s, x) = log ||D_x phi(n, omega, s, x)||_2``."""

    n: int
    value: float
    state: CylinderState
    path_id: object = None


def log_spectral_norms(jac: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    sv = np.linalg.svd(jac, compute_uv=False)[:, 0]
    with np.errstate(divide="ignore"):
        return np.log(sv) + log_scale


def phi_n(sys: CocycleSystem, n: int, path: NoisePath, z: CylinderState, path_id=None) -> SubadditiveRecord:
    if n < 1:
        raise ValueError("n must be >= 1")
    value = jacobian_product(sys, n, path, z).log_norm()
    return SubadditiveRecord(n, value, z, path_id if path_id is not None else path)


def phi_profile(
    sys: CocycleSystem,
    n_grid: Sequence[int],
    paths: Paths,
    s0,
    x0,
) -> np.ndarray:
    """``Phi_n`` for every ``n`` in ``n_grid`` (periods) and every row, in one pass.

    Returns an array of shape (len(n_grid), P).
    """
    grid = sorted(set(int(n) for n in n_grid))
    if grid[0] < 1:
        raise ValueError("n must be >= 1")
    N = sys.steps_per_period
    wanted = {n * N: i for i, n in enumerate(grid)}
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    out = np.empty((len(grid), x0.shape[0]))

    def record(k, ens):
        i = wanted.get(k)
        if i is not None:
            out[i] = log_spectral_norms(ens.jac, ens.log_scale)

    advance(sys, grid[-1] * N, paths, s0, x0, jacobian=True, observe=record, observe_every=N)
    order = [grid.index(int(n)) for n in n_grid]
    return out[order]


# --- discrete reduction -----------------------------------------------------


@dataclass(frozen=True)
class DiscreteSystem:
    """``H-hat``: the system sampled once per circle revolution.

    One step advances by ``t1`` and shifts the base by ``theta_{t1}``.
    """

    system: CocycleSystem

    @property
    def period(self) -> float:
        return self.system.period

    def theta(self, path: NoisePath, k: int = 1) -> NoisePath:
        return path.shift_slots(k * self.system.steps_per_period)

    def step(self, path: NoisePath, z: CylinderState):
        return self.iterate(1, path, z)

    def iterate(self, n: int, path: NoisePath, z: CylinderState):
        """``H-hat^n(omega, z)`` as ``(theta-hat^n omega, z')``."""
        znew = evolve(self.system, n * self.period, path, z)
        return self.theta(path, n), znew


def discrete_reduction(sys: CocycleSystem) -> DiscreteSystem:
    return DiscreteSystem(sys)
