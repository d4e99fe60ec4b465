"""Time-periodic SDEs autonomised on the cylinder, and a zoo of test models.

A drift ``F(s, x)`` and diffusion ``G(s, x)`` that are 1-periodic in ``s``
define ``dx = F(s, x) dt + G(s, x) dW`` with ``ds = dt / t1``.  The period
is normalised to ``t1 = 1``; a physical period is absorbed by rescaling
``F`` and ``G``.

All model functions are vectorised: ``s`` has shape (P,), ``x`` (P, d) and
the returns are ``F`` (P, d), ``DF`` (P, d, d), ``G`` (P, d, m) and
``DG`` (P, d, m, d) with ``DG[p, i, j, k] = dG_ij / dx_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

from .base import BaseFlow, NoisePath
from .cocycle import CocycleSystem, CylinderState, circle_advance

TWO_PI = 2.0 * math.pi

INTEGRATORS = {"euler_maruyama": "ito", "heun_stratonovich": "stratonovich"}


@dataclass(frozen=True)
class SdeSpec:
    drift: Callable
    drift_jacobian: Callable
    diffusion: Callable
    diffusion_jacobian: Callable
    dim: int
    noise_dim: int
    interpretation: str = "stratonovich"
    integrator: str = "heun_stratonovich"
    steps_per_period: int = 256
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if INTEGRATORS[self.integrator] != self.interpretation:
            raise ValueError(
                f"{self.integrator} integrates {INTEGRATORS[self.integrator]} equations, "
                f"not {self.interpretation}"
            )

    @property
    def h(self) -> float:
        return 1.0 / self.steps_per_period


class NumericalError(FloatingPointError):
    """Drift or diffusion produced NaN/Inf."""


def _finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite value in {name}")


def _gdw(G, DG, dw, jacobian):
    gdw = np.einsum("pim,pm->pi", G, dw)
    dgdw = np.einsum("pimk,pm->pik", DG, dw) if jacobian else None
    return gdw, dgdw


def euler_maruyama_step(spec: SdeSpec, s, s_next, x, dw, jacobian):
    h = spec.h
    F = spec.drift(s, x)
    G = spec.diffusion(s, x)
    _finite(spec.name or "model", F, G)
    DG = spec.diffusion_jacobian(s, x) if jacobian else None
    gdw, dgdw = _gdw(G, DG, dw, jacobian)
    x_new = x + F * h + gdw
    if not jacobian:
        return x_new, None
    J = np.eye(spec.dim) + spec.drift_jacobian(s, x) * h + dgdw
    return x_new, J


def heun_step(spec: SdeSpec, s, s_next, x, dw, jacobian):
    """Stratonovich Heun predictor-corrector and its exact x-derivative."""
    h = spec.h
    F0 = spec.drift(s, x)
    G0 = spec.diffusion(s, x)
    _finite(spec.name or "model", F0, G0)
    DG0 = spec.diffusion_jacobian(s, x) if jacobian else None
    g0, dg0 = _gdw(G0, DG0, dw, jacobian)
    xt = x + F0 * h + g0

    F1 = spec.drift(s_next, xt)
    G1 = spec.diffusion(s_next, xt)
    _finite(spec.name or "model", F1, G1)
    DG1 = spec.diffusion_jacobian(s_next, xt) if jacobian else None
    g1, dg1 = _gdw(G1, DG1, dw, jacobian)
    x_new = x + 0.5 * (F0 + F1) * h + 0.5 * (g0 + g1)
    if not jacobian:
        return x_new, None

    eye = np.eye(spec.dim)
    DF0 = spec.drift_jacobian(s, x)
    DF1 = spec.drift_jacobian(s_next, xt)
    Jt = eye + DF0 * h + dg0
    J = eye + 0.5 * h * (DF0 + np.matmul(DF1, Jt)) + 0.5 * (dg0 + np.matmul(dg1, Jt))
    return x_new, J


_SCHEMES = {"euler_maruyama": (euler_maruyama_step, 0.5), "heun_stratonovich": (heun_step, 1.0)}


def build_cocycle(spec: SdeSpec, base: Optional[BaseFlow] = None, *, escape_radius: float = 1e6) -> CocycleSystem:
    """Wrap an SDE as a :class:`CocycleSystem` on the cylinder.

    The one-step Jacobian is the derivative of the numerical scheme, so
    ``Phi_n`` is exactly subadditive at the discrete level.
    """
    if base is not None:
        if base.kind == "rotation":
            raise ValueError("an SDE needs a Wiener base")
        if base.dimension != spec.noise_dim:
            raise ValueError(
                f"diffusion has {spec.noise_dim} columns but base supplies {base.dimension} noises"
            )
        if not math.isclose(base.grid_step, spec.h, rel_tol=1e-12):
            raise ValueError(f"base grid step {base.grid_step} must equal integrator step {spec.h}")
    fn, order = _SCHEMES[spec.integrator]
    return CocycleSystem(
        dim=spec.dim,
        noise_dim=spec.noise_dim,
        steps_per_period=spec.steps_per_period,
        step=partial(fn, spec),
        escape_radius=escape_radius,
        name=spec.name,
        order=order,
        params=dict(spec.params),
    )


def integrate_step(spec: SdeSpec, path: NoisePath, slot: int, z: CylinderState):
    """One integrator step from ``z`` at grid slot ``slot``: ``(z', J)``."""
    fn, _ = _SCHEMES[spec.integrator]
    s = np.array([z.s])
    s_next = circle_advance(s, 1, spec.steps_per_period)
    dw = path.increment(slot)[None, :]
    x_new, J = fn(spec, s, s_next, z.x[None, :], dw, True)
    return CylinderState(s_next[0], x_new[0]), J[0]


def check_periodicity(spec: SdeSpec, samples: int = 16, atol: float = 1e-9, seed: int = 0) -> bool:
    """Evaluate F and G at ``s`` and ``s + 1`` on random points."""
    rng = np.random.default_rng(seed)
    s = rng.random(samples)
    x = rng.normal(size=(samples, spec.dim))
    return all(np.allclose(f(s, x), f(s + 1.0, x), atol=atol) for f in (spec.drift, spec.diffusion))


# --- model library ----------------------------------------------------------


def _zeros_dm(x, m):
    return np.zeros(x.shape + (m,))


def _zeros_dmd(x, m):
    p, d = x.shape
    return np.zeros((p, d, m, d))


def forced_linear(rate=1.0, amplitude=1.0, sigma=0.0, steps_per_period=256) -> SdeSpec:
    """``dx = (-rate x + amplitude cos 2 pi s) dt + sigma dW``, d = 1."""

    def F(s, x):
        return -rate * x + amplitude * np.cos(TWO_PI * s)[:, None]

    def DF(s, x):
        return np.full((x.shape[0], 1, 1), -rate)

    def G(s, x):
        return np.full((x.shape[0], 1, 1), float(sigma))

    def DG(s, x):
        return _zeros_dmd(x, 1)

    return SdeSpec(F, DF, G, DG, 1, 1, steps_per_period=steps_per_period, name="forced_linear",
                   params=dict(rate=rate, amplitude=amplitude, sigma=sigma))


def forced_linear_curve(s, rate=1.0, amplitude=1.0):
    """Periodic solution of ``x' = -rate x + amplitude cos 2 pi t``."""
    s = np.asarray(s, dtype=float)
    w = TWO_PI
    return amplitude * (rate * np.cos(w * s) + w * np.sin(w * s)) / (rate**2 + w**2)


def linear_multiplicative(a=-0.5, sigma=0.3, interpretation="stratonovich", steps_per_period=64) -> SdeSpec:
    """``dx = a x dt + sigma x (o) dW``; Stratonovich top exponent is ``a``."""

    def F(s, x):
        return a * x

    def DF(s, x):
        return np.full((x.shape[0], 1, 1), float(a))

    def G(s, x):
        return sigma * x[:, :, None]

    def DG(s, x):
        return np.full((x.shape[0], 1, 1, 1), float(sigma))

    integrator = "heun_stratonovich" if interpretation == "stratonovich" else "euler_maruyama"
    return SdeSpec(F, DF, G, DG, 1, 1, interpretation, integrator, steps_per_period,
                   name="linear_multiplicative", params=dict(a=a, sigma=sigma, interpretation=interpretation))


def double_well(epsilon=0.1, sigma=0.05, steps_per_period=128) -> SdeSpec:
    """``dx = (x - x^3 + epsilon cos 2 pi s) dt + sigma dW``."""

    def F(s, x):
        return x - x**3 + epsilon * np.cos(TWO_PI * s)[:, None]

    def DF(s, x):
        return (1.0 - 3.0 * x**2)[:, :, None]

    def G(s, x):
        return np.full((x.shape[0], 1, 1), float(sigma))

    def DG(s, x):
        return _zeros_dmd(x, 1)

    return SdeSpec(F, DF, G, DG, 1, 1, steps_per_period=steps_per_period, name="double_well",
                   params=dict(epsilon=epsilon, sigma=sigma))


def isotropic_linear(a=0.2, sigma=0.6, steps_per_period=16) -> SdeSpec:
    """``dX = a X dt + sigma dB X`` (Stratonovich), ``B`` a 2x2 matrix of Wiener processes.

    The law is rotation invariant; the exponents are ``a + sigma^2/2`` and
    ``a - sigma^2/2``.
    """
    d, m = 2, 4
    # noise column j multiplies the elementary matrix E_{r c}, j = 2 r + c
    E = np.zeros((m, d, d))
    for j in range(m):
        E[j, j // d, j % d] = 1.0

    def F(s, x):
        return a * x

    def DF(s, x):
        return np.broadcast_to(a * np.eye(d), (x.shape[0], d, d)).copy()

    def G(s, x):
        return sigma * np.einsum("jik,pk->pij", E, x)

    def DG(s, x):
        return np.broadcast_to(sigma * np.transpose(E, (1, 0, 2)), (x.shape[0], d, m, d)).copy()

    return SdeSpec(F, DF, G, DG, d, m, steps_per_period=steps_per_period, name="isotropic_linear",
                   params=dict(a=a, sigma=sigma))


def rotation_only(dim=1, steps_per_period=64) -> SdeSpec:
    """Zero drift and diffusion: the flow only turns the circle."""

    def F(s, x):
        return np.zeros_like(x)

    def DF(s, x):
        return np.zeros((x.shape[0], dim, dim))

    def G(s, x):
        return _zeros_dm(x, 1)

    def DG(s, x):
        return _zeros_dmd(x, 1)

    return SdeSpec(F, DF, G, DG, dim, 1, steps_per_period=steps_per_period, name="rotation_only",
                   params=dict(dim=dim))


def winding_two(rate=1.0, steepness=20.0, steps_per_period=256, escape_radius=1e6) -> CocycleSystem:
    """Synthetic system whose attractor is ``{(s mod 1, sin(pi s)) : s in [0, 2)}``.

    No smooth flow on R can carry that set (its period map swaps two points
    of each fibre), so the system is defined by its grid step.  With
    ``y = x / sin(pi s)`` the step is ``x' = sin(pi (s + h)) g(y)`` where
    ``g(y) = (1 - rate h) y + rate h tanh(steepness y)`` attracts ``y`` to
    +-1 at ``rate`` per unit time.  The fibre ``s = 0`` is singular; orbits
    must start off the grid ``k h``.
    """
    N = steps_per_period
    h = 1.0 / N
    kh = rate * h

    def step(s, s_next, x, dw, jacobian):
        den = np.sin(np.pi * s)
        if np.any(np.abs(den) < 1e-14):
            raise ValueError("winding_two: orbit hit the singular fibre s = 0")
        num = np.sin(np.pi * (s + h))[:, None]
        y = x / den[:, None]
        th = np.tanh(steepness * y)
        x_new = num * ((1.0 - kh) * y + kh * th)
        if not jacobian:
            return x_new, None
        dg = (1.0 - kh) + kh * steepness * (1.0 - th**2)
        return x_new, (num / den[:, None] * dg)[:, :, None]

    return CocycleSystem(1, 1, N, step, escape_radius=escape_radius, name="winding_two", order=1.0,
                         params=dict(rate=rate, steepness=steepness))


# --- zoo --------------------------------------------------------------------


@dataclass(frozen=True)
class ModelZooEntry:
    """A named test model with the facts the acceptance suite relies on.

    ``facts`` maps a fact name to ``(value, provenance)``.
    """

    name: str
    label: str
    build: Callable[..., CocycleSystem]
    sde: Optional[Callable[..., SdeSpec]] = None
    facts: dict = field(default_factory=dict)
    defaults: dict = field(default_factory=dict)

    def system(self, **overrides) -> CocycleSystem:
        params = {**self.defaults, **overrides}
        return self.build(**params)

    def fact(self, key):
        return self.facts[key][0]


def _sde_builder(factory):
    def build(**params):
        escape = params.pop("escape_radius", 1e6)
        return build_cocycle(factory(**params), escape_radius=escape)

    return build


def model_zoo() -> list[ModelZooEntry]:
    return [
        ModelZooEntry(
            "forced_linear", "a", _sde_builder(forced_linear), forced_linear,
            facts={
                "fibre_count": (1, "contraction mapping: unique periodic solution"),
                "curves": (1, "single graph"),
                "periods": ((1,), "graph over the circle closes after one turn"),
                "top_exponent": (-1.0, "constant Jacobian exp(-rate t), rate = 1"),
                "curve": (forced_linear_curve, "closed form, checked by substitution"),
            },
            defaults=dict(rate=1.0, amplitude=1.0, sigma=0.0, steps_per_period=256),
        ),
        ModelZooEntry(
            "linear_multiplicative", "b", _sde_builder(linear_multiplicative), linear_multiplicative,
            facts={"top_exponent": (-0.5, "x(t) = x0 exp(a t + sigma W_t), Stratonovich, a = -0.5")},
            defaults=dict(a=-0.5, sigma=0.3, interpretation="stratonovich", steps_per_period=64),
        ),
        ModelZooEntry(
            "double_well", "c", _sde_builder(double_well), double_well,
            facts={
                "fibre_count": (2, "two metastable wells at small epsilon, sigma (desk-scale horizon)"),
                "curves": (2, "one graph per well"),
                "periods": ((1, 1), "each well curve closes after one turn"),
            },
            defaults=dict(epsilon=0.1, sigma=0.05, steps_per_period=128),
        ),
        ModelZooEntry(
            "winding_two", "d", winding_two,
            facts={
                "fibre_count": (2, "set meets each fibre in {sin pi s, -sin pi s}"),
                "curves": (1, "one closed curve"),
                "periods": ((2,), "sin(pi (s+1)) = -sin(pi s): winding 2"),
                "top_exponent": (-1.0, "y-dynamics contract at rate 1"),
            },
            defaults=dict(rate=1.0, steepness=20.0, steps_per_period=256),
        ),
        ModelZooEntry(
            "isotropic_linear", "e", _sde_builder(isotropic_linear), isotropic_linear,
            facts={"exponents": ((0.38, 0.02), "a +- sigma^2/2 for a = 0.2, sigma = 0.6")},
            defaults=dict(a=0.2, sigma=0.6, steps_per_period=16),
        ),
        ModelZooEntry(
            "rotation_only", "f", _sde_builder(rotation_only), rotation_only,
            facts={"top_exponent": (0.0, "identity fibre maps")},
            defaults=dict(dim=1, steps_per_period=64),
        ),
    ]


def zoo_entry(name: str) -> ModelZooEntry:
    for entry in model_zoo():
        if name in (entry.name, entry.label):
            return entry
    raise KeyError(f"no zoo model named {name!r}")
