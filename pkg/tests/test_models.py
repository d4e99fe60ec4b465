import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from randperiodic.base import BaseFlow, NoisePath, _distinct_seeds
from randperiodic.cocycle import CylinderState, advance, evolve
from randperiodic.models import (
    NumericalError,
    SdeSpec,
    build_cocycle,
    check_periodicity,
    double_well,
    forced_linear,
    forced_linear_curve,
    integrate_step,
    isotropic_linear,
    linear_multiplicative,
    model_zoo,
    rotation_only,
    zoo_entry,
)


def test_integrator_must_match_interpretation():
    spec = forced_linear()
    with pytest.raises(ValueError):
        SdeSpec(spec.drift, spec.drift_jacobian, spec.diffusion, spec.diffusion_jacobian, 1, 1,
                interpretation="ito", integrator="heun_stratonovich")
    with pytest.raises(ValueError):
        SdeSpec(spec.drift, spec.drift_jacobian, spec.diffusion, spec.diffusion_jacobian, 1, 1,
                interpretation="stratonovich", integrator="euler_maruyama")


def test_pure_rotation_keeps_x():
    sys = build_cocycle(rotation_only(dim=2, steps_per_period=16))
    z = evolve(sys, 0.75, sys.noise(1), CylinderState(0.5, [1.0, -2.0]))
    assert z.s == 0.25
    assert np.array_equal(z.x, [1.0, -2.0])


def test_scalar_exponential_decay():
    sys = build_cocycle(forced_linear(rate=1.0, amplitude=0.0, steps_per_period=256))
    z = evolve(sys, 2.0, sys.noise(0), CylinderState(0.0, [1.0]))
    assert abs(z.x[0] - math.exp(-2.0)) < 1e-5


def test_forced_linear_approaches_closed_form():
    sys = build_cocycle(forced_linear(steps_per_period=128))
    s0 = (np.arange(32) + 0.5) / 32
    out = advance(sys, 20 * 128, sys.noise(0), s0, np.full((32, 1), 3.0))
    assert np.abs(out.x[:, 0] - forced_linear_curve(out.s)).max() < 1e-3


def test_closed_form_curve_solves_the_ode():
    s = np.linspace(0, 1, 101)
    eps = 1e-6
    deriv = (forced_linear_curve(s + eps) - forced_linear_curve(s - eps)) / (2 * eps)
    assert np.allclose(deriv, -forced_linear_curve(s) + np.cos(2 * np.pi * s), atol=1e-8)


def test_zero_step_is_rotation_with_identity_jacobian():
    spec = rotation_only(steps_per_period=64)
    z, J = integrate_step(spec, NoisePath(0, spec.h), 0, CylinderState(0.5, [0.7]))
    assert z.s == 0.5 + 1 / 64
    assert z.x[0] == 0.7
    assert np.array_equal(J, np.eye(1))


def test_euler_jacobian_is_one_minus_h():
    spec = linear_multiplicative(a=-1.0, sigma=0.0, interpretation="ito", steps_per_period=100)
    _, J = integrate_step(spec, NoisePath(0, 0.01), 3, CylinderState(0.0, [2.0]))
    assert J[0, 0] == 1 - 0.01


SPECS = {
    "forced": forced_linear(sigma=0.4, steps_per_period=32),
    "strat": linear_multiplicative(a=-0.3, sigma=0.7, steps_per_period=32),
    "ito": linear_multiplicative(a=-0.3, sigma=0.7, interpretation="ito", steps_per_period=32),
    "well": double_well(epsilon=0.2, sigma=0.3, steps_per_period=32),
    "iso": isotropic_linear(steps_per_period=32),
}


@given(st.sampled_from(sorted(SPECS)), st.integers(-100, 100), st.floats(0, 1, exclude_max=True),
       st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_scheme_jacobian_matches_finite_differences(name, slot, s, x):
    spec = SPECS[name]
    path = NoisePath(17, spec.h, spec.noise_dim)
    z = CylinderState(s, x[: spec.dim])
    _, J = integrate_step(spec, path, slot, z)
    eps = 1e-6
    fd = np.empty_like(J)
    for k in range(spec.dim):
        e = np.zeros(spec.dim)
        e[k] = eps
        up, _ = integrate_step(spec, path, slot, CylinderState(s, z.x + e))
        dn, _ = integrate_step(spec, path, slot, CylinderState(s, z.x - e))
        fd[:, k] = (up.x - dn.x) / (2 * eps)
    assert np.linalg.norm(J - fd) <= 1e-6 * np.linalg.norm(J)


@pytest.mark.parametrize("name", sorted(SPECS))
def test_coefficients_are_periodic(name):
    assert check_periodicity(SPECS[name])


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_coefficients_raise():
    spec = double_well(steps_per_period=8)
    with pytest.raises(NumericalError):
        integrate_step(spec, NoisePath(0, spec.h), 0, CylinderState(0.0, [np.inf]))


def test_base_dimension_mismatch():
    with pytest.raises(ValueError):
        build_cocycle(forced_linear(steps_per_period=16), BaseFlow("wiener", grid_step=1 / 16, dimension=2))
    with pytest.raises(ValueError):
        build_cocycle(forced_linear(steps_per_period=16), BaseFlow("wiener", grid_step=1 / 32))
    build_cocycle(isotropic_linear(steps_per_period=16), BaseFlow("wiener", grid_step=1 / 16, dimension=4))


def test_strong_order_of_euler_maruyama():
    # Ito dx = a x dt + sigma x dW has x(1) = exp(a - sigma^2/2 + sigma W_1)
    a, sigma = -0.5, 1.0
    seeds = _distinct_seeds(0, 100)
    levels = (16, 32, 64, 128)
    errors = []
    for N in levels:
        sys = build_cocycle(linear_multiplicative(a, sigma, "ito", N))
        paths = [NoisePath(s, 1 / N, 1, coarsen=2048 // N) for s in seeds]
        x = advance(sys, N, paths, np.zeros(100), np.ones((100, 1))).x[:, 0]
        w = np.array([p.increments(0, N).sum() for p in paths])
        errors.append(np.mean(np.abs(x - np.exp(a - sigma**2 / 2 + sigma * w))))
    slope = -np.polyfit(np.log(levels), np.log(errors), 1)[0]
    # error ratio per halving should be about 2^0.5
    assert 1.2 < 2**slope < 1.75


def test_zoo_contents():
    zoo = model_zoo()
    labels = [e.label for e in zoo]
    assert labels[:4] == ["a", "b", "c", "d"]
    for e in zoo:
        for key, (value, provenance) in e.facts.items():
            assert isinstance(provenance, str) and provenance
    assert zoo_entry("b").fact("top_exponent") == -0.5
    assert zoo_entry("a").fact("fibre_count") == 1
    d = zoo_entry("winding_two")
    assert (d.fact("curves"), d.fact("periods")) == (1, (2,))
    with pytest.raises(KeyError):
        zoo_entry("z")


def test_winding_two_construction():
    sys = zoo_entry("d").system()
    s0 = (np.arange(256) + 0.5) / 256
    x0 = np.tile([[0.5], [-0.5]], (128, 1))
    out = advance(sys, 30 * 256, sys.noise(0), s0, x0)
    assert np.abs(np.abs(out.x[:, 0]) - np.sin(np.pi * out.s)).max() < 1e-3
    # one period swaps the sign of each branch
    one = advance(sys, 256, sys.noise(0), out.s, out.x)
    assert np.allclose(one.x, -out.x, atol=1e-6)
