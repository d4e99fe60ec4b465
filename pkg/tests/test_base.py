import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from randperiodic.base import (
    BLOCK_SIZE,
    BaseFlow,
    GridAlignmentError,
    NoisePath,
    RotationSample,
    ergodic_component_sampler,
    increment,
    rational_approximation,
    shift,
)

H = 1.0 / 64


def test_same_seed_same_increments():
    a = NoisePath(5, H, 2).increments(-10, 50)
    b = NoisePath(5, H, 2).increments(-10, 50)
    assert np.array_equal(a, b)
    assert a.shape == (50, 2)


def test_different_seeds_differ():
    a = NoisePath(1, H).increments(0, 20)
    b = NoisePath(2, H).increments(0, 20)
    assert not np.array_equal(a, b)


def test_dimension_changes_stream():
    a = NoisePath(1, H, 1).increments(0, 8)[:, 0]
    b = NoisePath(1, H, 2).increments(0, 8)[:, 0]
    assert not np.array_equal(a, b)


@given(st.integers(-3 * BLOCK_SIZE, 3 * BLOCK_SIZE), st.integers(1, 2 * BLOCK_SIZE))
def test_block_boundaries_are_seamless(start, count):
    p = NoisePath(9, H)
    whole = p.increments(start, count)
    singles = np.array([p.increment(start + i) for i in range(0, count, max(1, count // 7))])
    assert np.array_equal(whole[:: max(1, count // 7)], singles)


@given(st.integers(-500, 500), st.integers(-500, 500), st.integers(-50, 50))
def test_shift_is_additive_and_an_index_shift(a, b, slot):
    p = NoisePath(3, H)
    assert p.shift_slots(a).shift_slots(b) == p.shift_slots(a + b)
    assert np.array_equal(p.shift_slots(a).increment(slot), p.increment(slot + a))


def test_shift_by_time_and_inverse():
    p = NoisePath(3, H)
    assert p.shift(1.0).shift(-1.0) == p
    assert shift(p, 0.5) == p.shift_slots(32)
    assert np.array_equal(increment(p, 4), p.increment(4))


def test_off_grid_shift_raises_with_nearest_slot():
    p = NoisePath(3, H)
    with pytest.raises(GridAlignmentError) as info:
        p.shift(0.3 * H)
    assert info.value.nearest_slot == 0
    assert info.value.error > 0


def test_increment_statistics():
    z = NoisePath(11, H).increments(-20000, 40000)[:, 0]
    n = len(z)
    # mean within 4 standard errors, variance within 4 of its own standard errors
    assert abs(z.mean()) < 4 * math.sqrt(H / n)
    assert abs(z.var() - H) < 4 * H * math.sqrt(2.0 / n)


def test_coarse_increments_sum_fine_ones():
    coarse = NoisePath(4, H, 1, coarsen=8)
    fine = coarse.refine(4)
    assert math.isclose(fine.grid_step, H / 4)
    c = coarse.increments(3, 10)
    f = fine.increments(12, 40).reshape(10, 4, 1).sum(axis=1)
    assert np.allclose(c, f, atol=1e-15)


def test_refine_below_base_grid_fails():
    with pytest.raises(ValueError):
        NoisePath(4, H).refine(2)


def test_invalid_paths():
    with pytest.raises(ValueError):
        NoisePath(0, 0.0)
    with pytest.raises(ValueError):
        NoisePath(0, H, 0)


def test_rational_detection():
    assert rational_approximation(0.25) == 0.25
    assert rational_approximation(math.sqrt(2) - 1) is None


@pytest.mark.parametrize("alpha,k,expected", [(0.25, 2, 2), (0.25, 4, 4), (0.25, 3, 1), (math.sqrt(2) - 1, 6, 1)])
def test_component_count(alpha, k, expected):
    assert BaseFlow("rotation", alpha=alpha).component_count(k) == expected
    assert BaseFlow("wiener").component_count(k) == 1


def test_rotation_component_is_invariant_under_theta_k():
    alpha, k = 0.25, 2
    flow = BaseFlow("rotation", seed=1, alpha=alpha)
    samples = ergodic_component_sampler(flow, k, 200)
    cell = np.array([math.floor(4 * r.phase) % 2 for r in samples])
    assert np.all(cell == 0)
    moved = [r.shift(float(k)) for r in samples]
    assert all(math.floor(4 * r.phase) % 2 == 0 for r in moved)
    # one step of theta leaves the component
    once = [r.shift(1.0) for r in samples]
    assert all(math.floor(4 * r.phase) % 2 == 1 for r in once)


def test_irrational_rotation_samples_whole_circle():
    flow = BaseFlow("rotation", seed=2, alpha=math.sqrt(2) - 1)
    phases = np.array([r.phase for r in ergodic_component_sampler(flow, 3, 400)])
    assert phases.min() < 0.1 and phases.max() > 0.9


def test_wiener_component_sampler_distinct_paths():
    flow = BaseFlow("wiener", seed=7, grid_step=H)
    paths = ergodic_component_sampler(flow, 5, 30)
    assert len({p.seed for p in paths}) == 30
    assert all(p.grid_step == H for p in paths)


def test_product_base_returns_pairs():
    flow = BaseFlow("product", seed=7, grid_step=H, alpha=0.5)
    pairs = ergodic_component_sampler(flow, 2, 4)
    assert all(isinstance(p, NoisePath) and isinstance(r, RotationSample) for p, r in pairs)


def test_bad_base_and_arguments():
    with pytest.raises(ValueError):
        BaseFlow("brownian")
    with pytest.raises(ValueError):
        ergodic_component_sampler(BaseFlow("wiener"), 0, 3)
