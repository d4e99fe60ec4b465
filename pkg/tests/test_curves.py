import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from randperiodic.curves import (
    AmbiguousContinuationError,
    ExtractionError,
    PeriodicCurve,
    PeriodicCurveSet,
    curve_distance,
    cycle_notation,
    decompose_periods,
    extract_curves,
    extract_strip_graphs,
    graph_distance,
    stitch_and_lift,
    verify_period_shift_invariance,
    verify_random_periodicity,
)
from randperiodic.invariant import FibreCloud, bin_centers, pullback_attractor
from randperiodic.models import build_cocycle, forced_linear_curve, rotation_only, zoo_entry

BOX = ([-2.0], [2.0])


def cloud_from(fn, count, nbins=96, tol_K=1e-3):
    """Cloud whose fibre at s holds fn(s, j) for j < count."""
    s = np.repeat(bin_centers(nbins), count)
    j = np.tile(np.arange(count), nbins)
    x = np.array([np.atleast_1d(fn(si, ji)) for si, ji in zip(s, j)], dtype=float)
    return FibreCloud(None, nbins, s, x, tol_K=tol_K)


def rotating_three(s, j):
    a = 2 * np.pi * (s + j) / 3
    return [np.cos(a), np.sin(a)]


@pytest.mark.parametrize(
    "perm,expected",
    [
        ((0,), [((0,), 1)]),
        ((1, 0), [((0, 1), 2)]),
        ((0, 1), [((0,), 1), ((1,), 1)]),
        ((1, 2, 0, 3), [((0, 1, 2), 3), ((3,), 1)]),
    ],
)
def test_decompose_periods_examples(perm, expected):
    assert decompose_periods(perm) == expected


def test_cycle_notation():
    assert cycle_notation((1, 0)) == "(1 2)"
    assert cycle_notation((0, 2, 1)) == "(1)(2 3)"


@given(st.permutations(list(range(7))))
def test_periods_sum_to_label_count(perm):
    cycles = decompose_periods(perm)
    assert sum(t for _, t in cycles) == len(perm)
    for cyc, tau in cycles:
        assert all(perm[cyc[i]] == cyc[(i + 1) % tau] for i in range(tau))


def test_invalid_permutation():
    with pytest.raises(ValueError):
        decompose_periods((0, 0))


def test_two_constant_curves_are_fixed():
    cloud = cloud_from(lambda s, j: 2.0 * j - 1.0, 2)
    curves = extract_curves(cloud)
    assert curves.n == 2 and curves.periods == [1, 1]
    assert curves.permutation == "(1)(2)"
    assert [float(c.x[0, 0]) for c in curves.curves] == [-1.0, 1.0]


def test_three_cycle_in_the_plane():
    cloud = cloud_from(rotating_three, 3)
    curves = extract_curves(cloud)
    assert curves.n == 1 and curves.periods == [3]
    assert curves.label_count == 3
    c = curves.curves[0]
    # the lift starts on whichever branch carries label 0
    assert any(np.allclose(c.x, [rotating_three(s, j) for s in c.s]) for j in range(3))
    assert curves.reconstruction_distance(cloud) < 1e-12


def test_backward_stitching_inverts_forward():
    strips = extract_strip_graphs(cloud_from(rotating_three, 3))
    fwd = stitch_and_lift(strips).perm
    bwd = stitch_and_lift(strips, direction="backward").perm
    assert [fwd[b] for b in bwd] == [0, 1, 2]
    assert fwd != (0, 1, 2)
    with pytest.raises(ValueError):
        stitch_and_lift(strips, direction="sideways")


@pytest.fixture(scope="module")
def sys_d():
    return zoo_entry("d").system()


@pytest.fixture(scope="module")
def cloud_d(sys_d):
    return pullback_attractor(sys_d, sys_d.noise(3), BOX, 2, 30.0, nbins=256)


def test_winding_strips_have_two_branches(cloud_d):
    strips = extract_strip_graphs(cloud_d)
    assert len(strips) == 8
    assert all(s.count == 2 for s in strips)
    assert strips[0].bins[0] == -32
    assert strips[0].interval == (-0.125, 0.125)


def test_winding_curve(cloud_d):
    curves = extract_curves(cloud_d)
    assert (curves.n, curves.periods, curves.permutation) == (1, [2], "(1 2)")
    assert curves.reconstruction_distance(cloud_d) <= 2 * cloud_d.tol_K
    c = curves.curves[0]
    assert np.abs(np.abs(c.x[:, 0]) - np.abs(np.sin(np.pi * c.s))).max() <= 1e-3


def test_close_parallel_branches_are_ambiguous():
    cloud = cloud_from(lambda s, j: 0.01 * j, 2, tol_K=1e-4)
    with pytest.raises(AmbiguousContinuationError) as info:
        extract_strip_graphs(cloud, jump_threshold=0.5)
    assert len(info.value.distances) == 2


def test_changing_branch_count_is_rejected():
    cloud = cloud_from(lambda s, j: j if s < 0.5 else 0.0, 2)
    with pytest.raises(ExtractionError):
        extract_curves(cloud)


def test_strip_arguments():
    cloud = cloud_from(lambda s, j: 0.0, 1)
    with pytest.raises(ValueError):
        extract_strip_graphs(cloud, M=2)
    with pytest.raises(ValueError):
        extract_strip_graphs(cloud, M=7)
    rejected = FibreCloud(None, cloud.nbins, cloud.s, cloud.x, accepted=False)
    with pytest.raises(ExtractionError):
        extract_strip_graphs(rejected)


def test_curve_evaluation_is_periodic():
    c = extract_curves(cloud_from(rotating_three, 3)).curves[0]
    s = np.linspace(0, 3, 50)
    assert np.allclose(c(s), c(s + 3))
    assert c.periodicity_residual() < 1e-12
    shifted = PeriodicCurve(c.labels, 3, c.nbins, np.roll(c.x, -c.nbins, axis=0))
    assert curve_distance(c, shifted) == 0.0
    assert graph_distance(c, shifted) == 0.0
    assert curve_distance(c, PeriodicCurve((0,), 1, c.nbins, c.x[: c.nbins])) == np.inf


def curves_at(sys, path, k, nbins=64, box=BOX, grid=4):
    cl = pullback_attractor(sys, path.shift(-float(k)), box, grid, 20.0, nbins=nbins)
    return extract_curves(cl)


def test_rotation_constant_curve_is_exactly_periodic():
    sys = build_cocycle(rotation_only(steps_per_period=16))
    path = sys.noise(0)
    box = ([0.4], [0.4])
    rep = verify_random_periodicity(sys, curves_at(sys, path, 0, box=box, grid=2),
                                    curves_at(sys, path, 1, box=box, grid=2))
    assert rep.passed and rep.residuals == [0.0] and rep.s_exact


def test_forced_linear_is_randomly_periodic():
    sys = zoo_entry("a").system(steps_per_period=32, sigma=0.2)
    path = sys.noise(4)
    now, before = curves_at(sys, path, 0, box=([-3.0], [3.0])), curves_at(sys, path, 2, box=([-3.0], [3.0]))
    rep = verify_random_periodicity(sys, now, before, k=2)
    assert rep.passed and rep.residuals[0] <= 1e-3
    assert rep.to_dict()["pass"]
    with pytest.raises(ValueError):
        verify_random_periodicity(sys, now, before, k=1)


def test_deterministic_curve_matches_closed_form():
    sys = zoo_entry("a").system(steps_per_period=32)
    c = curves_at(sys, sys.noise(0), 0).curves[0]
    assert np.abs(c.x[:, 0] - forced_linear_curve(c.s)).max() <= 1e-3


def test_count_change_fails_verification():
    two = extract_curves(cloud_from(lambda s, j: 2.0 * j - 1.0, 2))
    one = extract_curves(cloud_from(lambda s, j: 0.0, 1))
    sys = build_cocycle(rotation_only(steps_per_period=16))
    rep = verify_random_periodicity(sys, two, one)
    assert not rep.passed and "count" in rep.message


def test_winding_period_does_not_depend_on_shift(sys_d, cloud_d):
    a = extract_curves(cloud_d)
    b = extract_curves(pullback_attractor(sys_d, sys_d.noise(3).shift(-4.0), BOX, 2, 30.0, nbins=256))
    assert verify_period_shift_invariance(a, b)


def test_shift_invariance_detects_period_change(cloud_d):
    a = extract_curves(cloud_d)
    c = a.curves[0]
    # same points split into two period-1 curves
    broken = PeriodicCurveSet(
        (PeriodicCurve((0,), 1, c.nbins, c.laps()[0]), PeriodicCurve((1,), 1, c.nbins, c.laps()[1])),
        (0, 1), c.nbins,
    )
    rep = verify_period_shift_invariance(a, broken)
    assert not rep and rep.periods_b == [1, 1]


def test_summary_and_rows(cloud_d):
    curves = extract_curves(cloud_d)
    assert curves.summary() == {"n": 1, "periods": [2], "permutation": "(1 2)"}
    rows = list(curves.rows())
    assert len(rows) == 2 * 256 and rows[-1][1] == pytest.approx(2 - 0.5 / 256)
