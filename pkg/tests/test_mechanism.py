"""Flexion-extension linkage and parallel-jaw crank-slider"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import ConfigError, LoopClosureInfeasible, OutOfStroke, TargetUnreachable
from mechanism import (
    FlexionParams,
    ParallelParams,
    flexion_adapt,
    flexion_forward,
    flexion_stroke_limit,
    flexion_sweep,
    load_mechanism_params,
    parallel_adapt,
    parallel_forward,
    save_mechanism_params,
)

SYMMETRIC = dict(l1=40.0, l2=30.0, l3=30.0, d=30.0, x4=0.0)


def bisect_increasing(f, lo, hi):
    """Root of an increasing function on [lo, hi], clamped to the ends"""
    if f(lo) >= 0.0:
        return lo
    if f(hi) <= 0.0:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def loop_oracle(params: FlexionParams, x2: float):
    """
    (w, x1) from the planar vector loop solved by bisection.

    Pivot A at the origin, u along the slider line, v across it. The slider
    end sits at B = (d + x2, x4); the jaw link ends at C = l2 (cos a, sin a)
    and the coupler closes the loop when |C - B| = l3. |C - B| is smallest
    at the a where B x C turns positive and grows for half a turn after
    that; the jaw angle is pi/2 - a.
    """
    bu, bv = params.d + x2, params.x4

    def cross(a):
        return bu * math.sin(a) - bv * math.cos(a)

    def closure(a):
        cu, cv = params.l2 * math.cos(a), params.l2 * math.sin(a)
        return (cu - bu) ** 2 + (cv - bv) ** 2 - params.l3 ** 2

    nearest = bisect_increasing(cross, 0.0, math.pi / 2)
    a = bisect_increasing(closure, nearest, nearest + math.pi)
    theta = math.pi / 2 - a
    return params.x3 + params.l1 * math.sin(theta), params.l1 * (1.0 - math.cos(theta))


def sample_params(rng):
    """Random linkage that closes over its whole stroke"""
    while True:
        l1 = rng.uniform(20.0, 60.0)
        l2 = rng.uniform(15.0, 40.0)
        l3 = rng.uniform(15.0, 40.0)
        d = rng.uniform(5.0, 40.0)
        x4 = rng.uniform(0.0, 10.0)
        x3 = rng.uniform(0.0, 20.0)
        fixed = dict(l1=l1, l2=l2, l3=l3, d=d, x4=x4)
        l4_0 = math.hypot(x4, d)
        if not abs(l2 - l3) + 0.5 <= l4_0 <= l2 + l3 - 0.5:
            continue
        upper = flexion_stroke_limit(fixed)
        stroke = rng.uniform(0.1, 0.95) * upper
        return FlexionParams(x3=x3, stroke_max=stroke, **fixed)


# ==================== FLEXION FORWARD ====================

def test_forward_symmetric_foremost_position():
    params = FlexionParams(x3=10.0, stroke_max=20.0, **SYMMETRIC)
    state = flexion_forward(params, 0.0)
    assert state.phi3 == 0.0
    assert state.phi2 == pytest.approx(math.pi / 3, abs=1e-12)
    assert state.theta == pytest.approx(math.pi / 6, abs=1e-12)
    assert state.w == pytest.approx(30.0, abs=1e-12)
    assert state.x1 == pytest.approx(40.0 * (1.0 - math.cos(math.pi / 6)), abs=1e-12)
    assert state.x1 == pytest.approx(5.3590, abs=1e-4)


def test_forward_fully_stretched_boundary():
    # l4 = l2 + l3 at x2 = 30
    params = FlexionParams(x3=10.0, stroke_max=30.0, **SYMMETRIC)
    state = flexion_forward(params, 30.0)
    assert state.phi2 == pytest.approx(0.0, abs=1e-12)
    assert state.theta == pytest.approx(math.pi / 2, abs=1e-12)
    assert state.w == pytest.approx(10.0 + 40.0 * math.cos(state.phi3), abs=1e-12)


def test_forward_general_case_matches_loop_oracle():
    params = FlexionParams(l1=45.0, l2=28.0, l3=35.0, d=22.0, x3=8.0, x4=6.0, stroke_max=10.0)
    state = flexion_forward(params, 7.0)
    w, x1 = loop_oracle(params, 7.0)
    assert state.w == pytest.approx(w, abs=1e-9)
    assert state.x1 == pytest.approx(x1, abs=1e-9)


def test_forward_state_identities():
    params = FlexionParams(l1=45.0, l2=28.0, l3=35.0, d=22.0, x3=8.0, x4=6.0, stroke_max=10.0)
    for x2 in np.linspace(0.0, 10.0, 11):
        s = flexion_forward(params, float(x2))
        assert s.theta == pytest.approx(math.pi / 2 - s.phi3 - s.phi2, abs=1e-12)
        assert s.w == pytest.approx(params.x3 + params.l1 * math.sin(s.theta), abs=1e-12)
        assert s.x1 == pytest.approx(params.l1 * (1.0 - math.cos(s.theta)), abs=1e-12)


def test_forward_out_of_stroke():
    params = FlexionParams(x3=10.0, stroke_max=20.0, **SYMMETRIC)
    with pytest.raises(OutOfStroke):
        flexion_forward(params, 20.5)
    with pytest.raises(OutOfStroke):
        flexion_forward(params, -0.1)


def test_params_reject_unclosable_stroke():
    with pytest.raises(LoopClosureInfeasible):
        FlexionParams(x3=10.0, stroke_max=31.0, **SYMMETRIC)


def test_params_reject_nonpositive_length():
    with pytest.raises(ValueError):
        FlexionParams(l1=0.0, l2=30.0, l3=30.0, d=30.0, x3=0.0, x4=0.0, stroke_max=1.0)


def test_forward_agrees_with_loop_oracle(rng):
    checked = 0
    for _ in range(1000):
        params = sample_params(rng)
        for x2 in rng.uniform(0.0, params.stroke_max, size=10):
            state = flexion_forward(params, float(x2))
            w, x1 = loop_oracle(params, float(x2))
            assert state.w == pytest.approx(w, abs=1e-9)
            assert state.x1 == pytest.approx(x1, abs=1e-9)
            checked += 1
    assert checked == 10_000


def test_x1_independent_of_offset():
    a = FlexionParams(x3=0.0, stroke_max=20.0, **SYMMETRIC)
    b = FlexionParams(x3=17.5, stroke_max=20.0, **SYMMETRIC)
    for x2 in (0.0, 5.0, 12.5, 20.0):
        assert flexion_forward(a, x2).x1 == flexion_forward(b, x2).x1


def test_sweep_table():
    params = FlexionParams(x3=10.0, stroke_max=20.0, **SYMMETRIC)
    df = flexion_sweep(params, samples=21)
    assert list(df.columns) == ['x2', 'theta', 'w', 'x1', 'phi2', 'phi3']
    assert len(df) == 21
    assert df['x2'].iloc[-1] == pytest.approx(20.0)
    assert df['x1'].is_monotonic_increasing


# ==================== FLEXION ADAPTATION ====================

def test_adapt_anchor_case():
    targets = {'x1_max': 40.0 * (1.0 - math.cos(math.pi / 6)), 'w_max': 30.0}
    solution = flexion_adapt(targets, SYMMETRIC)
    assert solution.x3 == pytest.approx(10.0, abs=1e-9)
    assert solution.x2_max == pytest.approx(0.0, abs=1e-6)


def test_adapt_sixty_degree_jaw():
    # theta = pi/3 needs phi2 = pi/6, i.e. l4 = 60 cos(pi/6)
    targets = {'x1_max': 20.0, 'w_max': 50.0}
    solution = flexion_adapt(targets, SYMMETRIC)
    assert solution.x2_max == pytest.approx(60.0 * math.cos(math.pi / 6) - 30.0, abs=1e-6)
    assert solution.x3 == pytest.approx(50.0 - 40.0 * math.sin(math.pi / 3), abs=1e-6)


def test_adapt_round_trip(rng):
    done = 0
    while done < 200:
        l2 = rng.uniform(20.0, 40.0)
        fixed = dict(l1=rng.uniform(30.0, 60.0), l2=l2, l3=l2, d=rng.uniform(5.0, 1.8 * l2), x4=0.0)
        upper = flexion_stroke_limit(fixed)
        reference = FlexionParams(x3=0.0, stroke_max=upper, **fixed)
        low = flexion_forward(reference, 0.0).x1
        high = flexion_forward(reference, upper).x1
        x1_max = low + rng.uniform(0.05, 0.95) * (high - low)
        w_max = fixed['l1'] + rng.uniform(0.0, 30.0)

        solution = flexion_adapt({'x1_max': x1_max, 'w_max': w_max}, fixed)
        params = solution.to_params(fixed)
        start = flexion_forward(params, 0.0)
        end = flexion_forward(params, params.stroke_max)
        assert end.x1 == pytest.approx(x1_max, abs=1e-6)
        assert max(start.w, end.w) == pytest.approx(w_max, abs=1e-6)
        done += 1


def test_adapt_rejects_x1_beyond_jaw_length():
    with pytest.raises(TargetUnreachable):
        flexion_adapt({'x1_max': 45.0, 'w_max': 50.0}, SYMMETRIC)


def test_adapt_rejects_unattainable_travel():
    # x1 tops out at 40 (theta = pi/2) when the loop is fully stretched
    with pytest.raises(TargetUnreachable):
        flexion_adapt({'x1_max': 2.0, 'w_max': 50.0}, SYMMETRIC)


def test_adapt_rejects_negative_offset():
    with pytest.raises(TargetUnreachable):
        flexion_adapt({'x1_max': 20.0, 'w_max': 10.0}, SYMMETRIC)


def test_adapt_missing_fixed_length():
    with pytest.raises(ConfigError):
        flexion_adapt({'x1_max': 20.0, 'w_max': 50.0}, {'l1': 40.0, 'l2': 30.0})


def test_stroke_limit_symmetric():
    assert flexion_stroke_limit(SYMMETRIC) == pytest.approx(30.0, abs=1e-9)


# ==================== PARALLEL ====================

@pytest.mark.parametrize('l_c, l_b, w_max', [
    (20.0, 30.0, 80.0),
    (20.0, 0.0001, 20.0002),
    (35.5, 12.25, 60.0),
])
def test_parallel_forward(l_c, l_b, w_max):
    assert parallel_forward(ParallelParams(l_c, l_b)) == pytest.approx(w_max, abs=1e-12)


@pytest.mark.parametrize('w_max, l_c, l_b', [
    (100.0, 20.0, 40.0),
    (20.0002, 20.0, 0.0001),
    (60.0, 35.5, 12.25),
])
def test_parallel_adapt(w_max, l_c, l_b):
    assert parallel_adapt(w_max, l_c) == pytest.approx(l_b, abs=1e-12)


def test_parallel_adapt_unreachable():
    with pytest.raises(TargetUnreachable):
        parallel_adapt(20.0, 20.0)


@settings(max_examples=200, deadline=None)
@given(w_max=st.floats(min_value=1.0, max_value=500.0), fraction=st.floats(min_value=0.5, max_value=0.99))
def test_parallel_round_trip(w_max, fraction):
    l_c = fraction * w_max
    l_b = parallel_adapt(w_max, l_c)
    assert parallel_forward(ParallelParams(l_c, l_b)) == w_max


# ==================== PARAMETER FILES ====================

def test_params_file_round_trip(tmp_path):
    params = FlexionParams(x3=10.0, stroke_max=20.0, **SYMMETRIC)
    path = tmp_path / 'flexion.yaml'
    save_mechanism_params(path, params)
    assert load_mechanism_params(path) == params

    parallel = ParallelParams(20.0, 40.0)
    save_mechanism_params(path, parallel)
    assert load_mechanism_params(path) == parallel


def test_params_file_unknown_template(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text("template: scissor\nl_c: 1.0\n")
    with pytest.raises(ConfigError):
        load_mechanism_params(path)
