import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from autobx.geometry import UPRIGHT_PROBE, RigidTransform
from autobx.needle import (
    GuideGeometry, NeedleError, affine_samples, calibrate_guide, insertion_angle, plan_insertion,
    render_guide_samples, simulate_insertion,
)
from autobx.phantom import PhantomConfig, build_phantom

vec3 = st.lists(st.floats(-50, 50), min_size=3, max_size=3).map(np.array)


def test_angle_examples():
    t = np.zeros(3)
    assert insertion_angle(t, [0, 0, 10], [0, 0, 10]) == 0.0
    assert insertion_angle(t, [0, 0, 10], [10, 0, 0]) == pytest.approx(90.0)
    assert insertion_angle(t, [0, 0, 10], [-5, 0, 10]) == pytest.approx(26.565051177, abs=1e-8)
    with pytest.raises(NeedleError, match="coincides"):
        insertion_angle(t, t, [1, 0, 0])


@given(vec3, vec3, st.floats(0.1, 100))
def test_angle_scale_invariant_and_symmetric(a, b, k):
    t = np.array([1.0, 2.0, -30.0])
    if np.linalg.norm(a - t) < 1e-3 or np.linalg.norm(b - t) < 1e-3:
        return
    th = insertion_angle(t, a, b)
    assert 0.0 <= th <= 180.0
    assert insertion_angle(t, b, a) == pytest.approx(th, abs=1e-9)
    assert insertion_angle(t, t + k * (a - t), b) == pytest.approx(th, abs=1e-6)


def test_calibration_recovers_reference_line():
    cal = calibrate_guide(affine_samples(0.03682, 47.3703, range(30, 41)))
    assert abs(cal.beta0 - 0.03682) < 1e-9 and abs(cal.beta1 - 47.3703) < 1e-9
    assert cal.residual < 1e-9 and cal.n_samples == 11
    assert cal.angle(cal.row(35.0)) == pytest.approx(35.0)


def test_calibration_constant_angle():
    cal = calibrate_guide([(33.0, y) for y in (10, 50, 90, 400)])
    assert cal.beta0 == pytest.approx(0.0, abs=1e-15) and cal.beta1 == pytest.approx(33.0)


def test_calibration_errors():
    with pytest.raises(NeedleError, match="vertical"):
        calibrate_guide([(30, 5), (31, 5)])
    with pytest.raises(NeedleError):
        calibrate_guide([(30, 5)])


@given(st.integers(0, 10_000))
def test_noisy_calibration_is_least_squares(seed):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0, 500, 15)
    th = 0.04 * y + 20 + rng.normal(0, 0.5, 15)
    cal = calibrate_guide(list(zip(th, y)))
    # grid search around the fit: nothing on the grid beats it
    b0 = cal.beta0 + np.linspace(-1e-3, 1e-3, 41)
    b1 = cal.beta1 + np.linspace(-0.3, 0.3, 41)
    rms = np.sqrt(((th[None, None] - (b0[:, None, None] * y + b1[None, :, None])) ** 2).mean(-1))
    assert cal.residual <= rms.min() + 1e-12
    assert abs(cal.residual - rms.min()) < 1e-3


def test_rendered_sweep_is_monotone_and_fits():
    s = render_guide_samples(GuideGeometry(), range(30, 41))
    assert len(s) == 11
    rows = [r for _, r in s]
    assert np.all(np.diff(rows) < 0)
    cal = calibrate_guide(s)
    assert cal.beta0 < 0 and cal.residual < 0.5


@pytest.fixture(scope="module")
def surface():
    return build_phantom(PhantomConfig())[1]


def upright_at(surface, x, y):
    return RigidTransform(UPRIGHT_PROBE, [x, y, surface.base_z(x, y)])


def test_plan_straight_down(surface):
    probe = upright_at(surface, 150.0, 100.0)
    guide = GuideGeometry(pivot_lateral=0.0)
    target = probe.translation - [0, 0, 30.0]
    plan = plan_insertion(target, surface, probe, guide)
    assert plan.depth == pytest.approx(30.0, abs=1e-6)
    assert np.allclose(plan.p_insertion, probe.translation, atol=1e-6)
    assert plan.theta == pytest.approx(insertion_angle(target, plan.p_insertion, plan.p_tool), abs=1e-6)


def test_plan_angled_entry_on_skin(surface):
    probe = upright_at(surface, 150.0, 100.0)
    plan = plan_insertion(probe.translation - [0, 0, 40.0], surface, probe)
    x, y, z = plan.p_insertion
    assert z == pytest.approx(surface.base_z(x, y), abs=1e-6)
    assert 0 < plan.guide_angle < 90
    assert plan.to_dict()["depth"] == pytest.approx(plan.depth)


def test_plan_errors(surface):
    probe = upright_at(surface, 150.0, 100.0)
    guide = GuideGeometry(pivot_lateral=0.0)
    with pytest.raises(NeedleError, match="beyond guide reach"):
        plan_insertion(probe.translation - [0, 0, 120.0], surface, probe, guide)
    with pytest.raises(NeedleError, match="above"):
        plan_insertion(probe.translation + [0, 0, 5.0], surface, probe, guide)


def test_insertion_exact_without_noise(surface):
    probe = upright_at(surface, 150.0, 100.0)
    plan = plan_insertion(probe.translation - [0, 0, 40.0], surface, probe)
    res = simulate_insertion(plan, 0.0, seed=1)
    assert np.allclose(res.tip, plan.p_target, atol=1e-9)
    assert res.lateral_error(plan.p_target) < 1e-9


@given(st.floats(0.1, 5.0), st.integers(0, 1000))
def test_insertion_geometry(sigma, seed):
    surf = build_phantom(PhantomConfig(extent=(300.0, 200.0, 120.0), spacing=2.0))[1]
    probe = upright_at(surf, 150.0, 100.0)
    plan = plan_insertion(probe.translation - [0, 0, 40.0], surf, probe)
    res = simulate_insertion(plan, sigma, seed=seed)
    assert len(res.points) >= 10
    # collinear: second singular value vanishes
    sv = np.linalg.svd(res.points - res.points.mean(0), compute_uv=False)
    assert sv[1] < 1e-9 * sv[0]
    assert np.linalg.norm(res.tip - plan.p_insertion) == pytest.approx(plan.depth)
    lateral = plan.depth * math.sin(math.radians(res.misalignment_deg))
    assert np.linalg.norm(res.tip - plan.p_target) == pytest.approx(
        2 * plan.depth * math.sin(math.radians(res.misalignment_deg) / 2), abs=1e-9)
    assert res.lateral_error(plan.p_target) == pytest.approx(lateral, abs=1e-9)
    again = simulate_insertion(plan, sigma, seed=seed)
    assert np.array_equal(again.points, res.points)
