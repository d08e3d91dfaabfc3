import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from worldprobe.dynamics import (
    OSCILLATOR,
    DatasetSplit,
    InvalidSpecError,
    InvalidSplitError,
    SystemSpec,
    TrajectoryTruncatedError,
    UnsupportedTargetError,
    angular_momentum,
    compute_targets,
    dataset_stats,
    energy_series,
    integrate,
    max_energy_deviation,
    sample_dataset,
    secular_energy_drift,
    simulate_oscillator,
    simulate_two_body,
)

ID = {"m2": (0.5, 2.0)}
SMALL = SystemSpec(dt=0.1, steps=20, substeps=20)


# ---------------------------------------------------------------- two-body


def test_circular_orbit_radius_and_period():
    traj = simulate_two_body(SystemSpec(dt=1e-3, steps=6284), (1.0, 0.0), (0.0, 1.0))
    r = np.linalg.norm(traj.positions, axis=1)
    assert np.max(np.abs(r - 1.0)) < 1e-6
    i = int(round(2 * math.pi / 1e-3))
    assert np.max(np.abs(traj.full_states[i] - traj.full_states[0])) < 1e-3


def test_radial_free_fall_stays_on_axis_until_guard():
    spec = SystemSpec(dt=1e-3, steps=5000)
    with pytest.raises(TrajectoryTruncatedError) as info:
        simulate_two_body(spec, (1.0, 0.0), (0.0, 0.0))
    fail = info.value.step
    assert fail > 1
    traj = simulate_two_body(SystemSpec(dt=1e-3, steps=fail), (1.0, 0.0), (0.0, 0.0))
    assert np.all(traj.positions[:, 1] == 0.0)
    assert np.all(np.diff(traj.positions[:, 0]) < 0)


def test_eccentric_orbit_matches_high_order_oracle():
    traj = simulate_two_body(SystemSpec(dt=1e-3, steps=5001), (1.0, 0.0), (0.0, 1.2))

    def rhs(_, y):
        r3 = (y[0] ** 2 + y[1] ** 2) ** 1.5
        return [y[2], y[3], -y[0] / r3, -y[1] / r3]

    sol = solve_ivp(rhs, (0.0, 5.0), [1.0, 0.0, 0.0, 1.2], method="DOP853", rtol=1e-12, atol=1e-12)
    assert np.max(np.abs(traj.positions[5000] - sol.y[:2, -1])) < 1e-4


def test_energy_drift_below_tolerance():
    traj = simulate_two_body(SystemSpec(dt=1e-3, steps=20000), (1.0, 0.0), (0.0, 1.1))
    assert max_energy_deviation(traj) < 1e-6


def test_initial_position_inside_guard_rejected():
    with pytest.raises(TrajectoryTruncatedError) as info:
        simulate_two_body(SystemSpec(), (0.1, 0.0), (0.0, 3.0))
    assert info.value.step == 0


@pytest.mark.parametrize("bad", [{"G": 0.0}, {"m2": -1.0}, {"dt": 0.0}, {"steps": 1}, {"r_min_guard": 0.0}])
def test_invalid_spec(bad):
    with pytest.raises(InvalidSpecError):
        SystemSpec(**bad)


# ---------------------------------------------------------------- oscillator


def test_oscillator_fixed_point():
    traj = simulate_oscillator(SystemSpec(OSCILLATOR, steps=100), 0.0, 0.0)
    assert np.all(traj.full_states == 0.0)


def test_oscillator_tracks_cosine():
    n = int(2 * math.pi / 1e-3) + 1
    traj = simulate_oscillator(SystemSpec(OSCILLATOR, dt=1e-3, steps=n), 1.0, 0.0)
    assert np.max(np.abs(traj.positions[:, 0] - np.cos(traj.times))) < 1e-4


def test_oscillator_energy_has_no_secular_drift():
    traj = simulate_oscillator(SystemSpec(OSCILLATOR, dt=1e-3, steps=10_001), 1.0, 0.3)
    energy = energy_series(traj)
    period = int(round(2 * math.pi / 1e-3))
    assert secular_energy_drift(energy, period) < 1e-8
    # the bounded Verlet oscillation itself is second order in dt
    assert max_energy_deviation(traj) < 1e-6


# ---------------------------------------------------------------- properties


@settings(max_examples=25, deadline=None)
@given(
    x=st.floats(0.6, 2.0), y=st.floats(-1.0, 1.0),
    vx=st.floats(-0.5, 0.5), vy=st.floats(0.4, 1.2),
    n=st.integers(1, 400),
)
def test_reversibility(x, y, vx, vy, n):
    spec = SystemSpec(dt=1e-3, steps=2)
    p, v = integrate(spec, (x, y), (vx, vy), n)
    p2, v2 = integrate(spec, p, v, n, dt=-1e-3)
    assert np.max(np.abs(p2 - (x, y))) < 1e-8
    assert np.max(np.abs(v2 - (vx, vy))) < 1e-8


@settings(max_examples=20, deadline=None)
@given(G=st.floats(0.5, 2.0), m2=st.floats(0.5, 4.0), r=st.floats(0.8, 2.0), angle=st.floats(0, 2 * math.pi))
def test_circular_orbit_invariance(G, m2, r, angle):
    v = math.sqrt(G * m2 / r)
    omega = v / r
    # same resolution per radian as the unit circular orbit
    spec = SystemSpec(G=G, m2=m2, dt=1e-3 / omega, steps=1500)
    pos = (r * math.cos(angle), r * math.sin(angle))
    vel = (-v * math.sin(angle), v * math.cos(angle))
    traj = simulate_two_body(spec, pos, vel)
    assert np.max(np.abs(np.linalg.norm(traj.positions, axis=1) - r)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(vy=st.floats(0.8, 1.25), m2=st.floats(0.5, 2.0))
def test_angular_momentum_conserved(vy, m2):
    traj = simulate_two_body(SystemSpec(m2=m2, dt=1e-3, steps=3000), (1.0, 0.0), (0.0, vy * math.sqrt(m2)))
    L = angular_momentum(traj)
    assert np.max(np.abs(L - L[0])) / abs(L[0]) < 1e-8


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_sampling_is_deterministic(seed):
    a = sample_dataset(ID, 3, "ssl_train", seed, base=SMALL)
    b = sample_dataset(ID, 3, "ssl_train", seed, base=SMALL)
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert ta.full_states.tobytes() == tb.full_states.tobytes()
        assert ta.params == tb.params


# ---------------------------------------------------------------- datasets


def test_ft_task_has_fixed_star_mass():
    split = sample_dataset({"m2": (1.0, 1.0)}, 12, "ft_task", 0, base=SMALL)
    assert np.all(split.param_values("m2") == 1.0)


def test_empty_split_keeps_metadata():
    split = sample_dataset(ID, 0, "ssl_train", 0, base=SMALL)
    assert len(split) == 0
    assert split.generator_ranges["m2"] == (0.5, 2.0)
    assert split.role == "ssl_train"


def test_id_and_ood_supports_are_disjoint():
    ssl = sample_dataset(ID, 200, "ssl_train", 1, base=SMALL)
    ood = sample_dataset({"m2": (2.5, 4.0)}, 200, "ood_test", 2, base=SMALL, reference=ssl.generator_ranges)
    assert ssl.param_values("m2").max() <= 2.0
    assert ood.param_values("m2").min() >= 2.5


def test_probe_split_must_be_contained():
    with pytest.raises(InvalidSplitError):
        sample_dataset({"m2": (0.5, 3.0)}, 2, "probe_train", 0, base=SMALL, reference=ID)
    with pytest.raises(InvalidSplitError):
        sample_dataset(ID, 2, "probe_train", 0, base=SMALL)


def test_ood_split_needs_disjoint_interval():
    with pytest.raises(InvalidSplitError):
        sample_dataset({"m2": (1.0, 3.0)}, 2, "ood_test", 0, base=SMALL, reference=ID)


def test_invalid_role_and_interval():
    with pytest.raises(InvalidSplitError):
        DatasetSplit("bogus", [], {})
    with pytest.raises(InvalidSplitError):
        sample_dataset({"m2": (2.0, 1.0)}, 1, "ssl_train", 0, base=SMALL)


# ---------------------------------------------------------------- targets


def _static(pos, vel=(0.0, 1.0), **kw):
    spec = SystemSpec(dt=1e-3, steps=2, **kw)
    return simulate_two_body(spec, pos, vel)


def test_force_magnitude_inverse_square():
    traj = compute_targets(_static((2.0, 0.0), (0.0, 0.5)), ["force_magnitude", "force"])
    assert traj.targets["force_magnitude"][0, 0] == pytest.approx(0.25, abs=1e-15)
    np.testing.assert_allclose(traj.targets["force"][0], [-0.25, 0.0], atol=1e-15)


def test_force_scales_with_star_mass():
    a = compute_targets(_static((1.5, 0.5)), ["force_magnitude"])
    b = compute_targets(_static((1.5, 0.5), m2=2.0), ["force_magnitude"])
    assert b.targets["force_magnitude"][0, 0] == pytest.approx(2 * a.targets["force_magnitude"][0, 0], rel=1e-14)


def test_speed_matches_central_differences():
    errs = []
    # observation interval coarser than the integrator step, so the difference is a genuine approximation
    for dt in (4e-2, 2e-2):
        spec = SystemSpec(dt=dt, steps=int(8 / dt), substeps=int(round(dt / 1e-4)))
        traj = compute_targets(simulate_two_body(spec, (1.0, 0.0), (0.0, 1.1)), ["speed"])
        x = traj.observations
        fd = np.linalg.norm(x[2:] - x[:-2], axis=1) / (2 * dt)
        errs.append(np.max(np.abs(fd - traj.targets["speed"][1:-1, 0])))
    assert errs[0] < 1e-3
    # second order: halving dt cuts the error about fourfold
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_unknown_target():
    with pytest.raises(UnsupportedTargetError):
        compute_targets(_static((1.0, 0.0)), ["vorticity"])


def test_oscillator_targets():
    traj = compute_targets(simulate_oscillator(SystemSpec(OSCILLATOR, steps=5), 1.0, 2.0),
                           ["momentum", "energy", "potential_energy"])
    assert traj.targets["momentum"][0, 0] == 2.0
    assert traj.targets["energy"][0, 0] == pytest.approx(0.5 + 2.0)
    assert traj.targets["potential_energy"][0, 0] == pytest.approx(0.5)


# ---------------------------------------------------------------- statistics


def test_stats_constant_variable():
    split = sample_dataset({"m2": (1.0, 1.0)}, 20, "ft_task", 0, base=SMALL)
    stats = dataset_stats(split, "m2", 10)
    assert np.count_nonzero(stats.counts) == 1
    assert stats.variance == 0.0
    assert stats.counts.sum() == 20
    assert stats.mean == 1.0


def test_stats_uniform_mean_within_three_standard_errors():
    split = sample_dataset(ID, 400, "ssl_train", 3, base=SMALL)
    stats = dataset_stats(split, "m2", 15)
    se = (1.5 / math.sqrt(12)) / math.sqrt(400)
    assert abs(stats.mean - 1.25) < 3 * se
    assert stats.counts.sum() == 400


def test_stats_on_target_series_and_errors():
    split = sample_dataset(ID, 5, "ssl_train", 0, base=SMALL, targets=["radius"])
    stats = dataset_stats(split, "radius", 4)
    assert stats.n == 5 * SMALL.steps
    with pytest.raises(ValueError):
        dataset_stats(split, "m2", 0)
    with pytest.raises(KeyError):
        dataset_stats(split, "vorticity", 3)
