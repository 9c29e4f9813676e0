import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artik.dynamics import (Joint, Link, Mechanism, NoiseConfig, SimState, body_pose_series,
                            forward_dynamics, forward_kinematics, generate_observations,
                            mass_matrix, rollout, step, total_energy)
from artik.errors import DimensionMismatch, Diverged, SingularInertia, UnknownPreset
from artik.presets import preset
from artik.se3 import Pose, rotation_angle, rotvec_to_matrix

import oracles

Y = (0.0, 1.0, 0.0)


def pendulum(m=0.7, l=0.9, I=0.03, damping=0.0):
    link = Link("bob", m, (I, I, 2 * I), com=(0.0, 0.0, -l))
    return Mechanism([link], [Joint("revolute", -1, Y, Pose(p=(0, 0, 2.0)), damping)]).validate()


def cartpole_constants(mech):
    cart, pole = mech.links
    return dict(M=cart.mass, m=pole.mass, l=-pole.com[2], I=pole.inertia[1])


# -- forward kinematics -----------------------------------------------------------


def test_fk_at_zero_gives_mounts():
    sc = preset("three_link")
    poses = forward_kinematics(sc.mechanism, np.zeros(3))
    assert poses[0].allclose(Pose(p=(0, 0, 1.0)), 1e-12)
    assert poses[1].allclose(Pose(p=(0, 0, 1.0)), 1e-12)
    assert poses[2].allclose(Pose(p=(0, 0, 0.5)), 1e-12)


def test_fk_revolute_quarter_turn_about_pivot():
    link = Link("arm", 1.0, (0.1, 0.1, 0.1))
    mech = Mechanism([link], [Joint("revolute", -1, (0, 0, 1), Pose(p=(1.0, 2.0, 0.0)))]).validate()
    (P,) = forward_kinematics(mech, [np.pi / 2])
    np.testing.assert_allclose(P.R, oracles.rot_z(np.pi / 2), atol=1e-12)
    np.testing.assert_allclose(P.p, [1.0, 2.0, 0.0], atol=1e-12)


def test_fk_cartpole_translation():
    cart, pole = forward_kinematics(preset("cartpole").mechanism, [0.3, 0.0])
    np.testing.assert_allclose(cart.p, [0.3, 0.0, 0.5], atol=1e-12)
    assert pole.allclose(cart, 1e-12)


def test_fk_dimension_check():
    with pytest.raises(DimensionMismatch):
        forward_kinematics(preset("cartpole").mechanism, [0.0])


# -- forward dynamics against closed forms ---------------------------------------


def test_cartpole_matches_closed_form(rng):
    mech = preset("cartpole").mechanism
    c = cartpole_constants(mech)
    b_x, b_th = mech.joints[0].damping, mech.joints[1].damping
    worst = 0.0
    for _ in range(100):
        x, th = rng.uniform(-2, 2), rng.uniform(-np.pi, np.pi)
        xd, thd = rng.uniform(-3, 3, 2)
        f, tau = rng.uniform(-10, 10), rng.uniform(-1, 1)
        got = forward_dynamics(mech, SimState([x, th], [xd, thd]), [f, tau])
        expect = oracles.cartpole_qdd(x, th, xd, thd, f, tau, b_x=b_x, b_th=b_th, **c)
        worst = max(worst, np.max(np.abs(got - expect)))
    assert worst < 1e-8


def test_pendulum_matches_closed_form(rng):
    mech = pendulum(damping=0.05)
    for _ in range(100):
        th, thd, tau = rng.uniform(-np.pi, np.pi), rng.uniform(-5, 5), rng.uniform(-2, 2)
        got = forward_dynamics(mech, SimState([th], [thd]), [tau])[0]
        assert got == pytest.approx(oracles.pendulum_qdd(th, thd, 0.7, 0.9, 0.03, tau, 0.05), abs=1e-8)


def test_point_mass_pendulum_examples():
    l = 0.8
    mech = pendulum(m=1.0, l=l, I=1e-12)
    assert forward_dynamics(mech, SimState([0.0], [0.0]))[0] == pytest.approx(0.0, abs=1e-15)
    assert forward_dynamics(mech, SimState([np.pi / 2], [0.0]))[0] == pytest.approx(-9.81 / l, rel=1e-9)


def test_mass_matrix_matches_closed_form():
    mech = preset("cartpole").mechanism
    c = cartpole_constants(mech)
    th = 0.7
    M = mass_matrix(mech, [0.1, th])
    expect = [[c["M"] + c["m"], -c["m"] * c["l"] * np.cos(th)],
              [-c["m"] * c["l"] * np.cos(th), c["m"] * c["l"] ** 2 + c["I"]]]
    np.testing.assert_allclose(M, expect, atol=1e-9)


def test_free_body_centre_of_mass_falls_freely(rng):
    mech = preset("free_body").mechanism
    for _ in range(10):
        s = SimState(rng.uniform(-1, 1, 6), rng.uniform(-3, 3, 6))
        np.testing.assert_allclose(forward_dynamics(mech, s)[:3], [0, 0, -9.81], atol=1e-9)


def test_invalid_parameters_raise_singular_inertia():
    mech = preset("cartpole").mechanism
    with pytest.raises(SingularInertia):
        forward_dynamics(mech, SimState([0, 0], [0, 0]), params={"cart.mass": -1.5, "pole.mass": -0.2})


# -- integration -------------------------------------------------------------------


def test_step_examples():
    link = Link("puck", 1.0, (0.1, 0.1, 0.1))
    mech = Mechanism([link], [Joint("prismatic", -1, (1, 0, 0))], gravity=(0, 0, 0)).validate()
    s = step(mech, SimState([0.2], [1.0]), [0.0], 0.05)
    assert s.q[0] == pytest.approx(0.25, abs=1e-15) and s.qd[0] == 1.0
    still = SimState([0.0], [0.0])
    s = step(pendulum(), still, [0.0], 0.05)
    np.testing.assert_array_equal(s.as_vector(), still.as_vector())
    with pytest.raises(ValueError):
        step(mech, still, [0.0], 0.0)


def test_step_is_semi_implicit_euler():
    mech = pendulum()
    s0 = SimState([0.4], [0.3])
    qdd = forward_dynamics(mech, s0)[0]
    s1 = step(mech, s0, [0.0], 0.01)
    assert s1.qd[0] == pytest.approx(0.3 + 0.01 * qdd, abs=1e-14)
    assert s1.q[0] == pytest.approx(0.4 + 0.01 * s1.qd[0], abs=1e-14)


def test_undamped_energy_drift():
    # energies are measured above the resting equilibrium, so "1 %" does not
    # depend on where the potential is zeroed
    mech = pendulum()
    res = rollout(mech, None, [1.2, 0.0], None, 10_001, 1e-3)
    th, thd = res.q[:, 0], res.qd[:, 0]
    E = 0.5 * (0.7 * 0.81 + 0.03) * thd ** 2 + 0.7 * 9.81 * 0.9 * (1 - np.cos(th))
    assert np.max(np.abs(E - E[0])) < 0.01 * E[0]

    cp = preset("cartpole").mechanism.undamped()
    c = cartpole_constants(cp)
    for x0 in ([0.0, 0.6, 0.0, 0.0], [0.0, 2.0, 0.5, 0.0]):
        res = rollout(cp, None, x0, None, 10_001, 1e-3)
        x, th = res.q.T
        xd, thd = res.qd.T
        E = oracles.cartpole_energy(x, th, xd, thd, **c) + c["m"] * 9.81 * c["l"]
        assert np.max(np.abs(E - E[0])) < 0.01 * E[0]
    # the library's potential is measured from z = 0, the rail sits at z = 0.5
    lifted = E[-1] - c["m"] * 9.81 * c["l"] + (c["M"] + c["m"]) * 9.81 * 0.5
    assert total_energy(cp, SimState(res.q[-1], res.qd[-1])) == pytest.approx(lifted, abs=1e-9)


def test_damped_energy_decreases():
    mech = preset("cartpole").mechanism
    res = rollout(mech, None, [0.0, 2.0, 0.5, 0.0], None, 5_001, 1e-3)
    E = np.array([total_energy(mech, SimState(q, qd)) for q, qd in zip(res.q[::100], res.qd[::100])])
    assert E[-1] < E[0]
    assert np.max(E - np.minimum.accumulate(E)) < 1e-3 * abs(E[0])


def test_time_step_convergence():
    mech = pendulum()

    def final_q(dt):
        n = int(round(1.0 / dt))
        return rollout(mech, None, [1.0, 0.0], None, n + 1, dt).q[-1, 0]

    ref = final_q(1e-4)
    e1, e2 = abs(final_q(0.01) - ref), abs(final_q(0.005) - ref)
    assert 1.6 < e1 / e2 < 2.5


def test_rollout_edge_cases():
    mech = preset("cartpole").mechanism
    res = rollout(mech, None, [0, 0, 0, 0], None, 0, 0.05)
    assert res.states.shape == (0, 4) and res.poses.shape == (0, 2, 6)
    with pytest.raises(DimensionMismatch):
        rollout(mech, None, [0, 0, 0], None, 5, 0.05)
    with pytest.raises(DimensionMismatch):
        rollout(mech, None, [0, 0, 0, 0], np.zeros((3, 2)), 5, 0.05)
    with pytest.raises(Diverged):
        rollout(mech, None, [0, 0, 0, 0], np.full((50, 2), 1e9), 50, 0.05)


def test_rollout_is_deterministic(cartpole_scene):
    a, _ = cartpole_scene.simulate(200, 0.05, 4)
    b, _ = cartpole_scene.simulate(200, 0.05, 4)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.poses, b.poses)


def test_rollout_poses_match_forward_kinematics(cartpole_data):
    res, _ = cartpole_data
    assert res.states.shape == (200, 4) and res.dt == 0.05
    np.testing.assert_array_equal(body_pose_series(res.mechanism, res.states), res.poses)
    for t in (0, 57, 199):
        for k, P in enumerate(forward_kinematics(res.mechanism, res.q[t])):
            np.testing.assert_allclose(res.poses[t, k], P.as_vector(), atol=1e-12)


# -- observations ---------------------------------------------------------------


def test_observation_noise_levels(cartpole_data):
    res, _ = cartpole_data
    exact = generate_observations(res)
    np.testing.assert_array_equal(exact.body(1).data, res.poses[:, 1])
    noisy = generate_observations(res, NoiseConfig(0.005, 0.01, 7))
    again = generate_observations(res, NoiseConfig(0.005, 0.01, 7))
    np.testing.assert_array_equal(noisy.body(0).data, again.body(0).data)
    dp = np.abs(noisy.body(1).data[:, 3:] - res.poses[:, 1, 3:])
    assert 0.0035 < dp.mean() < 0.0045  # half-normal mean 0.005 * sqrt(2 / pi)
    angles = [rotation_angle(rotvec_to_matrix(a), rotvec_to_matrix(b))
              for a, b in zip(noisy.body(1).data[:, :3], res.poses[:, 1, :3])]
    assert 0.007 < np.mean(angles) < 0.009  # 0.01 * sqrt(2 / pi)
    assert noisy.controls is not None and noisy.controls.bodies == [0]


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(-0.1, 0.0)


# -- presets and serialisation ------------------------------------------------------


def test_preset_shapes():
    cp = preset("cartpole")
    assert cp.mechanism.n_dof == 2 and [j.type for j in cp.mechanism.joints] == ["prismatic", "revolute"]
    assert len(cp.params.names) == 4
    fb = preset("free_body")
    assert fb.mechanism.base == "floating" and fb.mechanism.n_dof == 6
    with pytest.raises(UnknownPreset):
        preset("unicycle")


def test_double_pendulum_modes_two_to_one():
    mech = preset("double_pendulum").mechanism
    M = mass_matrix(mech, [0.0, 0.0])
    h = 1e-6
    K = np.zeros((2, 2))
    for k in range(2):
        q = np.zeros(2)
        q[k] = h
        K[:, k] = -(M @ forward_dynamics(mech.undamped(), SimState(q, np.zeros(2))))
    w = np.sqrt(np.sort(np.linalg.eigvals(np.linalg.solve(M, K)).real))
    assert w[1] / w[0] == pytest.approx(2.0, rel=0.01)


def test_double_pendulum_is_chaotic():
    sc = preset("double_pendulum")
    x0 = sc.initial_state().as_vector()
    a = rollout(sc.mechanism, None, x0, None, 201, 0.05, sc.substeps).q
    b = rollout(sc.mechanism, None, x0 + np.r_[1e-6, 0, 0, 0], None, 201, 0.05, sc.substeps).q
    assert np.max(np.abs(a[-1] - b[-1])) > 1e-2
    assert np.max(np.abs(a[10] - b[10])) < 1e-4


@given(st.sampled_from(["cartpole", "double_pendulum", "three_link", "free_body"]))
def test_mechanism_json_round_trip(name):
    mech = preset(name).mechanism
    back = Mechanism.from_json(mech.to_json())
    assert back.to_json() == mech.to_json()
    np.testing.assert_array_equal(back.param_vector(), mech.param_vector())


def test_with_params_matches_override(rng):
    mech = preset("cartpole").mechanism
    over = {"pole.mass": 0.35, "cart.mass": 1.4}
    s = SimState([0.1, 0.4], [0.2, -0.3])
    np.testing.assert_array_equal(forward_dynamics(mech, s, params=over),
                                  forward_dynamics(mech.with_params(over), s))
