import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from artik.errors import ConfigError, DegenerateRotation, DegenerateTranslation
from artik.joints import (Prismatic, RansacConfig, Revolute, Static, best_fit, canonical_revolute,
                          fit_prismatic_pair, fit_revolute_pair, fit_static, invert_model,
                          model_error, model_from_json, model_to_json, project_array,
                          project_to_joint, ransac_fit, reconstruct)
from artik.se3 import Pose, compose, rot_z, translation

from oracles import homogeneous, rodrigues


def revolute_sequence(axis, pivot, q, origin=Pose()):
    """Relative poses of a body rotating about ``axis`` through ``pivot``, built from 4x4 matrices."""
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    pivot = np.asarray(pivot, float)
    T0 = origin.matrix()
    out = []
    for a in q:
        R = rodrigues(axis, a)
        M = homogeneous(R, pivot - R @ pivot) @ T0
        out.append(Pose.from_matrix(M[:3, :3], M[:3, 3]).as_vector())
    return np.array(out)


# -- pair fits ----------------------------------------------------------------


def test_revolute_pair_pure_rotation():
    s, c, q = fit_revolute_pair(Pose((0, 0, 0.2)), Pose((0, 0, 0.3)))
    np.testing.assert_allclose(s, [0, 0, 1], atol=1e-9)
    np.testing.assert_allclose(c, [0, 0, 0], atol=1e-9)
    assert q == pytest.approx(0.1, abs=1e-9)


def test_revolute_pair_chord_offset_pivot():
    th = 0.1
    a = Pose((0, 0, 0), (0, 0, 0))
    b = Pose((0, 0, th), (1 - np.cos(th), -np.sin(th), 0))
    s, c, q = fit_revolute_pair(a, b)
    np.testing.assert_allclose(s, [0, 0, 1], atol=1e-9)
    # pivot + (dr x dp)/|dr|^2 evaluated by hand
    expect = np.array([np.sin(th) / th, (1 - np.cos(th)) / th, 0.0])
    np.testing.assert_allclose(c, expect, atol=1e-12)
    np.testing.assert_allclose(c, [0.9983, 0.0500, 0.0], atol=1e-4)
    assert q == pytest.approx(0.1, abs=1e-9)


def test_revolute_pair_degenerate():
    P = Pose((0.1, 0.2, 0.3), (1, 2, 3))
    with pytest.raises(DegenerateRotation):
        fit_revolute_pair(P, P)


def test_prismatic_pair_examples():
    s, q = fit_prismatic_pair(Pose(), translation(0.05, 0, 0))
    np.testing.assert_allclose(s, [1, 0, 0], atol=1e-9)
    assert q == pytest.approx(0.05, abs=1e-9)
    s, q = fit_prismatic_pair(Pose(), translation(0.03, 0.04, 0))
    np.testing.assert_allclose(s, [0.6, 0.8, 0], atol=1e-9)
    assert q == pytest.approx(0.05, abs=1e-9)
    with pytest.raises(DegenerateTranslation):
        fit_prismatic_pair(translation(1, 1, 1), translation(1, 1, 1))


# -- static -------------------------------------------------------------------


def test_fit_static_examples():
    P = Pose((0.3, -0.1, 0.2), (1, 2, 3))
    assert fit_static([P, P, P]).allclose(P, 0.0)
    got = fit_static([translation(0, 0, 0), translation(0.02, 0, 0)])
    assert got.allclose(translation(0.01, 0, 0), 1e-15)


def test_fit_static_recovers_generator_mount(cartpole_scene):
    from artik.dynamics import Joint, Link, Mechanism, rollout
    from artik.se3 import relative_arrays

    mount = Pose((0.1, 0.4, -0.2), (0.05, 0.3, -0.1))
    base = Link("base", 1.0, (0.1, 0.1, 0.1))
    tip = Link("tip", 0.5, (0.05, 0.05, 0.05))
    mech = Mechanism([base, tip], [Joint("revolute", -1, (0, 1, 0)), Joint("static", 0, mount=mount)])
    res = rollout(mech, None, np.array([0.7, 0.5]), None, 50, 0.02)
    rel = relative_arrays(res.poses[:, 0], res.poses[:, 1])
    assert fit_static(rel).allclose(mount, 1e-9)


# -- projection ---------------------------------------------------------------


def test_project_examples():
    z = Revolute((0, 0, 1), (0, 0, 0))
    q, recon, res = project_to_joint(z, rot_z(0.7))
    assert q == pytest.approx(0.7, abs=1e-9)
    assert res == pytest.approx(0.0, abs=1e-9)
    P = Pose((0.2, 0.1, 0.0), (1, 0, 0))
    q, _, res = project_to_joint(Static(P), P)
    assert q == 0.0 and res == pytest.approx(0.0, abs=1e-12)
    off = compose(translation(0, 0, 0.01), rot_z(0.7))
    q, recon, res = project_to_joint(z, off)
    assert q == pytest.approx(0.7, abs=1e-6)
    assert res == pytest.approx(0.01, abs=1e-9)


def test_model_error_examples():
    q = 0.8 * np.sin(np.linspace(0, 6, 200))
    seq = revolute_sequence((0, 1, 0), (0.0, 0.0, 0.5), q)
    true = canonical_revolute((0, 1, 0), (0, 0, 0.5), Pose.from_vector(seq[0]))
    cost, _ = model_error(true, seq)
    assert cost < 1e-9
    # amplitude > 0.1 rad with a 0.5 m arm cannot be a static attachment
    cost_static, _ = model_error(Static(fit_static(seq)), seq)
    assert cost_static > RansacConfig().inlier_threshold
    one = seq[:1]
    assert model_error(Static(fit_static(one)), one)[0] == pytest.approx(0.0, abs=1e-12)


def test_model_json_round_trip():
    models = [Revolute((0, 0, 1), (1, 2, 0), Pose((0.1, 0, 0), (0, 0, 1))),
              Prismatic((1, 0, 0), Pose((0, 0.2, 0), (0, 1, 0))), Static(Pose((0, 0, 0.3), (1, 1, 1)))]
    for m in models:
        back = model_from_json(model_to_json(m))
        assert type(back) is type(m)
        assert model_to_json(back) == model_to_json(m)


# -- RANSAC -------------------------------------------------------------------


def test_ransac_noiseless_revolute():
    q = 1.2 * np.sin(np.linspace(0, 8, 200))
    seq = revolute_sequence((0, 1, 0), (0.2, 0.0, -0.3), q, Pose((0, 0, 0.4), (0.5, 0, 0)))
    fit = ransac_fit(seq, "revolute")
    assert fit is not None and fit.type == "revolute"
    assert fit.cost < 1e-6
    assert fit.inlier_count == 199
    np.testing.assert_allclose(abs(fit.model.axis @ [0, 1, 0]), 1.0, atol=1e-9)


def test_ransac_constant_sequence():
    P = Pose((0.1, 0.2, 0.3), (0.4, 0.5, 0.6))
    seq = np.repeat(P.as_vector()[None], 30, axis=0)
    fit = ransac_fit(seq, "static")
    assert fit is not None and fit.cost == pytest.approx(0.0, abs=1e-12)
    assert ransac_fit(seq, "revolute") is None
    assert ransac_fit(seq, "prismatic") is None


def test_ransac_pure_rotation_rejects_prismatic():
    q = np.linspace(0, 2.0, 100)
    seq = revolute_sequence((0, 0, 1), (0.5, 0, 0), q)
    rev = ransac_fit(seq, "revolute")
    pri = ransac_fit(seq, "prismatic")
    assert rev is not None
    assert pri is None or pri.cost > 100 * rev.cost


def test_ransac_prismatic_recovers_axis_and_series():
    axis = np.array([0.6, 0.0, 0.8])
    q = 0.3 * np.sin(np.linspace(0, 5, 120))
    origin = Pose((0.2, 0.1, 0.0), (0.1, 0.0, 0.0))
    seq = Prismatic(axis, origin).pose_array(q)
    fit = ransac_fit(seq, "prismatic")
    assert fit is not None and fit.cost < 1e-9
    sign = np.sign(fit.model.axis @ axis)
    np.testing.assert_allclose(sign * fit.model.axis, axis, atol=1e-9)
    np.testing.assert_allclose(np.diff(sign * fit.q_series), np.diff(q), atol=1e-9)


def test_ransac_deterministic_and_thread_independent():
    rng = np.random.default_rng(5)
    q = np.cumsum(rng.normal(0, 0.05, 150))
    seq = revolute_sequence((1, 1, 0), (0, 0.1, 0.2), q)
    seq[:, 3:] += rng.normal(0, 0.002, (150, 3))
    a = ransac_fit(seq, "revolute", RansacConfig(inlier_threshold=0.02, seed=3))
    b = ransac_fit(seq, "revolute", RansacConfig(inlier_threshold=0.02, seed=3, threads=4))
    assert model_to_json(a.model) == model_to_json(b.model)
    assert a.cost == b.cost and a.inlier_count == b.inlier_count


def test_ransac_config_validation():
    with pytest.raises(ConfigError):
        RansacConfig(iterations=0).validate()
    with pytest.raises(ConfigError):
        RansacConfig(inlier_threshold=0).validate()
    with pytest.raises(ConfigError):
        ransac_fit(np.zeros((3, 6)), "helical")
    thr = RansacConfig.for_noise(0.005, 0.01).inlier_threshold
    assert thr > RansacConfig().inlier_threshold


def test_best_fit_prefers_simplest_exact_model():
    seq = np.repeat(Pose((0, 0, 0.1), (1, 0, 0)).as_vector()[None], 10, axis=0)
    assert best_fit(seq).type == "static"


def test_invert_model_preserves_error():
    q = 0.9 * np.sin(np.linspace(0, 6, 100))
    seq = revolute_sequence((0, 1, 0), (0.3, 0, 0.1), q, Pose((0.2, 0, 0.1), (0.4, 0.0, -0.2)))
    fit = ransac_fit(seq, "revolute")
    inv_seq = np.array([Pose.from_vector(s).matrix() for s in seq])
    inv_seq = np.array([Pose.from_matrix(np.linalg.inv(M)[:3, :3], np.linalg.inv(M)[:3, 3]).as_vector()
                        for M in inv_seq])
    e_fwd, _ = model_error(fit.model, seq)
    e_inv, _ = model_error(invert_model(fit.model), inv_seq)
    assert abs(e_fwd - e_inv) < 1e-9
    S = Static(Pose((0.3, -0.2, 0.1), (1, 2, 3)))
    assert invert_model(invert_model(S)).pose.allclose(S.pose, 1e-12)


def test_reconstruct_matches_model():
    m = Revolute((0, 0, 1), (0.5, 0, 0), Pose((0, 0, 0), (0, 0, 0)))
    arr = reconstruct(m, np.array([0.0, np.pi / 2]))
    np.testing.assert_allclose(arr[1, 3:], [0.5, -0.5, 0.0], atol=1e-12)


unit = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 0.3).map(lambda v: np.array(v) / np.linalg.norm(v))


@given(unit, st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5)),
       st.floats(0.3, 1.5), st.integers(0, 1000))
def test_ransac_revolute_recovers_random_axes(axis, pivot, amp, seed):
    q = amp * np.sin(np.linspace(0, 7, 80) + seed)
    origin = Pose(np.random.default_rng(seed).normal(size=3) * 0.5, (0.3, -0.2, 0.1))
    seq = revolute_sequence(axis, pivot, q, origin)
    fit = ransac_fit(seq, "revolute", RansacConfig(iterations=50))
    assert fit is not None
    assert abs(fit.model.axis @ axis) == pytest.approx(1.0, abs=1e-8)
    assert fit.cost < 1e-6
    # the recovered series differs from the truth only by an offset and sign
    dq = np.diff(fit.q_series)
    assert min(np.abs(dq - np.diff(q)).max(), np.abs(dq + np.diff(q)).max()) < 1e-6


@given(unit, st.floats(-1, 1), st.floats(-1, 1))
def test_project_prismatic_is_exact_on_manifold(axis, q0, q1):
    m = Prismatic(axis, Pose((0.1, 0.2, 0.3), (0, 0, 1)))
    arr = m.pose_array(np.array([q0, q1]))
    q, recon, res = project_array(m, arr)
    np.testing.assert_allclose(q, [q0, q1], atol=1e-12)
    assert res.max() < 1e-12
