import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matsplan import dynamics as dyn
from matsplan import scenes as S
from matsplan.dynamics import AgentClass


@pytest.fixture(scope="module")
def small_cfg():
    return S.SocialForcesConfig(train_count=12, test_count=4, rng_seed=5)


@pytest.fixture(scope="module")
def small_data(small_cfg):
    return S.generate_social_forces(small_cfg)


def _vehicle_scene():
    rng = np.random.default_rng(0)
    states = rng.normal(size=(6, 3, 4))
    return S.Scene(0.25, ("ego", "car", "ped"), (AgentClass.VEHICLE, AgentClass.VEHICLE, AgentClass.PEDESTRIAN),
                   states, rng.normal(size=(5, 2)), 2, 2, "v")


def test_config_validation():
    with pytest.raises(ValueError):
        S.SocialForcesConfig(v0_range=(12.0, 4.0))
    with pytest.raises(ValueError):
        S.SocialForcesConfig(train_count=0)


def test_defaults_give_thirty_one_states_and_eleven_windows(small_data):
    train, test = small_data
    assert len(train) == 12 and len(test) == 4
    scene = train[0]
    assert scene.states.shape == (31, 2, 4)
    windows = scene.windows()
    assert len(windows) == 11
    w = windows[0]
    assert w.history.shape == (9, 8) and w.future.shape == (12, 8) and w.ego_controls.shape == (12, 2)
    np.testing.assert_array_equal(w.future[0], scene.joint(9))


def test_far_particles_move_at_constant_velocity():
    ego = np.array([0.0, 0.0, 1.0, 0.0])
    agent = np.array([150.0, 0.0, -4.0, 0.0])
    controls = np.zeros((12, 2))
    states = S.simulate_particles(ego, agent, controls, 0.1, 10.0)
    cv = agent[:2] + agent[2:] * 1.2
    assert np.linalg.norm(states[-1, 1, :2] - cv) < 1e-3


def test_zero_gain_is_exactly_constant_velocity():
    agent = np.array([3.0, 1.0, -4.0, 0.5])
    states = S.simulate_particles(np.zeros(4), agent, np.zeros((30, 2)), 0.1, 0.0)
    k = np.arange(31)[:, None]
    np.testing.assert_allclose(states[:, 1, :2], agent[:2] + k * 0.1 * agent[2:], atol=1e-12)
    np.testing.assert_array_equal(states[:, 1, 2:], np.broadcast_to(agent[2:], (31, 2)))


def test_head_on_approach_slows_the_agent():
    ego = np.array([0.0, 0.0, 0.0, 0.0])
    agent = np.array([6.0, 0.0, -4.0, 0.0])
    states = S.simulate_particles(ego, agent, np.zeros((10, 2)), 0.1, 10.0)
    closing = -states[:, 1, 2]
    assert np.all(np.diff(closing) < 0)


def test_repulsion_rejects_coincident_particles():
    with pytest.raises(S.DegenerateScene):
        S.repulsion([1.0, 1.0], [1.0, 1.0 + 1e-8], 10.0)


def test_generation_is_deterministic(tmp_path, small_cfg, small_data):
    again = S.generate_social_forces(small_cfg)
    for a, b in zip(small_data[0] + small_data[1], again[0] + again[1]):
        assert S.dumps_scene(a) == S.dumps_scene(b)
    m1 = S.write_dataset(tmp_path / "a", {"train": small_data[0]}).read_bytes()
    m2 = S.write_dataset(tmp_path / "b", {"train": again[0]}).read_bytes()
    assert m1 == m2


def test_train_and_test_disjoint(small_data):
    train, test = small_data
    hashes = {S.dumps_scene(s) for s in train}
    assert not hashes & {S.dumps_scene(s) for s in test}


def test_dataset_round_trip(tmp_path, small_data):
    manifest = S.write_dataset(tmp_path, {"train": small_data[0], "test": small_data[1]}, {"seed": 5})
    back = S.read_dataset(manifest, "test")
    for a, b in zip(small_data[1], back):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.ego_controls, b.ego_controls)
    doc = json.loads(manifest.read_text())
    assert len(doc["splits"]["train"]) == 12


def test_csv_export_has_header(tmp_path, small_data):
    path = tmp_path / "t.csv"
    S.export_csv(small_data[1][:1], path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("scene_id,t_s,agent_id")
    assert len(lines) == 1 + 31 * 2


def test_rotation_identity_and_full_turn(small_data):
    scene = small_data[0][0]
    same = S.rotate_scene(scene, 0.0)
    np.testing.assert_array_equal(same.states, scene.states)
    full = S.rotate_scene(scene, 2 * np.pi)
    np.testing.assert_allclose(full.states, scene.states, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-7, 7), b=st.floats(-7, 7))
def test_rotation_composes_and_preserves_distances(a, b):
    scene = _vehicle_scene()
    ab = S.rotate_scene(S.rotate_scene(scene, a), b)
    direct = S.rotate_scene(scene, a + b)
    np.testing.assert_allclose(ab.states[..., :2], direct.states[..., :2], atol=1e-12)
    np.testing.assert_allclose(ab.states[:, 2, 2:], direct.states[:, 2, 2:], atol=1e-12)
    dh = dyn.wrap_angle(ab.states[:, :2, 2] - direct.states[:, :2, 2])
    np.testing.assert_allclose(dh, 0.0, atol=1e-12)
    d0 = np.linalg.norm(scene.states[:, :, None, :2] - scene.states[:, None, :, :2], axis=-1)
    d1 = np.linalg.norm(direct.states[:, :, None, :2] - direct.states[:, None, :, :2], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-12)
    # vehicle speed and controls are rotation invariant
    np.testing.assert_array_equal(direct.states[:, :2, 3], scene.states[:, :2, 3])
    np.testing.assert_array_equal(direct.ego_controls, scene.ego_controls)


def test_particle_rotation_keeps_dynamics_consistent(small_data):
    scene = S.rotate_scene(small_data[0][1], 0.8)
    for k in range(scene.num_steps - 1):
        nxt = dyn.double_integrator_step(scene.states[k, 0], scene.ego_controls[k], scene.dt)
        np.testing.assert_allclose(nxt, scene.states[k + 1, 0], atol=1e-11)


def test_augment_count_and_validity(small_data):
    out = S.augment(small_data[1])
    assert len(out) == 24 * len(small_data[1])
    assert all(isinstance(s, S.Scene) and len(s.ego_controls) == s.num_steps - 1 for s in out)


def test_scene_invariants_enforced():
    with pytest.raises(ValueError):
        S.Scene(0.1, ("a",), (AgentClass.PARTICLE,), np.zeros((3, 1, 4)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        S.Scene(0.1, ("a",), (AgentClass.PARTICLE,), np.full((3, 1, 4), np.nan), np.zeros((2, 2)))


def test_intersection_layout_and_determinism():
    a = S.build_intersection(S.IntersectionConfig(jitter=0.5, seed=3))
    b = S.build_intersection(S.IntersectionConfig(jitter=0.5, seed=3))
    np.testing.assert_array_equal(a.scene.states, b.scene.states)
    assert a.scene.num_agents == 11  # ego + 10 scripted agents
    assert a.classes[0] is AgentClass.VEHICLE
    fut_a, _ = a.scripted_future(a.scene.states[0, 1:], 1, 12)
    fut_b, _ = b.scripted_future(b.scene.states[0, 1:], 1, 12)
    np.testing.assert_array_equal(fut_a, fut_b)


def test_intersection_lead_modes_differ_in_speed():
    sc = S.build_intersection()
    start = sc.scene.states[0, 1:]
    speeds = [sc.scripted_future(start, z, 12)[0][-1, 0, 3] for z in range(3)]
    assert speeds[1] < speeds[0] < speeds[2]
    assert speeds[1] == pytest.approx(3.0)


def test_intersection_without_agents():
    sc = S.build_intersection(S.IntersectionConfig(lead_vehicle=False, n_oncoming=0, n_cross=0, n_pedestrians=0))
    assert sc.scene.num_agents == 1 and sc.agents == []
