import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matsplan import evaluation, fitter, scenes


@pytest.fixture(scope="module")
def small_world():
    cfg = scenes.SocialForcesConfig(train_count=30, test_count=6, rng_seed=4)
    train, test = scenes.generate_social_forces(cfg)
    model = fitter.fit(train, fitter.FitConfig(num_modes=2, rng_seed=4))
    return model, test


@given(st.integers(1, 15), st.integers(1, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_fde_of_truth_against_itself_is_zero(horizon, agents, seed):
    traj = np.random.default_rng(seed).normal(size=(horizon, agents, 2))
    np.testing.assert_array_equal(evaluation.final_displacement_error(traj, traj), np.zeros(agents))


def test_fde_uses_last_step_only():
    true = np.zeros((3, 1, 2))
    pred = true.copy()
    pred[0] = 100.0
    pred[-1, 0] = [3.0, 4.0]
    assert evaluation.final_displacement_error(pred, true)[0] == pytest.approx(5.0)


def test_constant_velocity_is_exact_without_interaction():
    cfg = scenes.SocialForcesConfig(train_count=1, test_count=1, repulsion_gain=0.0, rng_seed=1)
    train, _ = scenes.generate_social_forces(cfg)
    w = train[0].windows()[0]
    cv = evaluation.constant_velocity_forecast(w)[:, 1]
    true = w.future[:, 4:6]
    np.testing.assert_allclose(cv, true, atol=1e-9)


def test_normalize_max():
    v = evaluation.normalize_max([0.5, 2.0, 1.0])
    assert v.max() == 1.0
    np.testing.assert_array_equal(evaluation.normalize_max(np.zeros(3)), np.zeros(3))


def test_block_norm_csv_normalizes_each_kind(tmp_path, small_world):
    model, test = small_world
    rows = evaluation.block_norm_rows(model, [test[0].windows()[0]])
    evaluation.write_block_norm_csv(rows, tmp_path / "n.csv")
    data = np.genfromtxt(tmp_path / "n.csv", delimiter=",", names=True, dtype=None, encoding=None)
    for kind in ("A", "B"):
        sel = np.char.startswith(data["block"].astype(str), kind)
        assert data["frobenius_normalized"][sel].max() == 1.0
    # two modes, 12 steps, A_10 and B_1 for the single agent
    assert len(rows) == 2 * 12 * 2


def test_summary_splits_interacting_windows():
    R = evaluation.WindowResult
    results = [R("a", 0, 1.0, 2.0, 3.0, 0, 0, 1.0), R("b", 0, 1.0, 4.0, 9.0, 0, 0, 1.0)]
    s = evaluation.summarize(results, radius=5.0)
    assert s.num_interacting == 1 and s.fde_cv_interacting == 2.0
    assert s.improvement_interacting == pytest.approx(0.5)
    assert s.fde_cv == pytest.approx(3.0)


def test_interaction_window_centres_closest_approach(small_world):
    _, test = small_world
    for scene in test:
        w = evaluation.interaction_window(scene)
        if w is None:
            continue
        d = scenes.min_distance_to_ego(scene.states)
        k = int(np.argmin(d)) - (w.start + len(w.history) - 1)
        assert 2 <= k <= w.horizon - 3


def test_peak_analysis_fields(small_world):
    model, test = small_world
    peaks = evaluation.interaction_peaks(model, test)
    for p in peaks:
        assert 0 <= p.peak_step < 12 and 0 <= p.min_step < 12
        assert p.norms.max() == pytest.approx(p.norms[p.peak_step])
        assert p.first_ratio <= 1.0 + 1e-12 and p.last_ratio <= 1.0 + 1e-12
