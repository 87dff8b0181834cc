import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from crop import envs
from crop.envs import (
    BANDIT,
    BanditBehaviorPolicy,
    LinearPolicy,
    PointMassEnv,
    RandomMdpSpec,
    ZeroPolicy,
    bandit_reward,
    bandit_reward_mean,
    collect_bandit_dataset,
    make_env,
    make_random_mdp,
    point_mass_step,
    run_episodes,
)


def test_bandit_mean_at_point_one():
    expected = 0.4 / math.sqrt(2 * math.pi * 0.2) + math.exp(-0.16 / 1.0) / math.sqrt(2 * math.pi * 0.5)
    assert bandit_reward_mean(0.1) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.8376, abs=1e-4)


def test_density_peak_value():
    for x, y in [(0.1, 0.2), (-0.3, 0.5), (0.0, 2.0)]:
        assert envs.normal_density(x, x, y) == pytest.approx(1 / math.sqrt(2 * math.pi * y))


def test_bandit_noise_variance():
    rng = np.random.default_rng(0)
    draws = bandit_reward(np.full(100_000, 0.3), rng)
    var = draws.var(ddof=1)
    se = 0.01 * math.sqrt(2 / (len(draws) - 1))
    assert abs(var - 0.01) < 3 * se
    assert draws.mean() == pytest.approx(bandit_reward_mean(0.3), abs=3 * 0.1 / math.sqrt(len(draws)))


def test_bandit_rejects_out_of_box_actions():
    with pytest.raises(ValueError):
        bandit_reward_mean(1.5)
    with pytest.raises(ValueError):
        bandit_reward(np.array([-1.01]), np.random.default_rng(0))


def test_behavior_density_integrates_to_one():
    total, _ = integrate.quad(BanditBehaviorPolicy().density, -1, 1)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_bandit_dataset_mean_matches_truncated_moment():
    pol = BanditBehaviorPolicy()
    moment, _ = integrate.quad(lambda a: a * pol.density(a), -1, 1)
    second, _ = integrate.quad(lambda a: a * a * pol.density(a), -1, 1)
    data = collect_bandit_dataset(10000, 0)
    se = math.sqrt((second - moment ** 2) / len(data))
    assert abs(data.actions.mean() - moment) < 3 * se
    assert pol.action_mean == pytest.approx(moment, abs=1e-9)
    assert np.all(np.abs(data.actions) <= 1.0)
    again = collect_bandit_dataset(10000, 0)
    np.testing.assert_array_equal(again.actions, data.actions)
    np.testing.assert_array_equal(again.rewards, data.rewards)
    with pytest.raises(ValueError):
        collect_bandit_dataset(0, 0)


def test_sampler_histogram_matches_density():
    pol = BanditBehaviorPolicy()
    samples = pol.sample(1_000_000, np.random.default_rng(1))
    hist, edges = np.histogram(samples, bins=50, range=(-1, 1), density=True)
    centers = 0.5 * (edges[1:] + edges[:-1])
    assert np.max(np.abs(hist - pol.density(centers))) < 0.02


def test_reward_curve_has_interior_maximum():
    grid = np.linspace(-1, 1, 200_001)
    r = BANDIT.reward_mean(grid)
    i = int(np.argmax(r))
    assert 0 < i < len(grid) - 1
    assert np.max(np.abs(np.diff(r, 2))) < 1e-8  # smooth on the fine grid


def test_random_mdp_rows_and_seed():
    spec = RandomMdpSpec(5, 3, seed=7)
    a, b = make_random_mdp(spec), make_random_mdp(spec)
    np.testing.assert_array_equal(a.transition, b.transition)
    np.testing.assert_allclose(a.transition.sum(-1), 1.0, atol=1e-12)
    assert np.all((a.reward >= -1) & (a.reward <= 1))
    np.testing.assert_allclose(a.mu0, 0.2)
    assert not np.array_equal(make_random_mdp(replace(spec, seed=8)).transition, a.transition)


def test_random_mdp_high_concentration_is_near_uniform():
    mdp = make_random_mdp(RandomMdpSpec(6, 2, concentration=1e6, seed=0))
    assert np.max(np.abs(mdp.transition - 1 / 6)) < 1e-2


def test_point_mass_trivial_cases():
    env = replace(PointMassEnv(), noise=0.0)
    nxt, r, term = point_mass_step([0.5, 0.0], [0.0], env=env)
    np.testing.assert_array_equal(nxt, [0.5, 0.0])
    assert not term
    _, r, _ = point_mass_step([0.0, 0.0], [0.0], env=env)
    assert r == 0.0
    _, _, term = point_mass_step([0.0, 0.0], [0.0], env=env, t=env.horizon - 1)
    assert term


def test_point_mass_reward_and_clamp_flag():
    env = PointMassEnv()
    res = env.step(np.array([1.0, 0.0]), np.array([3.0]))
    assert res.clipped
    assert res.reward == pytest.approx(-1.0 - env.action_cost)
    batch = env.step(np.zeros((3, 2)), np.array([[0.5], [-2.0], [1.0]]))
    assert batch.clipped.tolist() == [False, True, False]
    assert np.all(np.abs(batch.next_state) <= env.limit)


def test_point_mass_noise_statistics():
    env = PointMassEnv()
    rng = np.random.default_rng(0)
    s = np.zeros((20000, 2))
    nxt = env.step(s, np.zeros((20000, 1)), rng).next_state
    assert nxt.std(axis=0) == pytest.approx([env.noise] * 2, rel=0.03)


def test_lqr_value_matches_noise_free_rollout():
    env = replace(PointMassEnv(), noise=0.0)
    starts = np.array([[0.3, 0.0], [-0.2, 0.1], [0.05, -0.05]])  # small enough never to saturate
    rets = run_episodes(env, LinearPolicy(env), starts, np.random.default_rng(0))
    np.testing.assert_allclose(rets, env.lqr_value(starts), rtol=1e-10)


def test_lqr_beats_perturbed_gains():
    env = replace(PointMassEnv(), noise=0.0)
    starts = np.array([[0.3, 0.0], [-0.2, 0.1]])
    best = run_episodes(env, LinearPolicy(env), starts, None).sum()
    for scale in (0.8, 0.95, 1.05, 1.2):
        assert run_episodes(env, LinearPolicy(env, scale), starts, None).sum() < best


def test_reference_returns_ordering():
    env = PointMassEnv()
    ref = envs.reference_returns(env, env.reset(np.random.default_rng(0), 100))
    assert ref.zero < ref.lqr <= ref.ceiling + 1e-9
    assert ref.normalize(ref.zero) == 0.0 and ref.normalize(ref.lqr) == 1.0
    # the default behavior policy sits in the mediocre band
    beh = run_episodes(env, LinearPolicy(env, 0.1, 0.4), env.reset(np.random.default_rng(0), 100),
                       np.random.default_rng(1)).mean()
    assert 0.3 <= ref.normalize(beh) <= 0.6


def test_point_mass_dataset_layout():
    env = PointMassEnv()
    data = envs.collect_point_mass_dataset(env, ZeroPolicy(), 3, 0)
    assert len(data) == 3 * env.horizon
    assert not data.terminals.any()
    # episodes run side by side, so rows are time-major
    np.testing.assert_array_equal(data.states[3:], data.next_states[:-3])


def test_make_env_ids():
    assert make_env("bandit1d") is BANDIT
    assert isinstance(make_env("pointmass"), PointMassEnv)
    mdp = make_env("random-mdp:3:4:2")
    assert mdp.transition.shape == (4, 2, 4)
    for bad in ("cartpole", "random-mdp:x:1:1", "random-mdp:1:2"):
        with pytest.raises(ValueError, match="valid ids"):
            make_env(bad)


def test_bandit_std_reading():
    bandit, behavior = envs.bandit_pair("std")
    expected = 0.4 / math.sqrt(2 * math.pi * 0.04) + math.exp(-0.16 / 0.5) / math.sqrt(2 * math.pi * 0.25)
    assert bandit.reward_mean(0.1) == pytest.approx(expected, abs=1e-12)
    assert behavior.var == 0.25 and behavior.mode == 0.1
    total, _ = integrate.quad(behavior.density, -1, 1)
    assert total == pytest.approx(1.0, abs=1e-6)
    assert envs.bandit_pair("variance") == (BANDIT, BanditBehaviorPolicy())
    std_data = collect_bandit_dataset(2000, 0, "std")
    assert std_data.actions.std() < collect_bandit_dataset(2000, 0).actions.std()
    with pytest.raises(ValueError):
        envs.bandit_pair("precision")
