import numpy as np
import pytest

from crop import nn
from crop import world_model as wm
from crop.envs import BANDIT, BanditBehaviorPolicy, collect_bandit_dataset, collect_discrete_bandit_dataset
from crop.mdp import BoxSpace, OfflineDataset, estimate_empirical_mdp
from builders import constant_ensemble

SMALL = dict(hidden_units=64, n_layers=2, lr_schedule="cosine")


def linear_system(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, 2))
    a = rng.uniform(-1, 1, size=(n, 2))
    space = BoxSpace((-2.0, -2.0), (2.0, 2.0), (-1.0, -1.0), (1.0, 1.0))
    return OfflineDataset(s, a, np.zeros(n), s + 0.1 * a, np.zeros(n, bool), space)


@pytest.fixture(scope="module")
def bandit():
    return collect_bandit_dataset(10000, 0)


@pytest.fixture(scope="module")
def bandit_models(bandit):
    """One small reward network per beta, all on the same seed schedule."""
    out = {}
    for beta in (0.0, 0.1, 1.0, 10.0):
        cfg = wm.ModelConfig(beta=beta, max_epochs=15, patience=15, **SMALL)
        out[beta] = wm.train_reward(bandit, cfg)[0]
    return out


def test_transition_learns_linear_system():
    cfg = wm.ModelConfig(max_epochs=60, patience=60, learning_rate=3e-3, **SMALL)
    model, fit = wm.train_transition(linear_system(10000, 0), cfg)
    test = linear_system(1000, 1)
    head = model.predict(test.states, test.actions)
    pred = test.states + head.mean[0]
    assert np.abs(pred - test.next_states).mean() < 0.01
    assert np.all(head.log_std < -2)
    assert fit.train_curve.shape == fit.valid_curve.shape == (60, 1)


def test_split_needs_a_validation_sample():
    tiny = linear_system(1, 0)
    with pytest.raises(ValueError, match="cannot be split"):
        wm.train_transition(tiny, wm.ModelConfig(max_epochs=1))
    with pytest.raises(ValueError, match="continuous"):
        wm.train_reward(collect_discrete_bandit_dataset(50, 3, 0)[1], wm.ModelConfig(max_epochs=1))


def test_training_is_deterministic():
    data = linear_system(2000, 0)
    cfg = wm.ModelConfig(max_epochs=3, hidden_units=16, n_layers=2)
    a = wm.train_transition(data, cfg)[1]
    b = wm.train_transition(data, cfg)[1]
    np.testing.assert_array_equal(a.best_valid, b.best_valid)
    np.testing.assert_array_equal(a.params.data, b.params.data)


def test_member_results_do_not_depend_on_company():
    data = linear_system(2000, 0)
    cfg = wm.ModelConfig(max_epochs=2, hidden_units=16, n_layers=2)
    alone = wm.train_transition(data, cfg, members=[2])[0]
    together = wm.train_transition(data, cfg, members=[0, 1, 2])[0]
    np.testing.assert_allclose(wm.member_params(together.params, 2).data, alone.params.data, rtol=1e-5, atol=1e-6)


def test_unpenalised_reward_fits_true_curve(bandit_models):
    a = BanditBehaviorPolicy().sample(2000, np.random.default_rng(9))
    pred = bandit_models[0.0].predict(np.zeros((len(a), 1)), a[:, None])[0]
    assert np.mean((pred - BANDIT.reward_mean(a)) ** 2) < 0.02


def test_grid_means_decrease_with_beta(bandit_models):
    grid = np.linspace(-1, 1, 201)[:, None]
    means = [bandit_models[b].predict(np.zeros_like(grid), grid)[0].mean() for b in (0.0, 0.1, 1.0, 10.0)]
    assert all(m1 >= m2 for m1, m2 in zip(means, means[1:]))


def test_reward_validation():
    with pytest.raises(ValueError):
        wm.ModelConfig(beta=-1.0)
    with pytest.raises(ValueError):
        wm.ModelConfig(n_members=3, n_elites=5)
    with pytest.raises(ValueError):
        wm.ModelConfig(lr_schedule="step")
    with pytest.raises(ValueError):
        wm.ModelConfig(action_sampling="sobol")


def test_reward_objective_matches_direct_formula():
    rng = np.random.default_rng(0)
    pred, r, rand = rng.normal(size=(2, 5)), rng.normal(size=(2, 5)), rng.normal(size=(2, 5, 3))
    losses, _, _ = wm.reward_objective(pred, r, rand, 0.7)
    direct = [0.5 * np.mean((pred[e] - r[e]) ** 2) + 0.7 * rand[e].mean() for e in range(2)]
    np.testing.assert_allclose(losses, direct)


def test_embedded_discrete_bandit_matches_closed_form():
    """Per visited cell the trained reward approaches R_bar - beta * mu / pi_bar."""
    _, tab = collect_discrete_bandit_dataset(10000, 41, 0)
    emp = estimate_empirical_mdp(tab)
    data = tab.one_hot()
    eye = np.eye(41)
    for beta in (0.1, 1.0):
        cfg = wm.ModelConfig(beta=beta, max_epochs=40, patience=40, keep_best=False, **SMALL)
        model, _ = wm.train_reward(data, cfg, random_actions=eye)
        pred = model.predict(np.ones((41, 1)), eye)[0]
        target = emp.r_bar[0] - beta * (1 / 41) / emp.pi_bar.probs[0]
        visited = emp.counts[0] > 0
        assert np.max(np.abs(pred - target)[visited]) < 0.1


def test_stratified_actions_cover_every_stratum():
    space = BoxSpace((0.0,), (0.0,), (-1.0, 0.0), (1.0, 2.0))
    draws = wm.stratified_actions(space, (500, 8), np.random.default_rng(0))
    assert draws.shape == (500, 8, 2)
    for d, (lo, hi) in enumerate([(-1.0, 1.0), (0.0, 2.0)]):
        cells = np.floor((draws[..., d] - lo) / (hi - lo) * 8).astype(int)
        assert np.all(np.sort(cells, axis=1) == np.arange(8))
    # marginally uniform: mean of a uniform on each interval
    np.testing.assert_allclose(draws.reshape(-1, 2).mean(axis=0), [0.0, 1.0], atol=0.02)


def test_elite_selection():
    losses = [3.0, 0.5, 9.0, 1.0, 2.0, 0.1, 7.0]
    assert wm.select_elites(losses, 5) == [5, 1, 3, 4, 0]
    assert sorted(wm.select_elites([5.0, 1.0], 2)) == [0, 1]
    losses[5] = 1e30
    assert 5 not in wm.select_elites(losses, 5)


def test_relabel_with_constant_models():
    data = linear_system(50, 0)
    ens = constant_ensemble([2.5, 2.5, 2.5], action_dim=2)
    out = wm.relabel_rewards(data, ens)
    assert len(out) == len(data)
    np.testing.assert_allclose(out.rewards, 2.5)
    np.testing.assert_array_equal(out.states, data.states)
    np.testing.assert_array_equal(out.next_states, data.next_states)


def test_relabel_is_conservative(bandit, bandit_models):
    model = bandit_models[10.0]
    ens = wm.ModelEnsemble(model, None, np.zeros(1), [0])
    assert wm.relabel_rewards(bandit, ens).rewards.mean() <= bandit.rewards.mean()


def test_model_step_reward_is_elite_mean():
    ens = constant_ensemble([1.0, 2.0, 6.0, 100.0], deltas=[0.0, 1.0, 2.0, 3.0], elites=[0, 1, 2])
    _, reward, _ = wm.model_step(ens, np.zeros(2), np.zeros(1), np.random.default_rng(0))
    assert reward == pytest.approx(3.0)


def test_model_step_single_elite():
    ens = constant_ensemble([1.0, 2.0, 3.0], deltas=[0.0, 1.0, 2.0], elites=[1])
    nxt, _, member = wm.model_step(ens, np.zeros((50, 2)), np.zeros((50, 1)), np.random.default_rng(0))
    assert np.all(member == 1)
    np.testing.assert_allclose(nxt, 1.0, atol=1e-3)


def test_model_step_member_frequencies():
    ens = constant_ensemble([0.0] * 7, deltas=np.arange(7.0), elites=[0, 2, 3, 5, 6])
    n = 10000
    nxt, _, member = wm.model_step(ens, np.zeros((n, 2)), np.zeros((n, 1)), np.random.default_rng(0))
    # the next state reveals which member produced it
    np.testing.assert_array_equal(np.round(nxt[:, 0]).astype(int), member)
    counts = np.bincount(member, minlength=7)
    assert counts[[1, 4]].sum() == 0
    p = 1 / 5
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts[[0, 2, 3, 5, 6]] - n * p) < 3 * sigma)


def test_ensemble_checkpoint_resume(tmp_path):
    data = linear_system(1000, 0)
    cfg = wm.ModelConfig(n_members=3, n_elites=2, max_epochs=2, hidden_units=8, n_layers=1, beta=0.5)
    ens = wm.train_ensemble(data, cfg, checkpoint_dir=tmp_path)
    assert ens.elites == wm.select_elites(ens.valid_losses, 2)
    loaded = wm.load_ensemble(tmp_path)
    np.testing.assert_array_equal(loaded.reward.params.data, ens.reward.params.data)
    np.testing.assert_array_equal(loaded.transition.params.data, ens.transition.params.data)
    assert loaded.elites == ens.elites and loaded.config.beta == 0.5

    # drop one member; resuming retrains only that one and reproduces it exactly
    (tmp_path / "member1_reward.bin").unlink()
    again = wm.train_ensemble(data, cfg, checkpoint_dir=tmp_path)
    np.testing.assert_allclose(again.reward.params.data, ens.reward.params.data, rtol=1e-6, atol=1e-7)

    with pytest.raises(ValueError, match="different configuration"):
        wm.train_ensemble(data, wm.ModelConfig(n_members=3, n_elites=2, max_epochs=3), checkpoint_dir=tmp_path)
    (tmp_path / "member0_transition.bin").unlink()
    with pytest.raises(FileNotFoundError, match="incomplete"):
        wm.load_ensemble(tmp_path)
    with pytest.raises(FileNotFoundError):
        wm.load_ensemble(tmp_path / "nowhere")


def test_ensemble_of_seven_keeps_five():
    data = linear_system(1000, 0)
    cfg = wm.ModelConfig(max_epochs=1, hidden_units=8, n_layers=1)
    ens = wm.train_ensemble(data, cfg)
    assert ens.n_members == 7 and len(ens.elites) == 5
    assert list(np.argsort(ens.valid_losses, kind="stable")[:5]) == ens.elites


def test_finite_action_set_restricts_random_actions():
    rng = np.random.default_rng(0)
    n = 400
    space = BoxSpace((0.0,), (0.0,), (-1.0,), (1.0,))
    a = rng.choice([-0.5, 0.5], size=n)
    data = OfflineDataset(np.zeros((n, 1)), a[:, None], np.zeros(n), np.zeros((n, 1)), np.ones(n, bool), space)
    cfg = wm.ModelConfig(beta=1.0, max_epochs=2, hidden_units=8, n_layers=1)
    model, _ = wm.train_reward(data, cfg, random_actions=[[-0.5], [0.5]])
    assert np.all(np.isfinite(model.predict(np.zeros((3, 1)), [[-1.0], [0.0], [1.0]])))
