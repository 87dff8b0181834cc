"""Ground-truth environments and behavior-data collectors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg, stats

from .mdp import BoxSpace, DiscreteSpace, OfflineDataset, TabularMDP


def normal_density(x, mean: float, var: float):
    """Gaussian density parameterised by mean and variance."""
    return np.exp(-0.5 * (np.asarray(x, dtype=np.float64) - mean) ** 2 / var) / math.sqrt(2 * math.pi * var)


# --- 1-D bandit --------------------------------------------------------------


# The second argument of each Gaussian in the bandit's definition is read as a
# variance; "std" reads it as a standard deviation instead.
BANDIT_INTERPRETATIONS = ("variance", "std")


def _as_variance(y: float, interpretation: str) -> float:
    if interpretation not in BANDIT_INTERPRETATIONS:
        raise ValueError(f"interpretation must be one of {BANDIT_INTERPRETATIONS}")
    return y if interpretation == "variance" else y * y


@dataclass(frozen=True)
class OneDimBandit:
    low: float = -1.0
    high: float = 1.0
    noise: float = 0.1
    interpretation: str = "variance"

    def __post_init__(self):
        _as_variance(1.0, self.interpretation)

    def _check(self, a):
        a = np.asarray(a, dtype=np.float64)
        if np.any(a < self.low) or np.any(a > self.high):
            raise ValueError(f"action outside [{self.low}, {self.high}]")
        return a

    def reward_mean(self, a):
        a = self._check(a)
        v1, v2 = _as_variance(0.2, self.interpretation), _as_variance(0.5, self.interpretation)
        return 0.4 * normal_density(a, 0.1, v1) + 1.0 * normal_density(a, -0.3, v2)

    def reward(self, a, rng: np.random.Generator):
        mean = self.reward_mean(a)
        return mean + self.noise * rng.standard_normal(np.shape(mean))


BANDIT = OneDimBandit()


def bandit_reward_mean(action):
    return BANDIT.reward_mean(action)


def bandit_reward(action, rng):
    return BANDIT.reward(action, rng)


@dataclass(frozen=True)
class BanditBehaviorPolicy:
    """Density proportional to N(a | 0.1, 0.5) on [-1, 1]."""

    mean: float = 0.1
    var: float = 0.5
    low: float = -1.0
    high: float = 1.0

    @cached_property
    def _dist(self):
        sd = math.sqrt(self.var)
        return stats.truncnorm((self.low - self.mean) / sd, (self.high - self.mean) / sd, loc=self.mean, scale=sd)

    def density(self, a):
        return self._dist.pdf(a)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self._dist.rvs(size=n, random_state=rng)

    @property
    def action_mean(self) -> float:
        return float(self._dist.mean())

    @property
    def mode(self) -> float:
        return float(np.clip(self.mean, self.low, self.high))


BANDIT_SPACE = BoxSpace((0.0,), (0.0,), (-1.0,), (1.0,))


def bandit_pair(interpretation: str = "variance") -> tuple[OneDimBandit, BanditBehaviorPolicy]:
    """The bandit and its behavior policy under one reading of the Gaussian parameters."""
    if interpretation == "variance":
        return BANDIT, BanditBehaviorPolicy()
    return OneDimBandit(interpretation=interpretation), BanditBehaviorPolicy(var=_as_variance(0.5, interpretation))


def collect_bandit_dataset(n: int, seed, interpretation: str = "variance") -> OfflineDataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    bandit, behavior = bandit_pair(interpretation)
    rng = np.random.default_rng(seed)
    actions = behavior.sample(n, rng)
    rewards = bandit.reward(actions, rng)
    zeros = np.zeros((n, 1))
    return OfflineDataset(zeros, actions[:, None], rewards, zeros, np.ones(n, bool), BANDIT_SPACE)


def collect_discrete_bandit_dataset(n: int, n_actions: int, seed) -> tuple[np.ndarray, OfflineDataset]:
    """The bandit restricted to an evenly spaced action grid, as a one-state tabular dataset.

    Behavior probabilities are the behavior density at the grid points, normalised.
    Returns the grid and the dataset (actions are grid indices).
    """
    rng = np.random.default_rng(seed)
    grid = np.linspace(-1.0, 1.0, n_actions)
    p = normal_density(grid, 0.1, 0.5)
    p /= p.sum()
    idx = rng.choice(n_actions, size=n, p=p)
    rewards = BANDIT.reward(grid[idx], rng)
    zeros = np.zeros(n, np.int64)
    return grid, OfflineDataset(zeros, idx, rewards, zeros, np.ones(n, bool), DiscreteSpace(1, n_actions))


# --- random tabular MDPs ----------------------------------------------------


@dataclass(frozen=True)
class RandomMdpSpec:
    n_states: int
    n_actions: int
    concentration: float = 1.0
    reward_low: float = -1.0
    reward_high: float = 1.0
    gamma: float = 0.9
    seed: int = 0


def make_random_mdp(spec: RandomMdpSpec) -> TabularMDP:
    rng = np.random.default_rng(spec.seed)
    S, A = spec.n_states, spec.n_actions
    t = rng.dirichlet(np.full(S, spec.concentration), size=(S, A))
    t /= t.sum(axis=-1, keepdims=True)
    r = rng.uniform(spec.reward_low, spec.reward_high, size=(S, A))
    r_max = max(abs(spec.reward_low), abs(spec.reward_high))
    return TabularMDP(t, r, np.full(S, 1.0 / S), spec.gamma, r_max)


# --- point mass --------------------------------------------------------------


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: np.ndarray
    terminal: bool
    clipped: np.ndarray


@dataclass(frozen=True)
class PointMassEnv:
    """Double integrator on a line: state (position, velocity), acceleration action in [-1, 1].

    Reward is -(position - goal)^2 - action_cost * a^2; episodes last ``horizon`` steps.
    """

    dt: float = 0.1
    accel: float = 2.0
    noise: float = 0.01
    horizon: int = 100
    action_cost: float = 0.1
    goal: float = 0.0
    init_range: float = 1.0
    limit: float = 2.0

    @property
    def space(self) -> BoxSpace:
        return BoxSpace((-self.limit, -self.limit), (self.limit, self.limit), (-1.0,), (1.0,))

    @property
    def A(self) -> np.ndarray:
        return np.array([[1.0, self.dt], [0.0, 1.0]])

    @property
    def B(self) -> np.ndarray:
        return np.array([[0.0], [self.dt * self.accel]])

    @property
    def reward_bound(self) -> float:
        return (self.limit + abs(self.goal)) ** 2 + self.action_cost

    def reset(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = 1 if n is None else n
        s = np.zeros((size, 2))
        s[:, 0] = rng.uniform(-self.init_range, self.init_range, size) + self.goal
        return s[0] if n is None else s

    def step(self, state, action, rng: np.random.Generator | None = None, t: int | None = None) -> StepResult:
        """Works on a single state (2,) or a batch (n, 2); out-of-box actions are clamped and flagged."""
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64).reshape(state.shape[:-1] + (1,))
        a = np.clip(action, -1.0, 1.0)
        clipped = np.any(a != action, axis=-1)
        nxt = state @ self.A.T + a @ self.B.T
        if rng is not None and self.noise > 0:
            nxt = nxt + self.noise * rng.standard_normal(nxt.shape)
        nxt = np.clip(nxt, -self.limit, self.limit)
        reward = -(state[..., 0] - self.goal) ** 2 - self.action_cost * np.sum(a * a, axis=-1)
        terminal = t is not None and t + 1 >= self.horizon
        return StepResult(nxt, reward, terminal, clipped)

    def lqr_gains(self) -> np.ndarray:
        """Finite-horizon LQR feedback gains K_t (a_t = -K_t (x_t - goal)), shape (horizon, 1, 2)."""
        return _riccati(self)[0]

    def lqr_value(self, start: np.ndarray) -> np.ndarray:
        """Expected return of the unconstrained optimal controller from each start state.

        Upper bound on the return of any box-constrained policy.
        """
        _, P, noise_cost = _riccati(self)
        x = np.atleast_2d(start) - np.array([self.goal, 0.0])
        return -(np.einsum("ni,ij,nj->n", x, P[0], x) + noise_cost)


def _riccati(env: PointMassEnv):
    A, B = env.A, env.B
    Q = np.diag([1.0, 0.0])
    R = np.array([[env.action_cost]])
    W = env.noise ** 2 * np.eye(2)
    P = [None] * (env.horizon + 1)
    K = np.zeros((env.horizon, 1, 2))
    P[env.horizon] = np.zeros((2, 2))
    noise_cost = 0.0
    for t in range(env.horizon - 1, -1, -1):
        Pn = P[t + 1]
        K[t] = linalg.solve(R + B.T @ Pn @ B, B.T @ Pn @ A)
        P[t] = Q + A.T @ Pn @ (A - B @ K[t])
        noise_cost += float(np.trace(Pn @ W))
    return K, P, noise_cost


class LinearPolicy:
    """a = clip(-gain_scale * K_t (x - goal) + noise * eps) on the point mass; t-aware LQR when gain_scale=1."""

    def __init__(self, env: PointMassEnv, gain_scale: float = 1.0, noise: float = 0.0):
        self.env, self.gain_scale, self.noise = env, gain_scale, noise
        self.K = env.lqr_gains()

    def act(self, state, t: int, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.atleast_2d(state) - np.array([self.env.goal, 0.0])
        a = -self.gain_scale * x @ self.K[t].T
        if self.noise > 0 and rng is not None:
            a = a + self.noise * rng.standard_normal(a.shape)
        return np.clip(a, -1.0, 1.0)


class ZeroPolicy:
    def act(self, state, t: int, rng=None) -> np.ndarray:
        return np.zeros((np.atleast_2d(state).shape[0], 1))


def run_episodes(env: PointMassEnv, policy, starts: np.ndarray, rng: np.random.Generator,
                 record: bool = False):
    """Roll all start states in parallel for one horizon. Returns per-episode returns,
    and the transition columns when ``record`` is set."""
    s = np.array(starts, dtype=np.float64)
    returns = np.zeros(len(s))
    cols = []
    for t in range(env.horizon):
        a = np.asarray(policy.act(s, t, rng)).reshape(len(s), -1)
        res = env.step(s, a, rng, t)
        returns += res.reward
        if record:
            cols.append((s, np.clip(a, -1, 1), res.reward, res.next_state))
        s = res.next_state
    if not record:
        return returns
    states, actions, rewards, nxt = (np.concatenate([c[i] for c in cols]) for i in range(4))
    # time-limit truncation is not a true terminal state
    data = OfflineDataset(states, actions, rewards, nxt, np.zeros(len(rewards), bool), env.space)
    return returns, data


def collect_point_mass_dataset(env: PointMassEnv, policy, n_episodes: int, seed) -> OfflineDataset:
    rng = np.random.default_rng(seed)
    _, data = run_episodes(env, policy, env.reset(rng, n_episodes), rng, record=True)
    return data


def point_mass_step(state, action, rng=None, env: PointMassEnv = PointMassEnv(), t: int | None = None):
    res = env.step(state, action, rng, t)
    return res.next_state, res.reward, res.terminal


@dataclass(frozen=True)
class ReferenceReturns:
    zero: float
    lqr: float
    ceiling: float

    def normalize(self, ret: float) -> float:
        """0 for the do-nothing controller, 1 for clipped LQR."""
        return (ret - self.zero) / (self.lqr - self.zero)


def reference_returns(env: PointMassEnv, starts: np.ndarray, seed: int = 0) -> ReferenceReturns:
    zero = run_episodes(env, ZeroPolicy(), starts, np.random.default_rng(seed)).mean()
    lqr = run_episodes(env, LinearPolicy(env), starts, np.random.default_rng(seed)).mean()
    return ReferenceReturns(float(zero), float(lqr), float(env.lqr_value(starts).mean()))


# --- registry ----------------------------------------------------------------

ENV_IDS = ("bandit1d", "pointmass", "random-mdp:<seed>:<S>:<A>")


def make_env(env_id: str):
    if env_id == "bandit1d":
        return BANDIT
    if env_id == "pointmass":
        return PointMassEnv()
    if env_id.startswith("random-mdp:"):
        try:
            _, seed, S, A = env_id.split(":")
            return make_random_mdp(RandomMdpSpec(int(S), int(A), seed=int(seed)))
        except ValueError:
            pass
    raise ValueError(f"unknown environment id {env_id!r}; valid ids: {', '.join(ENV_IDS)}")
