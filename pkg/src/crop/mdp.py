"""Finite MDPs, offline datasets and the tabular conservative reward."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

PROB_ATOL = 1e-12


def _frozen(x, dtype=np.float64) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_stochastic(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{what} has negative or non-finite entries")
    if np.max(np.abs(p.sum(axis=-1) - 1.0)) > PROB_ATOL:
        raise ValueError(f"{what} rows must sum to 1")


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    mu0: np.ndarray  # (S,)
    gamma: float
    r_max: float | None = None

    def __post_init__(self):
        t = _frozen(self.transition)
        r = _frozen(self.reward)
        mu0 = _frozen(self.mu0)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {t.shape}")
        if r.shape != t.shape[:2]:
            raise ValueError(f"reward shape {r.shape} does not match transition {t.shape}")
        if mu0.shape != (t.shape[0],):
            raise ValueError("mu0 must be a distribution over states")
        _check_stochastic(t, "transition")
        _check_stochastic(mu0, "mu0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        r_max = float(np.max(np.abs(r))) if self.r_max is None else float(self.r_max)
        if r_max <= 0:
            r_max = 1.0
        if np.max(np.abs(r)) > r_max + 1e-12:
            raise ValueError("|reward| exceeds r_max")
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self, path) -> None:
        payload = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "mu0": self.mu0.tolist(),
            "reward": self.reward.ravel().tolist(),
            "transition": self.transition.ravel().tolist(),
        }
        Path(path).write_text(json.dumps(payload, indent=1) + "\n")

    @classmethod
    def from_json(cls, path) -> "TabularMDP":
        d = json.loads(Path(path).read_text())
        S, A = int(d["n_states"]), int(d["n_actions"])
        return cls(
            transition=np.asarray(d["transition"]).reshape(S, A, S),
            reward=np.asarray(d["reward"]).reshape(S, A),
            mu0=np.asarray(d["mu0"]),
            gamma=d["gamma"],
            r_max=d["r_max"],
        )


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ValueError("policy table must be (S, A)")
        _check_stochastic(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def greedy(cls, q: np.ndarray) -> "TabularPolicy":
        q = np.asarray(q)
        return cls(np.eye(q.shape[1])[np.argmax(q, axis=1)])


@dataclass(frozen=True)
class UniformDensity:
    """Density of the uniform distribution over the action space."""

    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("uniform density must be positive")

    @classmethod
    def discrete(cls, n_actions: int) -> "UniformDensity":
        return cls(1.0 / n_actions)

    @classmethod
    def box(cls, low, high) -> "UniformDensity":
        return cls(1.0 / float(np.prod(np.asarray(high, float) - np.asarray(low, float))))


class TransitionSample(NamedTuple):
    state: int | np.ndarray
    action: int | np.ndarray
    reward: float
    next_state: int | np.ndarray
    terminal: bool


@dataclass(frozen=True)
class DiscreteSpace:
    n_states: int
    n_actions: int


@dataclass(frozen=True)
class BoxSpace:
    state_low: tuple
    state_high: tuple
    action_low: tuple
    action_high: tuple

    @property
    def state_dim(self) -> int:
        return len(self.state_low)

    @property
    def action_dim(self) -> int:
        return len(self.action_low)


@dataclass(frozen=True)
class OfflineDataset:
    """Transitions stored column-wise.

    Tabular datasets hold integer states/actions of shape (n,); continuous ones
    hold float arrays of shape (n, dim).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    space: DiscreteSpace | BoxSpace
    counts: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        tabular = isinstance(self.space, DiscreteSpace)
        kind = np.int64 if tabular else np.float64
        cols = {
            "states": _frozen(self.states, kind),
            "actions": _frozen(self.actions, kind),
            "rewards": _frozen(self.rewards),
            "next_states": _frozen(self.next_states, kind),
            "terminals": _frozen(self.terminals, bool),
        }
        n = len(cols["rewards"])
        if any(len(c) != n for c in cols.values()):
            raise ValueError("dataset columns differ in length")
        if tabular:
            sp = self.space
            for name, hi in (("states", sp.n_states), ("actions", sp.n_actions), ("next_states", sp.n_states)):
                c = cols[name]
                if c.ndim != 1 or (n and (c.min() < 0 or c.max() >= hi)):
                    raise ValueError(f"{name} outside the discrete space")
            counts = np.zeros((sp.n_states, sp.n_actions), dtype=np.int64)
            np.add.at(counts, (cols["states"], cols["actions"]), 1)
            cols["counts"] = _frozen(counts, np.int64)
        else:
            sd, ad = self.space.state_dim, self.space.action_dim
            for name, dim in (("states", sd), ("actions", ad), ("next_states", sd)):
                c = cols[name].reshape(n, dim)
                c.setflags(write=False)
                cols[name] = c
        for k, v in cols.items():
            object.__setattr__(self, k, v)

    @property
    def tabular(self) -> bool:
        return isinstance(self.space, DiscreteSpace)

    def __len__(self) -> int:
        return len(self.rewards)

    def __iter__(self) -> Iterator[TransitionSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> TransitionSample:
        if self.tabular:
            return TransitionSample(int(self.states[i]), int(self.actions[i]), float(self.rewards[i]),
                                    int(self.next_states[i]), bool(self.terminals[i]))
        return TransitionSample(self.states[i], self.actions[i], float(self.rewards[i]),
                                self.next_states[i], bool(self.terminals[i]))

    @classmethod
    def from_samples(cls, samples: Sequence[TransitionSample], space) -> "OfflineDataset":
        cols = list(zip(*samples)) if samples else [[], [], [], [], []]
        return cls(*(np.asarray(c) for c in cols), space=space)

    def with_rewards(self, rewards) -> "OfflineDataset":
        rewards = np.asarray(rewards, dtype=np.float64)
        if rewards.shape != self.rewards.shape:
            raise ValueError("reward column length mismatch")
        return OfflineDataset(self.states, self.actions, rewards, self.next_states, self.terminals, self.space)

    def subset(self, idx) -> "OfflineDataset":
        return OfflineDataset(self.states[idx], self.actions[idx], self.rewards[idx],
                              self.next_states[idx], self.terminals[idx], self.space)

    def one_hot(self) -> "OfflineDataset":
        """A tabular dataset with states and actions as indicator vectors in a unit box.

        Neural models trained on this see every cell as its own input coordinate.
        """
        if not self.tabular:
            raise ValueError("one-hot embedding needs a tabular dataset")
        S, A = self.space.n_states, self.space.n_actions
        eye_s, eye_a = np.eye(S), np.eye(A)
        box = BoxSpace((0.0,) * S, (1.0,) * S, (0.0,) * A, (1.0,) * A)
        return OfflineDataset(eye_s[self.states], eye_a[self.actions], self.rewards, eye_s[self.next_states],
                              self.terminals, box)


# --- empirical MDP -----------------------------------------------------------


@dataclass(frozen=True)
class UnvisitedRule:
    """How unvisited (s, a) cells are filled when estimating an empirical MDP."""

    transition: str = "uniform"  # or "self"
    reward: float = 0.0


@dataclass(frozen=True)
class EmpiricalMDP:
    t_bar: np.ndarray  # (S, A, S)
    r_bar: np.ndarray  # (S, A)
    pi_bar: TabularPolicy
    counts: np.ndarray  # (S, A), may be fractional for the exact-coverage construction
    unvisited: np.ndarray  # (S, A) bool, cells filled by the fallback rule

    @property
    def state_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def full_support(self) -> bool:
        return not self.unvisited.any()


def estimate_empirical_mdp(dataset: OfflineDataset, fallback: UnvisitedRule = UnvisitedRule()) -> EmpiricalMDP:
    """Maximum-likelihood transitions, mean rewards and behavior policy from counts."""
    if not dataset.tabular:
        raise ValueError("tabular required: empirical MDPs need a discrete dataset")
    if len(dataset) == 0:
        raise ValueError("cannot estimate an empirical MDP from an empty dataset")
    S, A = dataset.space.n_states, dataset.space.n_actions
    counts = dataset.counts
    sas = np.zeros((S, A, S))
    np.add.at(sas, (dataset.states, dataset.actions, dataset.next_states), 1.0)
    rsum = np.zeros((S, A))
    np.add.at(rsum, (dataset.states, dataset.actions), dataset.rewards)

    visited = counts > 0
    n_sa = np.where(visited, counts, 1)
    t_bar = sas / n_sa[..., None]
    r_bar = np.where(visited, rsum / n_sa, fallback.reward)
    if fallback.transition == "uniform":
        t_bar[~visited] = 1.0 / S
    elif fallback.transition == "self":
        for s, a in zip(*np.nonzero(~visited)):
            t_bar[s, a] = np.eye(S)[s]
    else:
        raise ValueError(f"unknown fallback transition rule {fallback.transition!r}")

    n_s = counts.sum(axis=1, keepdims=True)
    pi_bar = np.where(n_s > 0, counts / np.where(n_s > 0, n_s, 1), 1.0 / A)
    return EmpiricalMDP(_frozen(t_bar), _frozen(r_bar), TabularPolicy(pi_bar), _frozen(counts), _frozen(~visited, bool))


def exact_coverage(mdp: TabularMDP, behavior: TabularPolicy, n_per_state: float = 1.0) -> EmpiricalMDP:
    """The infinite-data limit: empirical model equals the true one."""
    counts = n_per_state * behavior.probs
    return EmpiricalMDP(mdp.transition, mdp.reward, behavior, _frozen(counts),
                        _frozen(behavior.probs == 0, bool))


# --- conservative reward -----------------------------------------------------


@dataclass(frozen=True)
class ConservativeReward:
    values: np.ndarray
    floored: np.ndarray  # cells with zero behavior probability and beta > 0


def conservative_reward_tabular(
    emp: EmpiricalMDP,
    reward: np.ndarray,
    beta: float,
    mu: UniformDensity | None = None,
    floor: float | None = None,
) -> ConservativeReward:
    """reward(s, a) - beta * mu / pi_bar(a|s); zero-probability cells are set to ``floor``.

    ``floor`` defaults to -10 times the largest absolute reward (at least -10).
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    reward = np.asarray(reward, dtype=np.float64)
    pi_bar = emp.pi_bar.probs
    if mu is None:
        mu = UniformDensity.discrete(pi_bar.shape[1])
    if floor is None:
        floor = -10.0 * max(float(np.max(np.abs(reward))), 1.0)
    if beta == 0:
        return ConservativeReward(_frozen(reward), _frozen(np.zeros_like(reward, bool), bool))
    zero = pi_bar <= 0
    with np.errstate(divide="ignore"):
        out = reward - beta * mu.mu / np.where(zero, 1.0, pi_bar)
    out = np.where(zero, floor, out)
    return ConservativeReward(_frozen(out), _frozen(zero, bool))


# --- data collection and files -----------------------------------------------


def _sample_rows(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def collect_tabular_dataset(mdp: TabularMDP, behavior: TabularPolicy, n_steps: int, horizon: int, seed) -> OfflineDataset:
    """Roll episodes from mu0 under ``behavior``, truncated at ``horizon``, until n_steps transitions."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = np.random.default_rng(seed)
    u = rng.random((n_steps, 3))
    mu0_cdf = np.cumsum(mdp.mu0)
    pi_cdf = np.cumsum(behavior.probs, axis=1)
    t_cdf = np.cumsum(mdp.transition, axis=2)
    s_col = np.empty(n_steps, np.int64)
    a_col = np.empty(n_steps, np.int64)
    sn_col = np.empty(n_steps, np.int64)
    s, t = _sample_rows(mu0_cdf, u[0, 0]), 0
    for i in range(n_steps):
        if t == horizon:
            s, t = _sample_rows(mu0_cdf, u[i, 0]), 0
        a = _sample_rows(pi_cdf[s], u[i, 1])
        sn = _sample_rows(t_cdf[s, a], u[i, 2])
        s_col[i], a_col[i], sn_col[i] = s, a, sn
        s, t = sn, t + 1
    return OfflineDataset(s_col, a_col, mdp.reward[s_col, a_col], sn_col, np.zeros(n_steps, bool),
                          DiscreteSpace(mdp.n_states, mdp.n_actions))


def dataset_header(space) -> list[str]:
    if isinstance(space, DiscreteSpace):
        return ["s", "a", "r", "s_next", "terminal"]
    sd, ad = space.state_dim, space.action_dim
    return ([f"s{i}" for i in range(sd)] + [f"a{i}" for i in range(ad)] + ["r"]
            + [f"s_next{i}" for i in range(sd)] + ["terminal"])


def write_dataset_csv(dataset: OfflineDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_header(dataset.space))
        if dataset.tabular:
            for row in dataset:
                w.writerow([row.state, row.action, repr(row.reward), row.next_state, int(row.terminal)])
        else:
            for i in range(len(dataset)):
                w.writerow([repr(float(x)) for x in dataset.states[i]]
                           + [repr(float(x)) for x in dataset.actions[i]]
                           + [repr(float(dataset.rewards[i]))]
                           + [repr(float(x)) for x in dataset.next_states[i]]
                           + [int(dataset.terminals[i])])


def read_dataset_csv(path, space=None) -> OfflineDataset:
    """Load a dataset CSV; the space is inferred from header and data when not given."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    if header == ["s", "a", "r", "s_next", "terminal"]:
        s, a, sn = (data[:, i].astype(np.int64) for i in (0, 1, 3))
        if space is None:
            space = DiscreteSpace(int(max(s.max(), sn.max())) + 1, int(a.max()) + 1)
        return OfflineDataset(s, a, data[:, 2], sn, data[:, 4] > 0.5, space)
    sd = sum(1 for h in header if h.startswith("s") and not h.startswith("s_next"))
    ad = sum(1 for h in header if h.startswith("a"))
    if dataset_header(BoxSpace((0,) * sd, (0,) * sd, (0,) * ad, (0,) * ad)) != header:
        raise ValueError(f"unrecognised dataset header {header}")
    states, actions = data[:, :sd], data[:, sd:sd + ad]
    rewards, nxt = data[:, sd + ad], data[:, sd + ad + 1:2 * sd + ad + 1]
    if space is None:
        both = np.vstack([states, nxt])
        space = BoxSpace(tuple(both.min(0)), tuple(both.max(0)), tuple(actions.min(0)), tuple(actions.max(0)))
    return OfflineDataset(states, actions, rewards, nxt, data[:, -1] > 0.5, space)
