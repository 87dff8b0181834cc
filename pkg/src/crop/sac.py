"""Soft actor-critic on an f-mixed replay of relabeled data and model rollouts."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .mdp import OfflineDataset
from .world_model import ModelEnsemble, model_step

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "critic_loss", "policy_loss", "alpha", "entropy", "eval_return_mean", "eval_return_std")


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    batch_size: int = 512
    f: float = 0.5
    critic_lr: float = 3e-4
    policy_lr: float = 1e-4
    alpha_lr: float = 3e-5
    tau: float = 0.005
    critic_hidden: int = 256
    critic_layers: int = 2
    policy_hidden: int = 256
    policy_layers: int = 2
    twin_critic: bool = False
    init_alpha: float = 1.0
    target_entropy: float | None = None  # default: -action_dim
    rollout_length: int = 5
    rollout_starts: int = 400
    rollout_every: int = 1
    model_buffer_size: int = 10000
    n_steps: int = 10000
    eval_every: int = 1000
    eval_episodes: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.f <= 1:
            raise ValueError("f must lie in [0, 1]")
        if self.rollout_length < 1:
            raise ValueError("rollout length k must be at least 1")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")


# --- networks ----------------------------------------------------------------


class Critic:
    """Q(s, a) as an MLP on the concatenated input; two members when twin."""

    def __init__(self, params: nn.ParameterVector):
        self.params = params

    @classmethod
    def create(cls, state_dim, action_dim, hidden, layers, rng, twin=False, dtype="float32"):
        spec = nn.MlpSpec(state_dim + action_dim, 1, hidden, layers, members=2 if twin else 1)
        return cls(nn.init_params(spec, rng, dtype))

    @property
    def spec(self) -> nn.MlpSpec:
        return self.params.spec

    def copy(self) -> "Critic":
        return Critic(self.params.copy())

    def forward(self, s, a):
        """Per-member values, shape (members, n), and the cache."""
        out, cache = nn.forward(self.spec, self.params, np.concatenate([s, a], axis=-1)[None])
        return out[..., 0], cache

    def q(self, s, a) -> np.ndarray:
        """Minimum over members."""
        return self.forward(s, a)[0].min(axis=0)

    def q_and_action_grad(self, s, a):
        """min-over-members Q and its gradient w.r.t. the action."""
        q, cache = self.forward(s, a)
        pick = np.argmin(q, axis=0)
        dq = np.zeros_like(q)
        dq[pick, np.arange(q.shape[1])] = 1.0
        _, dx = nn.backward(self.spec, self.params, cache, dq[..., None], input_grad=True)
        return q[pick, np.arange(q.shape[1])], dx[0, :, s.shape[-1]:]


class SquashedGaussianPolicy:
    """Gaussian in an unbounded space mapped into the action box by center + half * tanh(u)."""

    def __init__(self, params: nn.ParameterVector, low, high):
        self.params = params
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)

    @classmethod
    def create(cls, state_dim, low, high, hidden, layers, rng, dtype="float32"):
        spec = nn.MlpSpec(state_dim, 2 * len(low), hidden, layers)
        return cls(nn.init_params(spec, rng, dtype), low, high)

    @property
    def spec(self) -> nn.MlpSpec:
        return self.params.spec

    @property
    def center(self):
        return 0.5 * (self.high + self.low)

    @property
    def half(self):
        return 0.5 * (self.high - self.low)

    def copy(self) -> "SquashedGaussianPolicy":
        return SquashedGaussianPolicy(self.params.copy(), self.low, self.high)

    def head(self, s):
        out, cache = nn.forward(self.spec, self.params, np.atleast_2d(s))
        return nn.GaussianHead.from_output(out.astype(np.float64)), cache

    def log_prob_u(self, u, mean, log_std) -> np.ndarray:
        """Log-density of the squashed action whose pre-squash value is u."""
        eps = (u - mean) * np.exp(-log_std)
        log_jac = np.log(self.half) + 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
        return np.sum(-0.5 * eps * eps - log_std - nn.HALF_LOG_2PI - log_jac, axis=-1)

    def log_prob(self, s, a) -> np.ndarray:
        head, _ = self.head(s)
        y = np.clip((np.asarray(a) - self.center) / self.half, -1 + 1e-12, 1 - 1e-12)
        return self.log_prob_u(np.arctanh(y), head.mean, head.log_std)

    def act(self, s, rng=None, deterministic: bool = False) -> np.ndarray:
        head, _ = self.head(s)
        u = head.mean if deterministic else head.mean + np.exp(head.log_std) * rng.standard_normal(head.mean.shape)
        return self.center + self.half * np.tanh(u)

    def sample(self, s, rng):
        """Reparameterised sample: returns (action, log_prob, backprop) where
        ``backprop(dL/da, dL/dlogp)`` yields the flat parameter gradient."""
        head, cache = self.head(s)
        eps = rng.standard_normal(head.mean.shape)
        std = np.exp(head.log_std)
        u = head.mean + std * eps
        t = np.tanh(u)
        a = self.center + self.half * t
        logp = self.log_prob_u(u, head.mean, head.log_std)

        def backprop(da, dlogp):
            dlogp = np.asarray(dlogp)[:, None]
            du = da * self.half * (1.0 - t * t) + dlogp * 2.0 * t
            dmean = du
            dlog_std = du * std * eps - dlogp
            return nn.backward(self.spec, self.params, cache, head.output_grad(dmean, dlog_std))

        return a, logp, backprop


@dataclass
class Temperature:
    log_alpha: float
    target_entropy: float
    opt: nn.AdamState

    @classmethod
    def create(cls, init_alpha: float, target_entropy: float, lr: float) -> "Temperature":
        return cls(math.log(init_alpha), target_entropy, nn.AdamState.zeros(1, lr))

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


# --- replay ------------------------------------------------------------------


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    from_model: np.ndarray


class ModelBuffer:
    """Fixed-capacity FIFO of model-generated transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.size = 0
        self.head = 0  # next write position

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2) -> None:
        n = len(r)
        if n > self.capacity:
            s, a, r, s2 = s[-self.capacity:], a[-self.capacity:], r[-self.capacity:], s2[-self.capacity:]
            n = self.capacity
        idx = (self.head + np.arange(n)) % self.capacity
        self.s[idx], self.a[idx], self.r[idx], self.s2[idx] = s, a, r, s2
        self.head = (self.head + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def oldest_first(self) -> np.ndarray:
        start = self.head if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity


class MixedReplay:
    """Batches with floor(f * B) model transitions (once any exist), the rest offline."""

    def __init__(self, offline: OfflineDataset, capacity: int = 10000, f: float = 0.5):
        self.offline = offline
        self.f = f
        self.model = ModelBuffer(capacity, offline.states.shape[1], offline.actions.shape[1])

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        n_model = int(math.floor(self.f * batch_size)) if len(self.model) else 0
        n_off = batch_size - n_model
        i = rng.integers(0, len(self.offline), n_off)
        j = rng.integers(0, len(self.model), n_model) if n_model else np.zeros(0, int)
        d, m = self.offline, self.model
        return Batch(
            np.concatenate([d.states[i], m.s[j]]),
            np.concatenate([d.actions[i], m.a[j]]),
            np.concatenate([d.rewards[i], m.r[j]]),
            np.concatenate([d.next_states[i], m.s2[j]]),
            np.concatenate([d.terminals[i], np.zeros(n_model, bool)]),
            np.concatenate([np.zeros(n_off, bool), np.ones(n_model, bool)]),
        )


def rollout_into_buffer(ensemble: ModelEnsemble, policy: SquashedGaussianPolicy, dataset: OfflineDataset,
                        k: int, n_starts: int, rng: np.random.Generator, buffer: ModelBuffer) -> int:
    """k-step model rollouts from states drawn from the dataset; returns transitions added."""
    if k < 1:
        raise ValueError("k must be at least 1")
    s = dataset.states[rng.integers(0, len(dataset), n_starts)]
    added = 0
    for _ in range(k):
        a = policy.act(s, rng)
        s2, r, _ = model_step(ensemble, s, a, rng)
        buffer.add(s, a, r, s2)
        added += len(r)
        s = s2
    return added


# --- updates -------------------------------------------------------------------


def soft_target(batch: Batch, target: Critic, policy: SquashedGaussianPolicy, alpha: float, gamma: float,
                rng: np.random.Generator) -> np.ndarray:
    a2, logp2, _ = policy.sample(batch.next_states, rng)
    v2 = target.q(batch.next_states, a2) - alpha * logp2
    return batch.rewards + gamma * (1.0 - batch.terminals) * v2


def critic_loss_and_grad(batch: Batch, critic: Critic, y: np.ndarray):
    q, cache = critic.forward(batch.states, batch.actions)
    diff = q - y[None]
    n = diff.shape[1]
    loss = float(np.mean(diff * diff, axis=1).sum())
    grad = nn.backward(critic.spec, critic.params, cache, (2.0 * diff / n)[..., None])
    return loss, grad


def critic_update(batch: Batch, critic: Critic, target: Critic, policy: SquashedGaussianPolicy, alpha: float,
                  gamma: float, opt: nn.AdamState, rng: np.random.Generator) -> float:
    """One Adam step on the mean squared soft Bellman residual."""
    y = soft_target(batch, target, policy, alpha, gamma, rng)
    loss, grad = critic_loss_and_grad(batch, critic, y)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite critic loss")
    nn.adam_step(opt, critic.params.data, grad)
    return loss


def policy_loss_and_grad(states, policy: SquashedGaussianPolicy, critic, alpha: float, rng):
    """mean(alpha log pi(a|s) - Q(s, a)) with a reparameterised; returns loss, grad, mean log pi."""
    a, logp, backprop = policy.sample(states, rng)
    q, dq_da = critic.q_and_action_grad(states, a)
    n = len(states)
    loss = float(np.mean(alpha * logp - q))
    grad = backprop(-dq_da / n, np.full(n, alpha / n))
    return loss, grad, float(logp.mean())


def policy_update(batch: Batch, policy: SquashedGaussianPolicy, critic, alpha: float, opt: nn.AdamState,
                  rng: np.random.Generator):
    """One Adam step; returns (loss, entropy estimate)."""
    loss, grad, mean_logp = policy_loss_and_grad(batch.states, policy, critic, alpha, rng)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite policy loss")
    nn.adam_step(opt, policy.params.data, grad)
    return loss, -mean_logp


def alpha_update(entropy: float, temperature: Temperature) -> float:
    """One Adam step on alpha * (H - H_target) through log alpha."""
    grad = np.array([temperature.alpha * (entropy - temperature.target_entropy)])
    la = np.array([temperature.log_alpha])
    nn.adam_step(temperature.opt, la, grad)
    temperature.log_alpha = float(la[0])
    return temperature.alpha


def target_update(critic: Critic, target: Critic, tau: float = 0.005) -> None:
    target.params.data *= 1.0 - tau
    target.params.data += tau * critic.params.data


# --- training loop ---------------------------------------------------------------


@dataclass
class SacLearner:
    critic: Critic
    target: Critic
    policy: SquashedGaussianPolicy
    temperature: Temperature
    critic_opt: nn.AdamState
    policy_opt: nn.AdamState
    replay: MixedReplay
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, dataset: OfflineDataset, cfg: SacConfig) -> "SacLearner":
        rng = np.random.default_rng(cfg.seed)
        sd, ad = dataset.states.shape[1], dataset.actions.shape[1]
        space = dataset.space
        critic = Critic.create(sd, ad, cfg.critic_hidden, cfg.critic_layers, rng, cfg.twin_critic, cfg.dtype)
        policy = SquashedGaussianPolicy.create(sd, space.action_low, space.action_high, cfg.policy_hidden,
                                               cfg.policy_layers, rng, cfg.dtype)
        h_target = -float(ad) if cfg.target_entropy is None else cfg.target_entropy
        return cls(
            critic=critic,
            target=critic.copy(),
            policy=policy,
            temperature=Temperature.create(cfg.init_alpha, h_target, cfg.alpha_lr),
            critic_opt=nn.AdamState.zeros(critic.params.spec.size, cfg.critic_lr, cfg.dtype),
            policy_opt=nn.AdamState.zeros(policy.params.spec.size, cfg.policy_lr, cfg.dtype),
            replay=MixedReplay(dataset, cfg.model_buffer_size, cfg.f),
            rng=rng,
        )


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, last_good: SquashedGaussianPolicy, metrics: list):
        super().__init__(msg)
        self.last_good = last_good
        self.metrics = metrics


def train(dataset: OfflineDataset, ensemble: ModelEnsemble | None, cfg: SacConfig, evaluate=None,
          learner: SacLearner | None = None):
    """Algorithm loop: rollouts, mixed batch, critic, policy, alpha and target updates.

    ``dataset`` should already carry relabeled rewards. ``evaluate(policy)``
    returns per-episode returns on the true environment. Returns the learner
    and a list of metric rows.
    """
    ln = learner or SacLearner.create(dataset, cfg)
    metrics: list[dict] = []
    acc = {"critic_loss": [], "policy_loss": [], "entropy": []}
    last_good = ln.policy.copy()
    for _ in range(cfg.n_steps):
        try:
            if ensemble is not None and cfg.f > 0 and ln.step % cfg.rollout_every == 0:
                rollout_into_buffer(ensemble, ln.policy, dataset, cfg.rollout_length, cfg.rollout_starts,
                                    ln.rng, ln.replay.model)
            batch = ln.replay.sample(cfg.batch_size, ln.rng)
            alpha = ln.temperature.alpha
            c_loss = critic_update(batch, ln.critic, ln.target, ln.policy, alpha, cfg.gamma, ln.critic_opt, ln.rng)
            p_loss, entropy = policy_update(batch, ln.policy, ln.critic, alpha, ln.policy_opt, ln.rng)
            alpha_update(entropy, ln.temperature)
            target_update(ln.critic, ln.target, cfg.tau)
        except FloatingPointError as exc:
            raise TrainingAborted(f"step {ln.step}: {exc}", last_good, metrics) from exc
        ln.step += 1
        acc["critic_loss"].append(c_loss)
        acc["policy_loss"].append(p_loss)
        acc["entropy"].append(entropy)
        if ln.step % cfg.eval_every == 0 or ln.step == cfg.n_steps:
            row = {"step": ln.step, **{k: float(np.mean(v)) for k, v in acc.items()},
                   "alpha": ln.temperature.alpha, "eval_return_mean": math.nan, "eval_return_std": math.nan}
            if evaluate is not None:
                rets = np.asarray(evaluate(ln.policy))
                row["eval_return_mean"], row["eval_return_std"] = float(rets.mean()), float(rets.std())
            metrics.append({k: row[k] for k in METRIC_COLUMNS})
            log.info("step %d critic %.4g policy %.4g alpha %.3g H %.3g eval %.4g", ln.step, row["critic_loss"],
                     row["policy_loss"], row["alpha"], row["entropy"], row["eval_return_mean"])
            acc = {k: [] for k in acc}
            last_good = ln.policy.copy()
    return ln, metrics


class PolicyAdapter:
    """Exposes a squashed-Gaussian policy through the env ``act(state, t, rng)`` protocol."""

    def __init__(self, policy: SquashedGaussianPolicy, deterministic: bool = True):
        self.policy, self.deterministic = policy, deterministic

    def act(self, state, t, rng=None):
        return self.policy.act(np.atleast_2d(state), rng, deterministic=self.deterministic)
