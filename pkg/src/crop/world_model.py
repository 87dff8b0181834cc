"""Ensemble dynamics and conservative reward models.

Members are stored as one batched network; each member owns its random stream
(data split, initialisation, minibatch order, random actions), so a member's
result does not depend on which other members it was trained alongside.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .mdp import BoxSpace, OfflineDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitConfig:
    valid_ratio: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.valid_ratio < 1:
            raise ValueError("valid_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    hidden_units: int = 200
    n_layers: int = 4
    learning_rate: float = 1e-3
    batch_size: int = 256
    valid_ratio: float = 0.01
    max_epochs: int = 200
    patience: int = 20
    beta: float = 0.0
    n_random_actions: int = 10
    n_members: int = 7
    n_elites: int = 5
    seed: int = 0
    train_transition: bool = True
    dtype: str = "float32"
    lr_schedule: str = "constant"  # or "cosine": anneal to zero over max_epochs
    action_sampling: str = "uniform"  # or "stratified"
    keep_best: bool = True  # False returns each member's last iterate instead of its best-validation one

    def __post_init__(self):
        if self.n_members < self.n_elites or self.n_elites < 1:
            raise ValueError("need n_members >= n_elites >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.max_epochs < 1:
            raise ValueError("training budget must be at least one epoch")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.action_sampling not in ACTION_SAMPLERS:
            raise ValueError(f"action_sampling must be one of {sorted(ACTION_SAMPLERS)}")
        SplitConfig(self.valid_ratio)


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std < 1e-8, 1.0, std))

    def __call__(self, x):
        return (np.asarray(x) - self.mean) / self.std


def _inputs(dataset: OfflineDataset) -> np.ndarray:
    return np.concatenate([dataset.states, dataset.actions], axis=-1)


def _member_rngs(seed: int, members) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, int(m)]) for m in members]


def split_indices(n: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_valid = int(n * ratio)
    if n_valid < 1 or n - n_valid < 1:
        raise ValueError(f"dataset of {n} samples cannot be split with valid_ratio={ratio}")
    perm = rng.permutation(n)
    return perm[n_valid:], perm[:n_valid]


def uniform_actions(space: BoxSpace, shape, rng: np.random.Generator) -> np.ndarray:
    lo, hi = np.asarray(space.action_low), np.asarray(space.action_high)
    return lo + (hi - lo) * rng.random(tuple(shape) + (len(lo),))


def stratified_actions(space: BoxSpace, shape, rng: np.random.Generator) -> np.ndarray:
    """Latin-hypercube draws along the last axis of ``shape``.

    Each action dimension is cut into ``shape[-1]`` equal strata and every
    stratum receives exactly one uniform point; marginally each draw is still
    uniform on the box, so the penalty estimate stays unbiased with less variance.
    """
    lo, hi = np.asarray(space.action_low), np.asarray(space.action_high)
    full = tuple(shape) + (len(lo),)
    strata = np.argsort(rng.random(full), axis=-2)
    return lo + (hi - lo) * (strata + rng.random(full)) / full[-2]


ACTION_SAMPLERS = {"uniform": uniform_actions, "stratified": stratified_actions}


# --- per-member parameter slicing ---------------------------------------------


def member_params(params: nn.ParameterVector, i: int) -> nn.ParameterVector:
    spec = replace(params.spec, members=1)
    out = nn.ParameterVector(spec, dtype=params.data.dtype)
    for (w, b), (w1, b1) in zip(params.layers, out.layers):
        w1[...] = w[i:i + 1]
        b1[...] = b[i:i + 1]
    return out


def stack_params(parts: list[nn.ParameterVector]) -> nn.ParameterVector:
    spec = replace(parts[0].spec, members=len(parts))
    out = nn.ParameterVector(spec, dtype=parts[0].data.dtype)
    for li, (w, b) in enumerate(out.layers):
        w[...] = np.concatenate([p.layers[li][0] for p in parts])
        b[...] = np.concatenate([p.layers[li][1] for p in parts])
    return out


# --- fitting loop --------------------------------------------------------------


@dataclass
class FitResult:
    params: nn.ParameterVector
    train_curve: np.ndarray  # (epochs, members)
    valid_curve: np.ndarray  # (epochs, members)
    best_valid: np.ndarray  # (members,)


def _fit(spec: nn.MlpSpec, members, rngs, n: int, cfg: ModelConfig, batch_loss, valid_loss,
         output_bias=None) -> FitResult:
    """Minibatch Adam with per-member early stopping.

    ``batch_loss(params, idx (E, B), rngs)`` returns per-member losses and the
    flat gradient of their sum; ``valid_loss(params, valid_idx)`` per-member
    validation losses. A member's snapshot (its best, or with ``keep_best`` off its
    latest) is frozen once its patience runs out.
    ``output_bias`` initialises the last-layer bias.
    """
    E = len(members)
    splits = [split_indices(n, cfg.valid_ratio, r) for r in rngs]
    train = np.stack([s[0] for s in splits])
    valid = np.stack([s[1] for s in splits])
    params = stack_params([nn.init_params(replace(spec, members=1), r, cfg.dtype) for r in rngs])
    if output_bias is not None:
        params.layers[-1][1][...] = output_bias
    opt = nn.AdamState.zeros(params.spec.size, cfg.learning_rate, cfg.dtype)
    best = np.full(E, np.inf)
    best_params = params.copy()
    since = np.zeros(E, int)
    done = np.zeros(E, bool)
    train_curve, valid_curve = [], []
    n_train = train.shape[1]
    for epoch in range(cfg.max_epochs):
        if cfg.lr_schedule == "cosine":
            opt.learning_rate = 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * epoch / cfg.max_epochs))
        order = np.stack([train[e, r.permutation(n_train)] for e, r in enumerate(rngs)])
        totals = np.zeros(E)
        for start in range(0, n_train, cfg.batch_size):
            idx = order[:, start:start + cfg.batch_size]
            losses, grad = batch_loss(params, idx, rngs)
            if not np.all(np.isfinite(losses)):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}: {losses}")
            nn.adam_step(opt, params.data, grad)
            totals += losses * idx.shape[1]
        v = valid_loss(params, valid)
        train_curve.append(totals / n_train)
        valid_curve.append(v)
        for e in range(E):
            if done[e]:
                continue
            improved = v[e] < best[e]
            if improved:
                best[e], since[e] = v[e], 0
            else:
                since[e] += 1
                done[e] = since[e] >= cfg.patience
            if improved or not cfg.keep_best:
                for (w, b), (bw, bb) in zip(params.layers, best_params.layers):
                    bw[e], bb[e] = w[e], b[e]
        if done.all():
            break
    return FitResult(best_params, np.array(train_curve), np.array(valid_curve), best)


# --- transition model ----------------------------------------------------------


@dataclass
class TransitionModel:
    """Diagonal Gaussian over the state delta s' - s."""

    params: nn.ParameterVector
    normalizer: Normalizer

    @property
    def members(self) -> int:
        return self.params.spec.members

    def predict(self, states, actions) -> nn.GaussianHead:
        """Per-member heads, shape (members, n, state_dim)."""
        x = self.normalizer(np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=-1))
        out, _ = nn.forward(self.params.spec, self.params, x[None] if x.ndim == 2 else x)
        return nn.GaussianHead.from_output(out)


def _transition_losses(spec, x_all, targets):
    d = targets.shape[1]

    def batch_loss(params, idx, rngs):
        out, cache = nn.forward(spec, params, x_all[idx])
        head = nn.GaussianHead.from_output(out)
        losses, dm, dls = _nll_per_member(head, targets[idx])
        grad = nn.backward(spec, params, cache, head.output_grad(dm, dls))
        return losses, grad

    def valid_loss(params, vidx):
        out, _ = nn.forward(spec, params, x_all[vidx])
        head = nn.GaussianHead.from_output(out)
        return _nll_per_member(head, targets[vidx])[0]

    assert d * 2 == spec.output_dim
    return batch_loss, valid_loss


def _nll_per_member(head: nn.GaussianHead, target):
    E, B = target.shape[:2]
    losses = np.array([nn.gaussian_nll(head.mean[e], head.log_std[e], target[e])[0] for e in range(E)])
    _, dm, dls = nn.gaussian_nll(head.mean, head.log_std, target)
    return losses, dm * E, dls * E


def train_transition(dataset: OfflineDataset, cfg: ModelConfig = ModelConfig(), members=(0,)):
    """Fit Gaussian dynamics by maximum likelihood; one network per entry of ``members``."""
    if dataset.tabular:
        raise ValueError("transition models need a continuous dataset")
    x = _inputs(dataset)
    norm = Normalizer.fit(x)
    x_all = norm(x)
    targets = dataset.next_states - dataset.states
    spec = nn.MlpSpec(x.shape[1], 2 * targets.shape[1], cfg.hidden_units, cfg.n_layers, members=len(members))
    rngs = _member_rngs(cfg.seed, members)
    bias = np.concatenate([targets.mean(axis=0), np.log(targets.std(axis=0) + 1e-6)])
    fit = _fit(spec, members, rngs, len(dataset), cfg, *_transition_losses(spec, x_all, targets), output_bias=bias)
    return TransitionModel(fit.params, norm), fit


# --- reward model ----------------------------------------------------------------


@dataclass
class RewardModel:
    params: nn.ParameterVector
    normalizer: Normalizer
    beta: float

    @property
    def members(self) -> int:
        return self.params.spec.members

    def predict(self, states, actions) -> np.ndarray:
        """Per-member predictions, shape (members, n)."""
        x = self.normalizer(np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=-1))
        out, _ = nn.forward(self.params.spec, self.params, x[None] if x.ndim == 2 else x)
        return out[..., 0]


def reward_objective(pred_data, rewards, pred_random, beta: float):
    """Per-member 0.5 (r_hat - r)^2 + beta * r_hat(random action), batch-averaged.

    pred_data, rewards: (E, B); pred_random: (E, B, K). Returns losses and the
    gradients w.r.t. both prediction arrays.
    """
    B = pred_data.shape[1]
    diff = pred_data - rewards
    losses = 0.5 * np.mean(diff * diff, axis=1) + beta * pred_random.mean(axis=(1, 2))
    g_data = diff / B
    g_rand = np.full(pred_random.shape, beta / (B * pred_random.shape[2]))
    return losses, g_data, g_rand


def _reward_losses(spec, x_all, rewards, states, norm, cfg, action_sampler, members):
    K = cfg.n_random_actions
    sd = states.shape[1]

    def random_inputs(idx, rngs):
        E, B = idx.shape
        acts = np.stack([action_sampler((B, K), r) for r in rngs])  # (E, B, K, ad)
        s = np.broadcast_to(states[idx][:, :, None, :], (E, B, K, sd))
        return norm(np.concatenate([s, acts], axis=-1)).reshape(E, B * K, -1)

    def evaluate(params, idx, xr):
        E, B = idx.shape
        x = np.concatenate([x_all[idx], xr], axis=1)
        out, cache = nn.forward(spec, params, x)
        out = out[..., 0]
        losses, gd, gr = reward_objective(out[:, :B], rewards[idx], out[:, B:].reshape(E, B, K), cfg.beta)
        return losses, out, cache, gd, gr

    def batch_loss(params, idx, rngs):
        E, B = idx.shape
        losses, _, cache, gd, gr = evaluate(params, idx, random_inputs(idx, rngs))
        dout = np.concatenate([gd, gr.reshape(E, B * K)], axis=1)[..., None]
        return losses, nn.backward(spec, params, cache, dout)

    fixed = {}

    def valid_loss(params, vidx):
        if "xr" not in fixed:
            fixed["xr"] = random_inputs(vidx, [np.random.default_rng([cfg.seed, int(m), 1]) for m in members])
        return evaluate(params, vidx, fixed["xr"])[0]

    return batch_loss, valid_loss


def train_reward(dataset: OfflineDataset, cfg: ModelConfig = ModelConfig(), members=(0,), random_actions=None):
    """Fit r_hat by minimising squared error plus beta times r_hat at uniformly random actions.

    ``random_actions`` optionally restricts the random actions to a finite set
    (rows of an (n, action_dim) array) instead of the action box.
    """
    if cfg.beta < 0:
        raise ValueError("beta must be non-negative")
    if dataset.tabular:
        raise ValueError("reward models need a continuous dataset")
    x = _inputs(dataset)
    norm = Normalizer.fit(x)
    if random_actions is None:
        draw = ACTION_SAMPLERS[cfg.action_sampling]

        def sampler(shape, rng):
            return draw(dataset.space, shape, rng)
    else:
        choices = np.asarray(random_actions, dtype=np.float64).reshape(len(random_actions), -1)

        def sampler(shape, rng):
            return choices[rng.integers(0, len(choices), size=shape)]
    spec = nn.MlpSpec(x.shape[1], 1, cfg.hidden_units, cfg.n_layers, members=len(members))
    rngs = _member_rngs(cfg.seed, members)
    losses = _reward_losses(spec, norm(x), dataset.rewards, dataset.states, norm, cfg, sampler, members)
    # best constant predictor of the objective: mean reward shifted down by beta
    bias = dataset.rewards.mean() - cfg.beta
    fit = _fit(spec, members, rngs, len(dataset), cfg, *losses, output_bias=bias)
    return RewardModel(fit.params, norm, cfg.beta), fit


# --- ensemble --------------------------------------------------------------------


@dataclass
class ModelEnsemble:
    reward: RewardModel
    transition: TransitionModel | None
    valid_losses: np.ndarray
    elites: list[int]
    config: ModelConfig = field(default_factory=ModelConfig)

    @property
    def n_members(self) -> int:
        return self.reward.members

    def elite_rewards(self, states, actions) -> np.ndarray:
        return self.reward.predict(states, actions)[self.elites]

    def reward_mean(self, states, actions) -> np.ndarray:
        return self.elite_rewards(states, actions).mean(axis=0)


def select_elites(valid_losses, n_elites: int) -> list[int]:
    """Indices of the n_elites smallest validation losses, best first."""
    return [int(i) for i in np.argsort(np.asarray(valid_losses), kind="stable")[:n_elites]]


def _validation_losses(dataset, reward: RewardModel, transition: TransitionModel | None, cfg) -> np.ndarray:
    """Transition NLL + reward MSE on each member's own validation split."""
    out = np.zeros(reward.members)
    for m in range(reward.members):
        _, vidx = split_indices(len(dataset), cfg.valid_ratio, np.random.default_rng([cfg.seed, m]))
        s, a, r = dataset.states[vidx], dataset.actions[vidx], dataset.rewards[vidx]
        out[m] = np.mean((reward.predict(s, a)[m] - r) ** 2)
        if transition is not None:
            head = transition.predict(s, a)
            out[m] += nn.gaussian_nll(head.mean[m], head.log_std[m], dataset.next_states[vidx] - s)[0]
    return out


def train_ensemble(dataset: OfflineDataset, cfg: ModelConfig = ModelConfig(), random_actions=None,
                   checkpoint_dir=None) -> ModelEnsemble:
    """Train cfg.n_members independent (transition, reward) pairs and pick elites.

    With ``checkpoint_dir``, members already saved there are loaded instead of retrained.
    """
    members = list(range(cfg.n_members))
    loaded = load_members(checkpoint_dir, cfg) if checkpoint_dir else {}
    todo = [m for m in members if m not in loaded]
    if todo:
        log.info("training ensemble members %s (beta=%g)", todo, cfg.beta)
        rew, _ = train_reward(dataset, cfg, todo, random_actions)
        trans = train_transition(dataset, cfg, todo)[0] if cfg.train_transition else None
        for j, m in enumerate(todo):
            loaded[m] = (member_params(rew.params, j), member_params(trans.params, j) if trans else None,
                         rew.normalizer, trans.normalizer if trans else None)
            if checkpoint_dir:
                save_member(checkpoint_dir, m, *loaded[m])
    r_norm = loaded[0][2]
    reward = RewardModel(stack_params([loaded[m][0] for m in members]), r_norm, cfg.beta)
    transition = None
    if cfg.train_transition:
        transition = TransitionModel(stack_params([loaded[m][1] for m in members]), loaded[0][3])
    vl = _validation_losses(dataset, reward, transition, cfg)
    ens = ModelEnsemble(reward, transition, vl, select_elites(vl, cfg.n_elites), cfg)
    if checkpoint_dir:
        save_manifest(checkpoint_dir, ens)
    return ens


def relabel_rewards(dataset: OfflineDataset, ensemble: ModelEnsemble) -> OfflineDataset:
    return dataset.with_rewards(ensemble.reward_mean(dataset.states, dataset.actions))


def model_step(ensemble: ModelEnsemble, state, action, rng: np.random.Generator):
    """Elite-mean reward; next state sampled from one uniformly chosen elite per row.

    Accepts a single state/action or a batch; returns (next_state, reward, member index).
    """
    single = np.ndim(state) == 1
    s, a = np.atleast_2d(state), np.atleast_2d(action)
    reward = ensemble.reward_mean(s, a)
    pick = rng.integers(0, len(ensemble.elites), size=len(s))
    member = np.asarray(ensemble.elites)[pick]
    head = ensemble.transition.predict(s, a)
    rows = np.arange(len(s))
    mean, log_std = head.mean[member, rows], head.log_std[member, rows]
    nxt = s + mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    if single:
        return nxt[0], float(reward[0]), int(member[0])
    return nxt, reward, member


# --- checkpoints -----------------------------------------------------------------


def _norm_dict(n: Normalizer | None):
    return None if n is None else {"mean": n.mean.tolist(), "std": n.std.tolist()}


def _norm_load(d):
    return None if d is None else Normalizer(np.asarray(d["mean"]), np.asarray(d["std"]))


def save_member(directory, m: int, reward_p, trans_p, r_norm, t_norm) -> None:
    d = Path(directory)
    nn.save_params(d / f"member{m}_reward.bin", reward_p, {"normalizer": _norm_dict(r_norm)})
    if trans_p is not None:
        nn.save_params(d / f"member{m}_transition.bin", trans_p, {"normalizer": _norm_dict(t_norm)})


def load_members(directory, cfg: ModelConfig) -> dict:
    d = Path(directory)
    out = {}
    if not d.exists():
        return out
    man = d / "manifest.json"
    if man.exists() and json.loads(man.read_text())["config"] != asdict(cfg):
        raise ValueError(f"checkpoint in {d} was trained with a different configuration")
    for m in range(cfg.n_members):
        rp = d / f"member{m}_reward.bin"
        tp = d / f"member{m}_transition.bin"
        if not rp.exists() or (cfg.train_transition and not tp.exists()):
            continue
        r, rx = nn.load_params(rp)
        t, tx = nn.load_params(tp) if cfg.train_transition else (None, {"normalizer": None})
        out[m] = (r, t, _norm_load(rx["normalizer"]), _norm_load(tx["normalizer"]))
    return out


def save_manifest(directory, ens: ModelEnsemble) -> None:
    manifest = {
        "config": asdict(ens.config),
        "beta": ens.config.beta,
        "elites": ens.elites,
        "valid_losses": ens.valid_losses.tolist(),
        "seeds": {"base": ens.config.seed, "members": list(range(ens.n_members))},
    }
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_ensemble(directory, dataset: OfflineDataset | None = None) -> ModelEnsemble:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no trained ensemble in {d}")
    man = json.loads((d / "manifest.json").read_text())
    cfg = ModelConfig(**man["config"])
    loaded = load_members(d, cfg)
    if len(loaded) != cfg.n_members:
        raise FileNotFoundError(f"ensemble in {d} is incomplete")
    members = range(cfg.n_members)
    reward = RewardModel(stack_params([loaded[m][0] for m in members]), loaded[0][2], cfg.beta)
    transition = None
    if cfg.train_transition:
        transition = TransitionModel(stack_params([loaded[m][1] for m in members]), loaded[0][3])
    return ModelEnsemble(reward, transition, np.asarray(man["valid_losses"]), list(man["elites"]), cfg)
