"""Exact Bellman machinery for finite MDPs and checks of the CROP guarantees.

Everything here is dense linear algebra over the (S*A)-dimensional space of
state-action pairs; value iteration only appears in tests as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import (
    EmpiricalMDP,
    OfflineDataset,
    TabularMDP,
    TabularPolicy,
    UniformDensity,
    collect_tabular_dataset,
    conservative_reward_tabular,
    estimate_empirical_mdp,
    exact_coverage,
)

TOL = 1e-9


def _probs(pi) -> np.ndarray:
    return pi.probs if isinstance(pi, TabularPolicy) else np.asarray(pi, dtype=np.float64)


def _check_shapes(T, r, pi) -> None:
    S, A = T.shape[:2]
    if T.shape != (S, A, S) or r.shape != (S, A) or pi.shape != (S, A):
        raise ValueError(f"shape mismatch: T {T.shape}, r {r.shape}, pi {pi.shape}")


def pair_transition(T, pi) -> np.ndarray:
    """T^pi over state-action pairs: P[(s,a), (s',a')] = T(s'|s,a) pi(a'|s')."""
    T, pi = np.asarray(T), _probs(pi)
    S, A = pi.shape
    return (T[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)


def bellman_apply(T, r, pi, q, gamma: float) -> np.ndarray:
    T, r, pi, q = np.asarray(T), np.asarray(r), _probs(pi), np.asarray(q)
    _check_shapes(T, r, pi)
    if q.shape != r.shape:
        raise ValueError("q table shape mismatch")
    v = np.sum(pi * q, axis=1)
    return r + gamma * T @ v


def fixed_point_q(T, r, pi, gamma: float) -> np.ndarray:
    """Unique fixed point of the policy Bellman operator via a dense solve."""
    if not gamma < 1:
        raise ValueError("gamma must be < 1")
    T, r, pi = np.asarray(T), np.asarray(r, dtype=np.float64), _probs(pi)
    _check_shapes(T, r, pi)
    S, A = r.shape
    q = np.linalg.solve(np.eye(S * A) - gamma * pair_transition(T, pi), r.ravel()).reshape(S, A)
    resid = np.max(np.abs(bellman_apply(T, r, pi, q, gamma) - q))
    scale = max(1.0, float(np.max(np.abs(q))))
    if resid > 1e-10 * scale:
        raise ArithmeticError(f"linear solve residual {resid:.3e} too large")
    return q


def occupancy_operator(T, pi, gamma: float) -> np.ndarray:
    """S^pi = (I - gamma T^pi)^{-1} as an (S*A, S*A) matrix."""
    if not gamma < 1:
        raise ValueError("gamma must be < 1")
    P = pair_transition(T, pi)
    return np.linalg.inv(np.eye(P.shape[0]) - gamma * P)


@dataclass(frozen=True)
class MixedModel:
    """Data-backed and model-backed dynamics mixed (1-f):f with a shared reward."""

    t_bar: np.ndarray
    t_hat: np.ndarray
    r_hat: np.ndarray
    f: float

    def __post_init__(self):
        if not 0.0 <= self.f <= 1.0:
            raise ValueError("mixing fraction f must lie in [0, 1]")
        for name in ("t_bar", "t_hat"):
            t = np.asarray(getattr(self, name))
            if np.any(t < 0) or np.max(np.abs(t.sum(-1) - 1)) > 1e-12:
                raise ValueError(f"{name} must be row-stochastic")

    @property
    def transition(self) -> np.ndarray:
        return (1.0 - self.f) * np.asarray(self.t_bar) + self.f * np.asarray(self.t_hat)

    def apply(self, q, pi, gamma: float) -> np.ndarray:
        return ((1 - self.f) * bellman_apply(self.t_bar, self.r_hat, pi, q, gamma)
                + self.f * bellman_apply(self.t_hat, self.r_hat, pi, q, gamma))


def crop_fixed_point(mixed: MixedModel, pi, gamma: float) -> np.ndarray:
    return fixed_point_q(mixed.transition, mixed.r_hat, pi, gamma)


def policy_return(T, r, pi, gamma: float, mu0) -> float:
    """F(T, r, pi) = E_{s~mu0, a~pi}[Q^pi(s, a)]."""
    q = fixed_point_q(T, r, pi, gamma)
    return float(np.asarray(mu0) @ np.sum(_probs(pi) * q, axis=1))


def start_value(q, pi, mu0) -> float:
    return float(np.asarray(mu0) @ np.sum(_probs(pi) * np.asarray(q), axis=1))


def discounted_occupancy(T, pi, gamma: float, mu0) -> np.ndarray:
    """(1 - gamma) * sum_t gamma^t P(s_t = s); a probability vector."""
    if not gamma < 1:
        raise ValueError("gamma must be < 1")
    T, pi = np.asarray(T), _probs(pi)
    P_state = np.einsum("sa,sat->st", pi, T)
    d = (1.0 - gamma) * np.linalg.solve((np.eye(len(P_state)) - gamma * P_state).T, np.asarray(mu0, float))
    return d


def d_cql(pi, pi_bar) -> np.ndarray:
    """Per-state sum_a pi (pi / pi_bar - 1)."""
    pi, pi_bar = _probs(pi), _probs(pi_bar)
    if np.any((pi > 0) & (pi_bar <= 0)):
        raise ZeroDivisionError("pi puts mass where pi_bar has none")
    ratio = np.divide(pi, pi_bar, out=np.zeros_like(pi), where=pi > 0)
    return np.sum(pi * (ratio - 1.0), axis=1)


def optimal_policy(T, r, gamma: float, max_iter: int = 1000) -> TabularPolicy:
    """Exact policy iteration; ties go to the lowest action index."""
    T, r = np.asarray(T), np.asarray(r)
    S, A = r.shape
    actions = np.zeros(S, dtype=int)
    for _ in range(max_iter):
        pi = np.eye(A)[actions]
        q = fixed_point_q(T, r, pi, gamma)
        best = q.max(axis=1, keepdims=True)
        # keep the current action unless another is strictly better
        improve = q[np.arange(S), actions] < best[:, 0] - 1e-12 * np.maximum(1, np.abs(best[:, 0]))
        if not improve.any():
            return TabularPolicy(pi)
        actions = np.where(improve, np.argmax(q, axis=1), actions)
    raise RuntimeError("policy iteration did not converge")


# --- reports -----------------------------------------------------------------


@dataclass
class TheoryReport:
    proposition: str
    instance: str
    beta: float
    f: float
    lhs: float
    rhs: float
    margin: float  # positive when the stated inequality holds
    passed: bool
    details: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "instance": self.instance,
            "proposition": self.proposition,
            "beta": self.beta,
            "f": self.f,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "pass": int(self.passed),
        }


def _as_empirical(data) -> EmpiricalMDP:
    return estimate_empirical_mdp(data) if isinstance(data, OfflineDataset) else data


def crop_reward(emp: EmpiricalMDP, beta: float, r_model=None, mu: UniformDensity | None = None) -> np.ndarray:
    """r_hat: the model reward (default the empirical mean) with the conservative penalty."""
    base = emp.r_bar if r_model is None else np.asarray(r_model)
    return conservative_reward_tabular(emp, base, beta, mu).values


def crop_q(emp: EmpiricalMDP, pi, beta: float, gamma: float, f: float = 0.5, t_hat=None,
           r_model=None, mu: UniformDensity | None = None) -> np.ndarray:
    """Q-hat^pi: fixed point of the f-mixed operator with the conservative reward."""
    t_hat = emp.t_bar if t_hat is None else t_hat
    mixed = MixedModel(emp.t_bar, t_hat, crop_reward(emp, beta, r_model, mu), f)
    return crop_fixed_point(mixed, pi, gamma)


def conservative_gap(mdp: TabularMDP, emp: EmpiricalMDP, pi, beta: float, **kw) -> np.ndarray:
    """Q^pi - Q-hat^pi per cell."""
    q = fixed_point_q(mdp.transition, mdp.reward, pi, mdp.gamma)
    return q - crop_q(emp, pi, beta, mdp.gamma, **kw)


def penalty_occupancy(mdp: TabularMDP, emp: EmpiricalMDP, pi, mu: UniformDensity | None = None) -> np.ndarray:
    """S^pi (mu / pi_bar), the per-unit-beta conservative gap in the exact regime."""
    mu = mu or UniformDensity.discrete(mdp.n_actions)
    occ = occupancy_operator(mdp.transition, pi, mdp.gamma)
    return (occ @ (mu.mu / emp.pi_bar.probs).ravel()).reshape(emp.pi_bar.probs.shape)


def verify_prop1(mdp: TabularMDP, data, pi, beta: float, f: float = 0.5, t_hat=None, r_model=None,
                 beta_grid=None, mu: UniformDensity | None = None, instance: str = "") -> TheoryReport:
    """Conservative policy evaluation: E_{mu0, pi}[Q-hat] <= E_{mu0, pi}[Q]."""
    emp = _as_empirical(data)
    kw = dict(f=f, t_hat=t_hat, r_model=r_model, mu=mu)
    q_true = fixed_point_q(mdp.transition, mdp.reward, pi, mdp.gamma)
    rhs = start_value(q_true, pi, mdp.mu0)

    def lhs_at(b):
        return start_value(crop_q(emp, pi, b, mdp.gamma, **kw), pi, mdp.mu0)

    lhs = lhs_at(beta)
    details = {}
    if beta_grid is not None:
        passing = [b for b in sorted(beta_grid) if lhs_at(b) <= rhs + TOL]
        details["beta_threshold"] = passing[0] if passing else None
    return TheoryReport("prop1", instance, beta, f, lhs, rhs, rhs - lhs, lhs <= rhs + TOL, details)


def verify_prop2(mdp: TabularMDP, data, pi, beta: float, cell1, cell2, f: float = 0.5, t_hat=None,
                 r_model=None, beta_grid=None, mu: UniformDensity | None = None, instance: str = "") -> TheoryReport:
    """Gap ordering: the rarer behavior cell carries the larger conservative gap.

    ``cell1`` and ``cell2`` are (s, a) pairs; they are reordered so cell1 has the
    smaller behavior probability.
    """
    emp = _as_empirical(data)
    pb = emp.pi_bar.probs
    p1, p2 = pb[tuple(cell1)], pb[tuple(cell2)]
    if p1 == p2:
        raise ValueError("cells have equal behavior probability; ordering undefined")
    if p1 > p2:
        cell1, cell2 = cell2, cell1
    kw = dict(f=f, t_hat=t_hat, r_model=r_model, mu=mu)

    def gaps(b):
        g = conservative_gap(mdp, emp, pi, b, **kw)
        return g[tuple(cell1)], g[tuple(cell2)]

    g1, g2 = gaps(beta)
    details = {"cell1": tuple(cell1), "cell2": tuple(cell2)}
    if beta_grid is not None:
        holding = [b for b in sorted(beta_grid) if np.subtract(*gaps(b)) > 0]
        details["beta_threshold"] = holding[0] if holding else "threshold not reached"
    return TheoryReport("prop2", instance, beta, f, g1, g2, g1 - g2, g1 > g2, details)


def verify_prop2_all_pairs(mdp: TabularMDP, data, pi, beta: float, f: float = 0.5, instance: str = "",
                           **kw) -> TheoryReport:
    """Gap ordering over every pair of cells with distinct behavior probability.

    The report carries the worst pair: lhs/rhs are the gaps at the rarer and the
    more frequent cell of that pair.
    """
    emp = _as_empirical(data)
    gap = conservative_gap(mdp, emp, pi, beta, f=f, **kw).ravel()
    p = emp.pi_bar.probs.ravel()
    rarer = p[:, None] < p[None, :]
    diff = gap[:, None] - gap[None, :]
    if not rarer.any():
        raise ValueError("all cells share one behavior probability")
    masked = np.where(rarer, diff, np.inf)
    i, j = np.unravel_index(np.argmin(masked), masked.shape)
    A = mdp.n_actions
    n_bad = int(np.sum(rarer & (diff <= 0)))
    details = {"cell1": divmod(int(i), A), "cell2": divmod(int(j), A), "n_pairs": int(rarer.sum()),
               "n_violations": n_bad}
    return TheoryReport("prop2", instance, beta, f, float(gap[i]), float(gap[j]), float(diff[i, j]),
                        n_bad == 0, details)


# --- safe policy improvement ---------------------------------------------------


@dataclass(frozen=True)
class AssumptionConstants:
    """Sampling-bias constants (C_r, C_T) and model-error bounds (eps_r, eps_T)."""

    c_r: float = 0.0
    c_t: float = 0.0
    eps_r: float = 0.0
    eps_t: float = 0.0


def tight_constants(mdp: TabularMDP, emp: EmpiricalMDP, t_hat=None, r_model=None) -> AssumptionConstants:
    """Smallest constants for which the bias and model-error bounds hold on visited cells."""
    vis = ~emp.unvisited
    root = np.sqrt(emp.counts)
    c_r = float(np.max((np.abs(emp.r_bar - mdp.reward) * root)[vis], initial=0.0))
    c_t = float(np.max((np.abs(emp.t_bar - mdp.transition).sum(-1) * root)[vis], initial=0.0))
    eps_r = eps_t = 0.0
    if r_model is not None:
        eps_r = float(np.max(np.abs(np.asarray(r_model) - emp.r_bar)[vis], initial=0.0))
    if t_hat is not None:
        eps_t = float(np.max(np.abs(np.asarray(t_hat) - emp.t_bar).sum(-1)[vis], initial=0.0))
    return AssumptionConstants(c_r, c_t, eps_r, eps_t)


def _bias_weight(emp: EmpiricalMDP, pi, d: np.ndarray) -> float:
    """sum_s d(s) / sqrt(|D(s)|) * sqrt(|A| (D_CQL(pi, pi_bar)(s) + 1))."""
    A = emp.pi_bar.n_actions
    n_s = emp.state_counts
    if np.any(n_s <= 0):
        raise ValueError("every state must be visited")
    return float(np.sum(d / np.sqrt(n_s) * np.sqrt(A * (d_cql(pi, emp.pi_bar) + 1.0))))


def delta_p(emp: EmpiricalMDP, pi, t_f, gamma: float, mu0, r_max: float, f: float,
            consts: AssumptionConstants) -> float:
    """Simulation-lemma bound on |F(T_f, R, pi) - F(T, R, pi)|."""
    d = discounted_occupancy(t_f, pi, gamma, mu0)
    bias = consts.c_t * _bias_weight(emp, pi, d) if consts.c_t else 0.0
    return gamma * r_max / (1.0 - gamma) ** 2 * (f * consts.eps_t + bias)


@dataclass(frozen=True)
class SimulationGap:
    gap: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.gap <= self.bound + TOL


def simulation_gap(mdp: TabularMDP, emp: EmpiricalMDP, t_hat, f: float, pi,
                   consts: AssumptionConstants) -> SimulationGap:
    """|F(T_f, R, pi) - F(T, R, pi)| against its simulation-lemma bound."""
    t_f = (1 - f) * emp.t_bar + f * np.asarray(t_hat)
    gap = abs(policy_return(t_f, mdp.reward, pi, mdp.gamma, mdp.mu0)
              - policy_return(mdp.transition, mdp.reward, pi, mdp.gamma, mdp.mu0))
    bound = delta_p(emp, pi, t_f, mdp.gamma, mdp.mu0, mdp.r_max, f, consts)
    return SimulationGap(gap, bound)


def safe_improvement_report(mdp: TabularMDP, data, beta: float, f: float = 0.5, t_hat=None, r_model=None,
                            pi_star=None, consts: AssumptionConstants | None = None,
                            mu: UniformDensity | None = None, instance: str = "") -> TheoryReport:
    """Check F(T, R, pi*) >= F(T, R, pi_bar) - delta with delta = Delta_R + Delta_P(pi*) + Delta_P(pi_bar).

    The penalty credit F(T_f, beta mu / pi_bar, pi*) inside Delta_R is evaluated
    exactly. The Cauchy-Schwarz product form of that credit is an upper bound,
    not a lower one, so it is reported in ``details`` but not used for the verdict.
    """
    emp = _as_empirical(data)
    if not emp.full_support:
        raise ValueError("safe-improvement bound needs every (s, a) cell visited")
    consts = consts or AssumptionConstants()
    gamma, mu0 = mdp.gamma, mdp.mu0
    mu = mu or UniformDensity.discrete(mdp.n_actions)
    t_hat = emp.t_bar if t_hat is None else np.asarray(t_hat)
    t_f = (1 - f) * emp.t_bar + f * t_hat
    r_hat = crop_reward(emp, beta, r_model, mu)
    if pi_star is None:
        pi_star = optimal_policy(t_f, r_hat, gamma)
    pi_bar = emp.pi_bar

    penalty = mu.mu / pi_bar.probs
    d_star = discounted_occupancy(t_f, pi_star, gamma, mu0)
    d_bar = discounted_occupancy(t_f, pi_bar, gamma, mu0)
    h = 1.0 / (1.0 - gamma)
    credit_star = beta * h * float(d_star @ np.sum(_probs(pi_star) * penalty, axis=1))
    credit_bar = beta * h * float(d_bar @ np.sum(pi_bar.probs * penalty, axis=1))
    bias_r = 0.0
    if consts.c_r:
        bias_r = consts.c_r * h * (_bias_weight(emp, pi_star, d_star) + _bias_weight(emp, pi_bar, d_bar))
    delta_r = bias_r + credit_bar + 2 * consts.eps_r * h - credit_star
    dp_star = delta_p(emp, pi_star, t_f, gamma, mu0, mdp.r_max, f, consts)
    dp_bar = delta_p(emp, pi_bar, t_f, gamma, mu0, mdp.r_max, f, consts)
    delta = delta_r + dp_star + dp_bar

    lhs = policy_return(mdp.transition, mdp.reward, pi_star, gamma, mu0)
    rhs_plain = policy_return(mdp.transition, mdp.reward, pi_bar, gamma, mu0)
    rhs = rhs_plain - delta
    cs_credit = beta * h * float(np.sum(d_star * np.sqrt(d_cql(pi_star, pi_bar) + 1)
                                        * np.sqrt(d_cql(np.full_like(penalty, mu.mu), pi_bar) + 1)))
    details = {
        "delta": delta, "delta_r": delta_r, "delta_p_star": dp_star, "delta_p_bar": dp_bar,
        "behavior_return": rhs_plain, "penalty_credit": credit_star, "penalty_credit_cs": cs_credit,
        "pi_star": _probs(pi_star),
    }
    return TheoryReport("prop3", instance, beta, f, lhs, rhs, lhs - rhs, lhs >= rhs - TOL, details)


# --- stock instance suite ----------------------------------------------------

STOCK_SHAPES = ((3, 2), (3, 4), (5, 2), (5, 4), (10, 2), (10, 4))
STOCK_GAMMA = 0.9


@dataclass(frozen=True)
class StockInstance:
    name: str
    mdp: TabularMDP
    behavior: TabularPolicy

    def exact(self) -> EmpiricalMDP:
        return exact_coverage(self.mdp, self.behavior)

    def sampled(self, n_steps: int = 20000, horizon: int = 50, seed: int = 0) -> EmpiricalMDP:
        data = collect_tabular_dataset(self.mdp, self.behavior, n_steps, horizon, seed)
        return estimate_empirical_mdp(data)


def stock_behavior(n_states: int, n_actions: int, rng) -> TabularPolicy:
    """Per-state permutation of the weights (A, A-1, ..., 1) / sum."""
    w = np.arange(n_actions, 0, -1, dtype=np.float64)
    w /= w.sum()
    return TabularPolicy(np.array([rng.permutation(w) for _ in range(n_states)]))


def stock_suite() -> list[StockInstance]:
    from .envs import RandomMdpSpec, make_random_mdp

    out = []
    for seed, (S, A) in enumerate(STOCK_SHAPES):
        mdp = make_random_mdp(RandomMdpSpec(S, A, gamma=STOCK_GAMMA, seed=seed))
        behavior = stock_behavior(S, A, np.random.default_rng(1000 + seed))
        out.append(StockInstance(f"random-mdp:{seed}:{S}:{A}", mdp, behavior))
    return out


def beta_doubling_argmax(mdp: TabularMDP, emp: EmpiricalMDP, beta0: float = 0.01, f: float = 0.5,
                         max_doublings: int = 40) -> float | None:
    """Smallest doubled beta where the CROP-optimal policy picks argmax pi_bar in every state,
    and keeps doing so at twice that beta. None if never reached."""
    target = np.argmax(emp.pi_bar.probs, axis=1)

    def agrees(b):
        pi = optimal_policy(emp.t_bar, crop_reward(emp, b), mdp.gamma)
        q = crop_q(emp, pi, b, mdp.gamma, f=f)
        return np.array_equal(np.argmax(q, axis=1), target)

    b = beta0
    for _ in range(max_doublings):
        if agrees(b) and agrees(2 * b):
            return b
        b *= 2
    return None
