"""Two-time-scale Lagrangian Q-learning with a learned coalition utility.

Value functions are tabular: per-agent action values keyed by a digest of
the agent's recent observations, a state-keyed nonnegative weight row, and
a coalition utility keyed by (state, coalition, position-encoded actions).
Every table keeps a frozen target copy refreshed only by :meth:`sync`.

One training round rolls out an episode, stores it, samples ``K`` stored
episodes and, per sampled episode, applies the utility update (rate eta_v),
the Q/weight update (rate eta_q) to every transition, then the multiplier
update (rate eta_lambda) and a target copy.
"""

from __future__ import annotations

import copy
import math
import random
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Any, NamedTuple

import numpy as np

from .games import members
from .markov import CoalitionStructure, weight_bound_project

PLACEHOLDER = -1
MODES = ("nucleolus", "vdn")
LAMBDA_SIGNS = ("literal", "ascent")


# -- configuration -----------------------------------------------------------------

@dataclass
class TrainConfig:
    eta_v: float = 0.2          # utility rate (fastest)
    eta_q: float = 0.1          # Q / weight rate
    eta_lambda: float = 1e-3    # multiplier rate (slowest)
    gamma: float = 0.95
    lambda_init: float = 0.0
    lambda_sign: str = "literal"
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int | None = None  # default: 20% of total_steps
    batch_episodes: int = 1
    buffer_episodes: int = 1000
    target_period: int = 1      # in sampled-episode updates
    total_steps: int = 10_000
    eval_period: int = 1_000
    eval_episodes: int = 10
    mode: str = "nucleolus"
    history: int = 4
    share_tables: bool = False
    q_init: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (self.eta_v > self.eta_q > self.eta_lambda > 0):
            raise ValueError("learning rates must satisfy eta_v > eta_q > eta_lambda > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.lambda_init < 0:
            raise ValueError("initial multiplier must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_sign not in LAMBDA_SIGNS:
            raise ValueError(f"lambda_sign must be one of {LAMBDA_SIGNS}")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("batch_episodes", "buffer_episodes", "target_period", "eval_period",
                     "eval_episodes", "history"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be nonnegative")
        if self.eps_decay_steps is not None and self.eps_decay_steps < 0:
            raise ValueError("eps_decay_steps must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def epsilon(self, step: int) -> float:
        decay = self.eps_decay_steps if self.eps_decay_steps is not None else int(0.2 * self.total_steps)
        if decay <= 0 or step >= decay:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * step / decay


# -- tables --------------------------------------------------------------------------

class ValueStore:
    """Live table plus a target copy updated only by :meth:`sync`.

    Rows are created lazily from ``default``; :meth:`read` never inserts.
    Only rows written since the last sync are copied, so a sync leaves the
    target equal to the live table at that instant.
    """

    def __init__(self, default):
        self.default = default
        self.live: dict = {}
        self.target: dict = {}
        self._dirty: set = set()

    def read(self, key):
        row = self.live.get(key)
        return self.default if row is None else row

    def read_target(self, key):
        row = self.target.get(key)
        return self.default if row is None else row

    def row(self, key):
        row = self.live.get(key)
        if row is None:
            row = self.live[key] = copy.copy(self.default)
        self._dirty.add(key)
        return row

    def sync(self):
        for key in self._dirty:
            self.target[key] = copy.copy(self.live[key])
        self._dirty.clear()

    def __len__(self):
        return len(self.live)


class AgentValueTable(ValueStore):
    """``Q_i(tau_i, .)`` rows keyed by observation-history digests."""

    def __init__(self, n_actions: int, init: float = 0.0):
        if n_actions < 1:
            raise ValueError("an agent needs at least one action")
        super().__init__([float(init)] * n_actions)
        self.n_actions = n_actions


def encode_coalition_input(c: int, joint_action, n: int) -> tuple[int, ...]:
    """Position-encode a coalition's actions: slot ``i`` holds agent ``i``'s
    action if ``i`` is in ``c``, else :data:`PLACEHOLDER`."""
    if len(joint_action) != n:
        raise ValueError(f"joint action must have {n} entries")
    return tuple(int(joint_action[i]) if c >> i & 1 else PLACEHOLDER for i in range(n))


def decode_coalition_input(encoded) -> tuple[int, tuple[int, ...]]:
    """Inverse of :func:`encode_coalition_input` on its image:
    ``(coalition, members' actions in agent order)``."""
    c = sum(1 << i for i, k in enumerate(encoded) if k != PLACEHOLDER)
    return c, tuple(int(k) for k in encoded if k != PLACEHOLDER)


class UtilityEstimator:
    """Nonnegative coalition utilities ``V(s, a_C)``.

    Unvisited entries read as 0, so ``max_{a_C} V(s, a_C)`` is the larger of
    0 and the stored values for that (state, coalition) pair — exact, with no
    enumeration of the coalition's joint action space.
    """

    def __init__(self, n_agents: int):
        self.n = n_agents
        self.store = ValueStore({})

    def value(self, skey, c: int, joint_action, target: bool = False) -> float:
        enc = encode_coalition_input(c, joint_action, self.n)
        d = (self.store.read_target if target else self.store.read)((skey, c))
        return float(d.get(enc, 0.0))

    def coalition_max(self, skey, c: int, target: bool = False) -> float:
        if c == 0:
            return 0.0
        d = (self.store.read_target if target else self.store.read)((skey, c))
        return max(0.0, max(d.values())) if d else 0.0

    def add(self, skey, c: int, joint_action, delta: float):
        row = self.store.row((skey, c))
        enc = encode_coalition_input(c, joint_action, self.n)
        row[enc] = max(0.0, row.get(enc, 0.0) + delta)

    def sync(self):
        self.store.sync()


class Transition(NamedTuple):
    state: Any
    state_key: Any
    obs_keys: tuple
    action: tuple
    reward: float
    next_state: Any
    next_state_key: Any
    next_obs_keys: tuple
    done: bool
    blocks: tuple


class ReplayBuffer:
    """FIFO of whole episodes with uniform episode sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.episodes: deque = deque(maxlen=capacity)

    def add(self, episode: list[Transition]):
        if episode:
            self.episodes.append(list(episode))

    def sample(self, k: int, rng: random.Random) -> list[list[Transition]]:
        if not self.episodes:
            return []
        return [self.episodes[rng.randrange(len(self.episodes))] for _ in range(k)]

    def __len__(self):
        return len(self.episodes)


@dataclass
class Learner:
    """All trainable state: per-agent tables (possibly shared), weights,
    utility estimator and multiplier."""

    q: list[AgentValueTable]
    weights: ValueStore
    util: UtilityEstimator
    lam: float
    gamma: float
    mode: str = "nucleolus"

    @classmethod
    def create(cls, action_sizes, config: TrainConfig) -> "Learner":
        n = len(action_sizes)
        if config.share_tables:
            if len(set(action_sizes)) != 1:
                raise ValueError("shared tables need equal action counts")
            shared = AgentValueTable(action_sizes[0], config.q_init)
            q = [shared] * n
        else:
            q = [AgentValueTable(k, config.q_init) for k in action_sizes]
        if config.mode == "vdn":
            w0 = [1.0] * n
        else:
            w0 = [float(v) for v in weight_bound_project(np.ones(n), config.gamma, config.lambda_init)]
        return cls(q, ValueStore(w0), UtilityEstimator(n), float(config.lambda_init), config.gamma, config.mode)

    @property
    def n_agents(self) -> int:
        return len(self.q)

    def tables(self) -> list[AgentValueTable]:
        seen, out = set(), []
        for t in self.q:
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        return out

    def sync_targets(self):
        for t in self.tables():
            t.sync()
        self.weights.sync()
        self.util.sync()

    def greedy(self, obs_keys) -> tuple[int, ...]:
        return select_actions(self.q, obs_keys, 0.0, None)


# -- behaviour -------------------------------------------------------------------------

def _argmax(row) -> int:
    best, idx = row[0], 0
    for k in range(1, len(row)):
        if row[k] > best:
            best, idx = row[k], k
    return idx


def select_actions(tables, obs_keys, eps: float, rng: random.Random | None) -> tuple[int, ...]:
    """Per agent: uniform random action with probability ``eps``, else the
    greedy action (lowest index on ties)."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    out = []
    for table, key in zip(tables, obs_keys):
        if table.n_actions < 1:
            raise ValueError("empty action set")
        if eps > 0 and rng.random() < eps:
            out.append(rng.randrange(table.n_actions))
        else:
            out.append(_argmax(table.read(key)))
    return tuple(out)


class HistoryTracker:
    """Rolling window of each agent's last ``window`` observations."""

    def __init__(self, n_agents: int, window: int):
        self.window = window
        self.hist = [() for _ in range(n_agents)]

    def push(self, observations) -> tuple:
        w = self.window
        self.hist = [(h + (tuple(o),))[-w:] for h, o in zip(self.hist, observations)]
        return tuple(self.hist)


# -- updates ---------------------------------------------------------------------------

def _coalition_terms(learner: Learner, skey, q_vals, target_util: bool):
    """Largest coalition excess and its (first) maximising coalition."""
    n = len(q_vals)
    best, arg = -math.inf, 0
    for c in range(1, 1 << n):
        e = learner.util.coalition_max(skey, c, target_util)
        for i in range(n):
            if c >> i & 1:
                e -= q_vals[i]
        if e > best:
            best, arg = e, c
    return best, arg


def _current_q(learner: Learner, tr: Transition) -> list[float]:
    return [learner.q[i].read(tr.obs_keys[i])[tr.action[i]] for i in range(learner.n_agents)]


def transition_xi(learner: Learner, tr: Transition, target_util: bool = False) -> float:
    return _coalition_terms(learner, tr.state_key, _current_q(learner, tr), target_util)[0]


def utility_td_update(learner: Learner, tr: Transition, next_structure: CoalitionStructure | None,
                      eta_v: float) -> float:
    """Move every realised block's ``V(s, a_C)`` by ``eta_v * delta`` with

    ``delta = R + lam * xi_target + gamma * sum_{C in CS'} max V_target(s', C)
    - sum_{C in CS} V(s, a_C)``; ``xi_target`` scores coalitions with the
    target utility and current Q. Returns ``delta``.
    """
    u = learner.util
    xi_t, _ = _coalition_terms(learner, tr.state_key, _current_q(learner, tr), True)
    nxt = 0.0
    if not tr.done and next_structure is not None:
        nxt = sum(u.coalition_max(tr.next_state_key, c, True) for c in next_structure.blocks)
    current = sum(u.value(tr.state_key, c, tr.action) for c in tr.blocks)
    delta = tr.reward + learner.lam * xi_t + learner.gamma * nxt - current
    if delta != 0.0:
        for c in tr.blocks:
            u.add(tr.state_key, c, tr.action, eta_v * delta)
    return delta


class QGradient(NamedTuple):
    residual: float
    xi: float
    argmax_coalition: int
    grad_q: list[float]   # d(0.5 residual^2) / dQ_i(tau_i, a_i)
    grad_w: list[float]   # d(0.5 residual^2) / dw_i(s)


def q_lagrangian_gradient(learner: Learner, tr: Transition) -> QGradient:
    """Gradient of ``0.5 * delta^2`` where

    ``delta = R + lam * xi(s, a) + gamma * sum_i w_target_i(s') max Q_target_i(tau'_i)
    - sum_i w_i(s) Q_i(tau_i, a_i)``.

    ``xi`` uses the live utility and live Q, so it contributes
    ``-lam`` to ``d delta / d Q_i`` for members of the maximising coalition.
    In vdn mode weights are 1 and the constraint term is absent.
    """
    n = learner.n_agents
    q_vals = _current_q(learner, tr)
    vdn = learner.mode == "vdn"
    w = [1.0] * n if vdn else project_weights(learner.weights.read(tr.state_key), learner.gamma, learner.lam)
    nxt = 0.0
    if not tr.done:
        w_next = [1.0] * n if vdn else project_weights(
            learner.weights.read_target(tr.next_state_key), learner.gamma, learner.lam)
        for i in range(n):
            nxt += w_next[i] * max(learner.q[i].read_target(tr.next_obs_keys[i]))
    if vdn:
        xi_val, c_star, lam = 0.0, 0, 0.0
    else:
        xi_val, c_star = _coalition_terms(learner, tr.state_key, q_vals, False)
        lam = learner.lam
    delta = tr.reward + lam * xi_val + learner.gamma * nxt - sum(w[i] * q_vals[i] for i in range(n))
    grad_q = [-delta * (w[i] + (lam if c_star >> i & 1 else 0.0)) for i in range(n)]
    grad_w = [0.0] * n if vdn else [-delta * q_vals[i] for i in range(n)]
    return QGradient(delta, xi_val, c_star, grad_q, grad_w)


def q_lagrangian_update(learner: Learner, tr: Transition, eta_q: float) -> QGradient:
    """One gradient step of size ``eta_q`` on Q (and, outside vdn mode, on the
    state's weight row followed by the bound projection)."""
    g = q_lagrangian_gradient(learner, tr)
    if g.residual == 0.0:
        return g
    for i in range(learner.n_agents):
        learner.q[i].row(tr.obs_keys[i])[tr.action[i]] -= eta_q * g.grad_q[i]
    if learner.mode != "vdn":
        row = learner.weights.row(tr.state_key)
        raw = [row[i] - eta_q * g.grad_w[i] for i in range(learner.n_agents)]
        row[:] = project_weights(raw, learner.gamma, learner.lam)
    return g


def project_weights(raw, gamma: float, lam: float) -> list[float]:
    """List-based twin of :func:`weight_bound_project` for one state row."""
    w = [v if v > 0.0 else 0.0 for v in raw]
    bound = 1.0 / (gamma + lam)
    total = sum(w)
    if total > bound:
        w = [v * (bound / total) for v in w]
    return w


def lambda_update(lam: float, xi_value: float, eta_lambda: float, sign: str = "literal") -> float:
    """``lam - eta * xi`` ("literal") or ``lam + eta * xi`` ("ascent"),
    projected onto ``lam >= 0``."""
    if sign not in LAMBDA_SIGNS:
        raise ValueError(f"sign must be one of {LAMBDA_SIGNS}")
    step = -eta_lambda * xi_value if sign == "literal" else eta_lambda * xi_value
    return max(0.0, lam + step)


# -- training ----------------------------------------------------------------------------

@dataclass
class EvalResult:
    mean_return: float
    mean_length: float
    return_se: float
    length_se: float
    episodes: int


def _mean_se(xs) -> tuple[float, float]:
    a = np.asarray(xs, dtype=float)
    se = float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
    return float(a.mean()), se


def run_episode(env, policy, seed, window: int, max_steps: int | None = None):
    """Roll out one episode; ``policy(obs_keys)`` returns a joint action."""
    state, obs = env.reset(seed)
    hist = HistoryTracker(env.n_agents, window)
    keys = hist.push(obs)
    total, steps, done = 0.0, 0, False
    while not done and (max_steps is None or steps < max_steps):
        state, r, obs, done = env.step(state, policy(keys))
        keys = hist.push(obs)
        total += r
        steps += 1
    return total, steps


def evaluate(learner: Learner, env, episodes: int, seed=0, window: int = 4) -> EvalResult:
    """Greedy rollouts over ``episodes`` seeded episodes."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    rets, lens = [], []
    for s in seeds:
        r, l = run_episode(env, learner.greedy, int(s), window)
        rets.append(r)
        lens.append(l)
    (mr, rse), (ml, lse) = _mean_se(rets), _mean_se(lens)
    return EvalResult(mr, ml, rse, lse, episodes)


def random_policy_baseline(env, episodes: int, seed=0) -> EvalResult:
    """Uniform random joint actions; the comparison floor."""
    rng = random.Random(seed)
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    rets, lens = [], []
    for s in seeds:
        r, l = run_episode(env, lambda keys: tuple(rng.randrange(k) for k in env.action_sizes), int(s), 1)
        rets.append(r)
        lens.append(l)
    (mr, rse), (ml, lse) = _mean_se(rets), _mean_se(lens)
    return EvalResult(mr, ml, rse, lse, episodes)


class TrainingAborted(RuntimeError):
    """Raised when the environment (or an update) fails mid-run; ``result``
    holds the learner state reached so far for checkpointing."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    learner: Learner
    metrics: list[dict] = field(default_factory=list)
    lambda_trace: list[float] = field(default_factory=list)
    steps: int = 0
    updates: int = 0


def train(env, config: TrainConfig, seed: int, callback=None) -> TrainResult:
    """Run the full loop for ``config.total_steps`` environment steps.

    Evaluation happens whenever the step counter reaches a multiple of
    ``eval_period``; each produces one metrics record (also passed to
    ``callback``). Records hold ``lambda`` at the eval step and
    ``lambda_min``, the smallest multiplier reached since the previous record,
    so nonnegativity over every update is auditable from the metrics alone.
    Deterministic given ``seed``.
    """
    config.validate()
    learner = Learner.create(env.action_sizes, config)
    result = TrainResult(learner)
    try:
        _train_loop(env, config, seed, result, callback)
    except Exception as exc:
        raise TrainingAborted(f"training aborted at step {result.steps}: {exc}", result) from exc
    return result


def _train_loop(env, config: TrainConfig, seed, result: TrainResult, callback):
    learner = result.learner
    rng = random.Random(int(np.random.SeedSequence(seed).generate_state(1)[0]))
    eval_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    buffer = ReplayBuffer(config.buffer_episodes)
    nucleolus_mode = config.mode == "nucleolus"
    xi_sum, xi_count = 0.0, 0
    lam_min = learner.lam  # smallest multiplier since the previous record
    step = 0

    while step < config.total_steps:
        state, obs = env.reset(rng.randrange(2 ** 31))
        hist = HistoryTracker(env.n_agents, config.history)
        keys = hist.push(obs)
        episode: list[Transition] = []
        done = False
        while not done and step < config.total_steps:
            a = select_actions(learner.q, keys, config.epsilon(step), rng)
            nxt, r, obs, done = env.step(state, a)
            nkeys = hist.push(obs)
            cs = env.coalition_structure(state, a)
            episode.append(Transition(state, env.state_key(state), keys, a, float(r), nxt,
                                      env.state_key(nxt), nkeys, bool(done), cs.blocks))
            state, keys = nxt, nkeys
            step += 1
            result.steps = step
            if step % config.eval_period == 0:
                ev = evaluate(learner, env, config.eval_episodes, eval_seed, config.history)
                record = {
                    "step": step,
                    "mean_return": ev.mean_return,
                    "return_se": ev.return_se,
                    "episode_length": ev.mean_length,
                    "length_se": ev.length_se,
                    "lambda": learner.lam,
                    "lambda_min": lam_min,
                    "mean_xi": xi_sum / xi_count if (nucleolus_mode and xi_count) else None,
                    "updates": result.updates,
                }
                result.metrics.append(record)
                if callback is not None:
                    callback(record)
                xi_sum, xi_count = 0.0, 0
                lam_min = learner.lam
        buffer.add(episode)

        for ep in buffer.sample(config.batch_episodes, rng):
            ep_xi = 0.0
            for tr in ep:
                if nucleolus_mode:
                    next_cs = None
                    if not tr.done:
                        a_next = learner.greedy(tr.next_obs_keys)
                        next_cs = env.coalition_structure(tr.next_state, a_next)
                    utility_td_update(learner, tr, next_cs, config.eta_v)
                g = q_lagrangian_update(learner, tr, config.eta_q)
                ep_xi += g.xi
            if nucleolus_mode:
                mean_xi = ep_xi / len(ep)
                xi_sum += ep_xi
                xi_count += len(ep)
                learner.lam = lambda_update(learner.lam, mean_xi, config.eta_lambda, config.lambda_sign)
                result.lambda_trace.append(learner.lam)
                lam_min = min(lam_min, learner.lam)
            result.updates += 1
            if result.updates % config.target_period == 0:
                learner.sync_targets()
