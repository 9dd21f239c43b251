"""Markov nucleolus on enumerable models: per-state-action excess, the
constraint-augmented Bellman operator and its fixed point.

Joint actions are enumerated in C order over ``action_sizes`` (agent 0 is
the slowest-varying axis). Per-agent values ``Q_i`` are arrays of shape
``(n_states, action_sizes[i])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator

import numpy as np

from .games import CharacteristicGame, members, membership_matrix, nucleolus
from .validation import check_stochastic_rows

EXHAUSTIVE_MAX_AGENTS = 10


class ConvergenceError(RuntimeError):
    pass


# -- coalition structures ----------------------------------------------------------

@dataclass(frozen=True)
class CoalitionStructure:
    n: int
    blocks: tuple[int, ...]

    def __post_init__(self):
        blocks = tuple(sorted(int(b) for b in self.blocks))
        seen = 0
        for b in blocks:
            if b <= 0 or b >> self.n:
                raise ValueError(f"block {b:#b} is empty or out of range for n={self.n}")
            if seen & b:
                raise ValueError("coalition structure blocks overlap")
            seen |= b
        if seen != (1 << self.n) - 1:
            raise ValueError("coalition structure does not cover every agent")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def from_labels(cls, labels) -> "CoalitionStructure":
        """Group agents that share a label (e.g. the subtask they target)."""
        groups: dict = {}
        for i, lab in enumerate(labels):
            groups[lab] = groups.get(lab, 0) | (1 << i)
        return cls(len(labels), tuple(groups.values()))

    @classmethod
    def singletons(cls, n: int) -> "CoalitionStructure":
        return cls(n, tuple(1 << i for i in range(n)))

    def block_of(self, agent: int) -> int:
        for b in self.blocks:
            if b >> agent & 1:
                return b
        raise ValueError(f"agent {agent} not in structure")

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)


def set_partitions(n: int) -> Iterator[CoalitionStructure]:
    """All partitions of ``n`` agents, via restricted growth strings."""
    labels = [0] * n

    def rec(i, k):
        if i == n:
            yield CoalitionStructure.from_labels(labels)
            return
        for lab in range(k + 1):
            labels[i] = lab
            yield from rec(i + 1, max(k, lab + 1))

    if n == 0:
        return
    yield from rec(1, 1)


# -- models ------------------------------------------------------------------------

@dataclass
class EnvModel:
    """Finite multi-agent MDP with a coalition-structure extractor.

    ``cs_labels[s, j]`` holds one label per agent for joint action index ``j``;
    agents sharing a label form a block.
    """

    action_sizes: tuple[int, ...]
    transitions: np.ndarray  # (S, J, S)
    rewards: np.ndarray  # (S, J)
    gamma: float
    cs_labels: np.ndarray  # (S, J, n)
    terminal: np.ndarray = None  # (S,) bool

    def __post_init__(self):
        self.action_sizes = tuple(int(k) for k in self.action_sizes)
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.cs_labels = np.asarray(self.cs_labels, dtype=int)
        S = self.transitions.shape[0]
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.validate()

    def validate(self):
        S, J, n = self.n_states, self.n_joint, self.n_agents
        if any(k < 1 for k in self.action_sizes):
            raise ValueError("every agent needs at least one action")
        if self.transitions.shape != (S, J, S):
            raise ValueError(f"transitions must have shape {(S, J, S)}, got {self.transitions.shape}")
        if self.rewards.shape != (S, J):
            raise ValueError(f"rewards must have shape {(S, J)}, got {self.rewards.shape}")
        if self.cs_labels.shape != (S, J, n):
            raise ValueError(f"cs_labels must have shape {(S, J, n)}, got {self.cs_labels.shape}")
        if self.terminal.shape != (S,):
            raise ValueError("terminal flags must have one entry per state")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        check_stochastic_rows(self.transitions)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.action_sizes)

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.action_sizes))

    @cached_property
    def joint_actions(self) -> np.ndarray:
        """``(J, n)`` table of per-agent actions for each joint index."""
        grids = np.indices(self.action_sizes).reshape(self.n_agents, -1)
        return grids.T.copy()

    def joint_index(self, a) -> int:
        a = tuple(int(k) for k in a)
        if len(a) != self.n_agents or any(not 0 <= k < m for k, m in zip(a, self.action_sizes)):
            raise ValueError(f"invalid joint action {a} for action sizes {self.action_sizes}")
        return int(np.ravel_multi_index(a, self.action_sizes))

    def check_state(self, s) -> int:
        if not 0 <= int(s) < self.n_states:
            raise ValueError(f"state {s} out of range")
        return int(s)

    def coalition_structure(self, s, a) -> CoalitionStructure:
        return CoalitionStructure.from_labels(self.cs_labels[self.check_state(s), self.joint_index(a)])


class UtilityFunction:
    """Coalition values ``V(s, a_C) >= 0``.

    ``tables[s][mask]`` is an array over the members' actions, with one axis
    per member in increasing agent order (a 0-d array for the empty mask).
    """

    def __init__(self, action_sizes, tables):
        self.action_sizes = tuple(int(k) for k in action_sizes)
        n = len(self.action_sizes)
        self.tables = [[np.asarray(t, dtype=float) for t in row] for row in tables]
        for s, row in enumerate(self.tables):
            if len(row) != 1 << n:
                raise ValueError(f"state {s}: expected {1 << n} coalition tables")
            for mask, t in enumerate(row):
                shape = tuple(self.action_sizes[i] for i in members(mask))
                if t.shape != shape:
                    raise ValueError(f"state {s} mask {mask}: shape {t.shape}, expected {shape}")
                if np.any(t < 0) or not np.all(np.isfinite(t)):
                    raise ValueError("coalition utilities must be finite and nonnegative")
        self.coalition_max = np.array([[float(t.max()) if t.size else 0.0 for t in row]
                                       for row in self.tables])
        self.coalition_max[:, 0] = 0.0

    @property
    def n_states(self):
        return len(self.tables)

    @property
    def n_agents(self):
        return len(self.action_sizes)

    def value(self, s, mask, a_c) -> float:
        return float(self.tables[s][mask][tuple(a_c)])

    @classmethod
    def from_function(cls, n_states, action_sizes, fn: Callable) -> "UtilityFunction":
        """``fn(s, mask, a_c)`` gives the value for the members' action tuple."""
        n = len(action_sizes)
        tables = []
        for s in range(n_states):
            row = []
            for mask in range(1 << n):
                shape = tuple(action_sizes[i] for i in members(mask))
                t = np.zeros(shape)
                for idx in np.ndindex(*shape):
                    t[idx] = fn(s, mask, idx)
                row.append(t if mask else np.zeros(()))
            tables.append(row)
        return cls(action_sizes, tables)

    @classmethod
    def zeros(cls, n_states, action_sizes) -> "UtilityFunction":
        return cls.from_function(n_states, action_sizes, lambda s, m, a: 0.0)

    @classmethod
    def random(cls, n_states, action_sizes, rng=None, high=1.0) -> "UtilityFunction":
        rng = np.random.default_rng(rng)
        n = len(action_sizes)
        tables = []
        for _ in range(n_states):
            row = [np.zeros(())]
            for mask in range(1, 1 << n):
                shape = tuple(action_sizes[i] for i in members(mask))
                row.append(rng.uniform(0.0, high, size=shape))
            tables.append(row)
        return cls(action_sizes, tables)


@dataclass
class QEnsemble:
    """Per-agent values, weights and multiplier.

    ``weights`` has shape ``(S, n)`` (state-indexed) or ``(S, J, n)``
    (joint-action indexed).
    """

    q: list[np.ndarray]
    weights: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        self.q = [np.asarray(t, dtype=float) for t in self.q]
        self.weights = np.asarray(self.weights, dtype=float)
        if self.lam < 0:
            raise ValueError("multiplier must be nonnegative")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if self.weights.shape[-1] != len(self.q):
            raise ValueError("weights need one column per agent")

    @classmethod
    def zeros(cls, model: EnvModel, weights=None, lam=0.0) -> "QEnsemble":
        q = [np.zeros((model.n_states, k)) for k in model.action_sizes]
        if weights is None:
            weights = np.full((model.n_states, model.n_agents), 1.0 / model.n_agents)
        return cls(q, weights, lam)

    @property
    def n_agents(self):
        return len(self.q)

    def copy(self) -> "QEnsemble":
        return QEnsemble([t.copy() for t in self.q], self.weights.copy(), self.lam)

    def agent_values(self, s, a) -> np.ndarray:
        return np.array([self.q[i][s, a[i]] for i in range(self.n_agents)])

    def greedy(self, s) -> tuple[int, ...]:
        return tuple(int(np.argmax(t[s])) for t in self.q)


# -- coalition enumeration ------------------------------------------------------------

def coalition_masks(n: int, rng=None) -> np.ndarray:
    """Non-empty coalitions to scan: all of them up to 10 agents; beyond that
    ``2 n^2`` uniform draws plus every singleton and the grand coalition."""
    if n <= EXHAUSTIVE_MAX_AGENTS:
        return np.arange(1, 1 << n)
    rng = np.random.default_rng(rng)
    sampled = rng.integers(1, 1 << n, size=2 * n * n)
    fixed = [1 << i for i in range(n)] + [(1 << n) - 1]
    return np.unique(np.r_[sampled, fixed])


# -- per state-action quantities -------------------------------------------------------

def _check_sa(ens: QEnsemble, s, a):
    n = ens.n_agents
    a = tuple(int(k) for k in a)
    if len(a) != n:
        raise ValueError(f"joint action must have {n} entries")
    if not 0 <= s < ens.q[0].shape[0]:
        raise ValueError(f"state {s} out of range")
    for i, k in enumerate(a):
        if not 0 <= k < ens.q[i].shape[1]:
            raise ValueError(f"action {k} out of range for agent {i}")
    return int(s), a


def global_q(ens: QEnsemble, model: EnvModel, s, a) -> float:
    """Reward plus expected summed greedy continuation; no discount, matching
    the global Q-value definition (any coalition structure sums over all agents)."""
    s = model.check_state(s)
    j = model.joint_index(a)
    cont = _continuation(ens, model)
    return float(model.rewards[s, j] + model.transitions[s, j] @ cont)


def q_excess(ens: QEnsemble, util: UtilityFunction, s, a, c: int) -> float:
    s, a = _check_sa(ens, s, a)
    if c == 0:
        return 0.0
    return float(util.coalition_max[s, c] - sum(ens.q[i][s, a[i]] for i in members(c)))


def _all_excesses(ens, util, s, a) -> np.ndarray:
    n = ens.n_agents
    qa = ens.agent_values(s, a)
    e = util.coalition_max[s] - membership_matrix(n) @ qa
    e[0] = 0.0
    return e


def q_excess_sequence(ens: QEnsemble, util: UtilityFunction, s, a) -> np.ndarray:
    s, a = _check_sa(ens, s, a)
    return np.sort(_all_excesses(ens, util, s, a))[::-1]


def xi(ens: QEnsemble, util: UtilityFunction, s, a, terminal: bool = False, rng=None) -> float:
    """Largest excess over non-empty coalitions (zero at terminal states)."""
    s, a = _check_sa(ens, s, a)
    if terminal:
        return 0.0
    n = ens.n_agents
    masks = coalition_masks(n, rng)
    if n <= EXHAUSTIVE_MAX_AGENTS:
        return float(_all_excesses(ens, util, s, a)[1:].max())
    qa = ens.agent_values(s, a)
    return float(max(util.coalition_max[s, m] - sum(qa[i] for i in members(int(m))) for m in masks))


def lagrangian(ens: QEnsemble, util: UtilityFunction, s, a) -> float:
    s, a = _check_sa(ens, s, a)
    return float(ens.agent_values(s, a).sum() + ens.lam * xi(ens, util, s, a))


def markov_nucleolus_allocation(util: UtilityFunction, total: float, s, a=None) -> np.ndarray:
    """Nucleolus split of ``total`` for the game ``u(C) = max_{a_C} V(s, a_C)``."""
    if total < 0:
        raise ValueError("the total to allocate must be nonnegative")
    n = util.n_agents
    if n > 4:
        raise ValueError("exact Markov nucleolus allocation is limited to 4 agents")
    values = util.coalition_max[s].copy()
    values[0] = 0.0
    values[-1] = total
    return nucleolus(CharacteristicGame(n, values)).allocation


def markov_core_check(model: EnvModel, x_fn, v_fn: UtilityFunction, s, tol: float = 1e-8) -> bool:
    """True iff every coalition's best summed imputation covers its best utility.

    ``x_fn`` is a :class:`QEnsemble` or a callable ``(s, i) -> values over A_i``.
    """
    s = model.check_state(s)
    n = model.n_agents
    if isinstance(x_fn, QEnsemble):
        best = np.array([x_fn.q[i][s].max() for i in range(n)])
    else:
        best = np.array([np.max(np.asarray(x_fn(s, i), dtype=float)) for i in range(n)])
    covered = membership_matrix(n)[1:] @ best
    return bool(np.all(covered >= v_fn.coalition_max[s, 1:] - tol))


# -- weights -------------------------------------------------------------------------

def weight_bound_project(w_raw, gamma: float, lam: float) -> np.ndarray:
    """Clamp to nonnegative and rescale so that ``sum_i max w_i <= 1/(gamma+lam)``.

    ``w_raw`` holds agents on axis 0; any trailing axes are the contexts
    (actions) the per-agent maximum runs over.
    """
    if gamma + lam <= 0:
        raise ValueError("gamma + lambda must be positive")
    w = np.maximum(np.asarray(w_raw, dtype=float), 0.0)
    bound = 1.0 / (gamma + lam)
    total = w.reshape(w.shape[0], -1).max(axis=1).sum() if w.size else 0.0
    if total > bound:
        w = w * (bound / total)
    return w


def project_weight_table(weights, gamma: float, lam: float) -> np.ndarray:
    """Apply :func:`weight_bound_project` state by state to an ``(S, n)`` or
    ``(S, J, n)`` table."""
    W = np.asarray(weights, dtype=float)
    out = np.empty_like(W)
    for s in range(W.shape[0]):
        out[s] = np.moveaxis(weight_bound_project(np.moveaxis(W[s], -1, 0), gamma, lam), 0, -1)
    return out


def weight_bound_value(weights) -> float:
    """Largest per-state ``sum_i max w_i`` in a weight table."""
    W = np.asarray(weights, dtype=float)
    per_agent = W.reshape(W.shape[0], -1, W.shape[-1]).max(axis=1)
    return float(per_agent.sum(axis=1).max())


# -- operator ------------------------------------------------------------------------

def _continuation(ens: QEnsemble, model: EnvModel) -> np.ndarray:
    cont = sum(t.max(axis=1) for t in ens.q)
    return np.where(model.terminal, 0.0, cont)


def _joint_agent_values(ens: QEnsemble, model: EnvModel) -> np.ndarray:
    A = model.joint_actions
    return np.stack([ens.q[i][:, A[:, i]] for i in range(model.n_agents)], axis=-1)


def xi_table(ens: QEnsemble, util: UtilityFunction, model: EnvModel) -> np.ndarray:
    """``xi(s, a)`` for every state and joint index, zero at terminal states."""
    n = model.n_agents
    masks = coalition_masks(n)
    qa = _joint_agent_values(ens, model)  # (S, J, n)
    sums = qa @ membership_matrix(n)[masks].T  # (S, J, |masks|)
    table = (util.coalition_max[:, None, masks] - sums).max(axis=-1)
    table[model.terminal] = 0.0
    return table


def operator_target(ens: QEnsemble, util: UtilityFunction, model: EnvModel) -> np.ndarray:
    """Scalar backup ``R + gamma E[sum_i max Q_i(s')] + lam xi(s, a)`` per (s, j)."""
    cont = _continuation(ens, model)
    T = model.rewards + model.gamma * model.transitions @ cont + ens.lam * xi_table(ens, util, model)
    T[model.terminal] = 0.0
    return T


def apply_operator(ens: QEnsemble, util: UtilityFunction, model: EnvModel) -> QEnsemble:
    """One synchronous sweep of the weighted, constraint-augmented backup.

    Agent ``i``'s new value for ``a_i`` is ``max_{a_-i} w_i(s, a) T(s, a)``.
    """
    T = operator_target(ens, util, model)
    S, n = model.n_states, model.n_agents
    W = ens.weights if ens.weights.ndim == 3 else np.broadcast_to(ens.weights[:, None, :], (S, model.n_joint, n))
    WT = (W * T[..., None]).reshape((S, *model.action_sizes, n))
    q = []
    for i in range(n):
        other = tuple(1 + k for k in range(n) if k != i)
        qi = WT[..., i].max(axis=other) if other else WT[..., i]
        qi = np.where(model.terminal[:, None], 0.0, qi)
        q.append(qi)
    return QEnsemble(q, ens.weights, ens.lam)


def ensemble_distance(a: QEnsemble, b: QEnsemble) -> float:
    """``max_s sum_i max_{a_i} |Q_i - Q'_i|``: the sup over state-action pairs
    of the summed per-agent differences."""
    per_state = sum(np.abs(x - y).max(axis=1) for x, y in zip(a.q, b.q))
    return float(per_state.max())


def contraction_ratio(a: QEnsemble, b: QEnsemble, util: UtilityFunction, model: EnvModel) -> float:
    d = ensemble_distance(a, b)
    if d == 0:
        return 0.0
    return ensemble_distance(apply_operator(a, util, model), apply_operator(b, util, model)) / d


@dataclass
class FixedPointResult:
    ensemble: QEnsemble
    iterations: int
    converged: bool
    ratios: list[float] = field(default_factory=list)
    deltas: list[float] = field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0


def fixed_point(model: EnvModel, util: UtilityFunction, weights, lam: float,
                tol: float = 1e-6, max_iter: int = 2000, init: QEnsemble | None = None,
                strict: bool = False, criterion: str = "error") -> FixedPointResult:
    """Iterate :func:`apply_operator` to its fixed point.

    ``criterion="step"`` stops once successive sweeps differ by < ``tol``;
    ``"error"`` (default) additionally requires the a-posteriori bound
    ``d * r / (1 - r)`` on the distance to the fixed point to be < ``tol``,
    with ``r`` the largest of the last few measured ratios. Per-sweep ratios
    ``|Q_{k+1} - Q_k| / |Q_k - Q_{k-1}|`` are recorded. With ``strict`` a
    non-converged run raises :class:`ConvergenceError`.
    """
    if criterion not in ("error", "step"):
        raise ValueError(f"unknown stopping criterion {criterion!r}")
    W = np.asarray(weights, dtype=float)
    if lam < 0:
        raise ValueError(f"multiplier must be nonnegative, got {lam}")
    if model.gamma + lam > 0 and weight_bound_value(W) > 1.0 / (model.gamma + lam) + 1e-12:
        raise ValueError("weights violate sum_i max w_i <= 1/(gamma + lambda); project them first")
    ens = QEnsemble.zeros(model, W, lam) if init is None else QEnsemble([t.copy() for t in init.q], W, lam)
    ratios, deltas = [], []
    for it in range(1, max_iter + 1):
        new = apply_operator(ens, util, model)
        d = ensemble_distance(new, ens)
        if deltas and deltas[-1] > 0:
            ratios.append(d / deltas[-1])
        deltas.append(d)
        ens = new
        if d < tol and (criterion == "step" or d == 0 or _error_bound(d, ratios) < tol):
            return FixedPointResult(ens, it, True, ratios, deltas)
    if strict:
        raise ConvergenceError(f"no convergence in {max_iter} sweeps; last ratios {ratios[-5:]}")
    return FixedPointResult(ens, max_iter, False, ratios, deltas)


def _error_bound(d: float, ratios: list[float], window: int = 5) -> float:
    if not ratios:
        return np.inf
    r = max(ratios[-window:])
    return d * r / (1.0 - r) if r < 1.0 else np.inf


# -- consistency of actions and coalition structures -----------------------------------

@dataclass
class ConsistencyReport:
    state: int
    greedy_action: tuple[int, ...]
    greedy_structure: CoalitionStructure
    greedy_value: float
    best_structure: CoalitionStructure
    best_value: float

    @property
    def consistent(self) -> bool:
        return self.greedy_value >= self.best_value - 1e-6


def consistency_report(ens: QEnsemble, util: UtilityFunction, model: EnvModel, s) -> ConsistencyReport:
    """Compare the structure induced by per-agent greedy actions against the
    best value reachable under every partition of the agents.

    A partition's value is the largest backed-up target over joint actions
    that induce it; partitions no joint action induces are skipped.
    """
    s = model.check_state(s)
    n = model.n_agents
    if n > 5:
        raise ValueError("exhaustive partition enumeration is limited to 5 agents")
    T = operator_target(ens, util, model)[s]
    by_structure: dict[CoalitionStructure, float] = {}
    for j, labels in enumerate(model.cs_labels[s]):
        cs = CoalitionStructure.from_labels(labels)
        by_structure[cs] = max(by_structure.get(cs, -np.inf), float(T[j]))
    best_cs, best_val = None, -np.inf
    for cs in set_partitions(n):
        val = by_structure.get(cs, -np.inf)
        if val > best_val:
            best_cs, best_val = cs, val
    a_star = ens.greedy(s)
    j_star = model.joint_index(a_star)
    return ConsistencyReport(s, a_star, model.coalition_structure(s, a_star), float(T[j_star]),
                             best_cs, best_val)


def consistency_check(ens: QEnsemble, util: UtilityFunction, model: EnvModel, s,
                      tol: float = 1e-6) -> bool:
    if model.terminal[model.check_state(s)]:
        return True
    rep = consistency_report(ens, util, model, s)
    return rep.greedy_value >= rep.best_value - tol
