"""Desk-scale multi-agent environments.

All environments share a small functional interface used by the learner::

    env.n_agents, env.action_sizes
    state, obs = env.reset(seed)
    state, reward, obs, done = env.step(state, joint_action)
    env.coalition_structure(state, joint_action)
    env.state_key(state)

States are immutable, so replayed transitions can be re-evaluated later.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field

import numpy as np

from .games import CharacteristicGame, members
from .markov import CoalitionStructure, EnvModel, UtilityFunction

# -- random models for operator checks ------------------------------------------------

def random_mdp(seed, n_states: int, n_agents: int, n_actions: int, gamma: float = 0.9) -> EnvModel:
    """Random model with Dirichlet(1) transition rows, U[0,1] rewards and a
    coalition extractor from a random (state, agent, action) -> target table."""
    if not (1 <= n_states <= 8 and 1 <= n_agents <= 3 and 1 <= n_actions <= 3):
        raise ValueError("random_mdp supports |S| <= 8, n <= 3, |A_i| <= 3")
    rng = np.random.default_rng(seed)
    sizes = (n_actions,) * n_agents
    J = n_actions ** n_agents
    P = rng.dirichlet(np.ones(n_states), size=(n_states, J))
    R = rng.uniform(0.0, 1.0, size=(n_states, J))
    target = rng.integers(0, n_agents, size=(n_states, n_agents, n_actions))
    A = np.indices(sizes).reshape(n_agents, -1).T
    labels = np.stack([target[:, i, A[:, i]] for i in range(n_agents)], axis=-1)
    return EnvModel(sizes, P, R, gamma, labels)


# -- stage games ---------------------------------------------------------------------

@dataclass
class StageGameSpec:
    """Repeated subtask-assignment game.

    Each agent's action picks a subtask (unless ``mapping`` supplies labels for
    every joint action); agents on the same subtask form a block and earn that
    subtask's characteristic value. Reward is the sum over blocks.
    """

    games: list[CharacteristicGame]
    episode_length: int = 1
    mapping: dict | None = None

    def __post_init__(self):
        if not self.games:
            raise ValueError("need at least one subtask game")
        ns = {g.n for g in self.games}
        if len(ns) != 1:
            raise ValueError("all subtask games must have the same player count")
        if self.episode_length < 1:
            raise ValueError("episode length must be positive")
        if self.mapping is not None:
            self.mapping = {tuple(int(k) for k in a): tuple(int(l) for l in labs)
                            for a, labs in self.mapping.items()}
            for labs in self.mapping.values():
                if len(labs) != self.n_agents or any(not 0 <= l < len(self.games) for l in labs):
                    raise ValueError(f"bad label tuple {labs}")

    @property
    def n_agents(self) -> int:
        return self.games[0].n

    @property
    def action_sizes(self) -> tuple[int, ...]:
        if self.mapping is None:
            return (len(self.games),) * self.n_agents
        keys = np.array(list(self.mapping))
        return tuple(int(k) for k in keys.max(axis=0) + 1)

    def labels(self, joint_action) -> tuple[int, ...]:
        a = tuple(int(k) for k in joint_action)
        if len(a) != self.n_agents:
            raise ValueError(f"joint action must have {self.n_agents} entries")
        if self.mapping is None:
            if any(not 0 <= k < len(self.games) for k in a):
                raise ValueError(f"unmapped joint action {a}")
            return a
        if a not in self.mapping:
            raise ValueError(f"unmapped joint action {a}")
        return self.mapping[a]


def stage_game_step(spec: StageGameSpec, joint_action) -> tuple[float, CoalitionStructure]:
    labels = spec.labels(joint_action)
    cs = CoalitionStructure.from_labels(labels)
    reward = 0.0
    for block in cs:
        reward += spec.games[labels[members(block)[0]]].values[block]
    return float(reward), cs


def stage_game_optimum(spec: StageGameSpec) -> float:
    """Best episode return, by exhaustive search over joint actions."""
    best = max(stage_game_step(spec, a)[0]
               for a in itertools.product(*(range(k) for k in spec.action_sizes))
               if spec.mapping is None or a in spec.mapping)
    return best * spec.episode_length


def stage_game_model(spec: StageGameSpec, gamma: float = 0.9) -> EnvModel:
    """Exact model: states ``0..L-1`` are stage indices, ``L`` is absorbing."""
    L = spec.episode_length
    sizes = spec.action_sizes
    joint = list(itertools.product(*(range(k) for k in sizes)))
    S, J, n = L + 1, len(joint), spec.n_agents
    P = np.zeros((S, J, S))
    R = np.zeros((S, J))
    labels = np.zeros((S, J, n), dtype=int)
    for j, a in enumerate(joint):
        try:
            r, _ = stage_game_step(spec, a)
            lab = spec.labels(a)
        except ValueError:
            r, lab = 0.0, tuple(range(n))
        for s in range(L):
            P[s, j, s + 1] = 1.0
            R[s, j] = r
            labels[s, j] = lab
        P[L, j, L] = 1.0
        labels[L, j] = tuple(range(n))
    terminal = np.zeros(S, dtype=bool)
    terminal[L] = True
    return EnvModel(sizes, P, R, gamma, labels, terminal)


def stage_game_utility(spec: StageGameSpec) -> UtilityFunction:
    """``V(s, a_C)``: what coalition C earns on its own under its members'
    subtask choices. Requires per-agent labels (no custom mapping)."""
    if spec.mapping is not None:
        raise ValueError("coalition utilities need per-agent subtask labels")
    L = spec.episode_length

    def value(s, mask, a_c):
        if s >= L or mask == 0:
            return 0.0
        groups: dict[int, int] = {}
        for i, lab in zip(members(mask), a_c):
            groups[lab] = groups.get(lab, 0) | (1 << i)
        return float(sum(max(spec.games[lab].values[m], 0.0) for lab, m in groups.items()))

    return UtilityFunction.from_function(L + 1, spec.action_sizes, value)


def two_block_stage_game(episode_length: int = 1) -> StageGameSpec:
    """Four agents, two subtasks; each subtask pays its two most skilled
    members' skills once at least two agents join. The optimum splits the
    agents into two pairs: ``{0, 1}`` on subtask 0 and ``{2, 3}`` on subtask 1."""
    skills = np.array([[1.0, 0.9, 0.3, 0.2], [0.2, 0.3, 0.9, 1.0]])

    def subtask(g):
        def v(ms):
            if len(ms) < 2:
                return 0.0
            return float(np.sort(skills[g, list(ms)])[-2:].sum())
        return CharacteristicGame.from_function(4, v)

    return StageGameSpec([subtask(0), subtask(1)], episode_length)


def random_stage_game(seed, n_agents: int = 3, n_subtasks: int = 2, episode_length: int = 2) -> StageGameSpec:
    """Stage game with generic (tie-free) nonnegative subtask values."""
    rng = np.random.default_rng(seed)
    games = []
    for _ in range(n_subtasks):
        values = rng.uniform(0.0, 1.0, size=1 << n_agents)
        values[0] = 0.0
        games.append(CharacteristicGame(n_agents, values))
    return StageGameSpec(games, episode_length)


class StageGameEnv:
    """Episodic environment over a :class:`StageGameSpec`; the state is the
    stage index and every agent observes it."""

    def __init__(self, spec: StageGameSpec):
        self.spec = spec
        self.n_agents = spec.n_agents
        self.action_sizes = spec.action_sizes

    def reset(self, seed=None):
        return 0, self._observe(0)

    def _observe(self, t):
        return tuple((t,) for _ in range(self.n_agents))

    def step(self, state, joint_action):
        reward, _ = stage_game_step(self.spec, joint_action)
        t = state + 1
        return t, reward, self._observe(t), t >= self.spec.episode_length

    def coalition_structure(self, state, joint_action) -> CoalitionStructure:
        return CoalitionStructure.from_labels(self.spec.labels(joint_action))

    def state_key(self, state):
        return state

    def optimum(self) -> float:
        return stage_game_optimum(self.spec)


class ModelEnv:
    """Sample-based environment over an :class:`EnvModel` (every agent sees
    the state). Transitions are drawn from a generator seeded by the state's
    episode seed and step count."""

    def __init__(self, model: EnvModel, horizon: int = 50, start_state: int = 0):
        self.model = model
        self.n_agents = model.n_agents
        self.action_sizes = model.action_sizes
        self.horizon = horizon
        self.start_state = start_state

    def reset(self, seed=None):
        seed = 0 if seed is None else int(seed)
        state = (self.start_state, 0, seed)
        return state, self._observe(state)

    def _observe(self, state):
        return tuple((state[0],) for _ in range(self.n_agents))

    def step(self, state, joint_action):
        s, t, seed = state
        j = self.model.joint_index(joint_action)
        rng = random.Random(seed * 1_000_003 + t)
        nxt = int(rng.choices(range(self.model.n_states), weights=self.model.transitions[s, j])[0])
        new = (nxt, t + 1, seed)
        done = bool(self.model.terminal[nxt]) or t + 1 >= self.horizon
        return new, float(self.model.rewards[s, j]), self._observe(new), done

    def coalition_structure(self, state, joint_action):
        return self.model.coalition_structure(state[0], joint_action)

    def state_key(self, state):
        return state[0]


# -- predator-prey gridworld --------------------------------------------------------

STAY, NORTH, SOUTH, EAST, WEST = range(5)
MOVES = ((0, 0), (-1, 0), (1, 0), (0, 1), (0, -1))
ACTION_NAMES = ("stay", "N", "S", "E", "W")


@dataclass(frozen=True)
class PredatorPreyConfig:
    grid_size: int = 7
    n_predators: int = 4
    n_prey: int = 2
    step_limit: int = 200
    capture_reward: float = 10.0
    sensing_range: int | None = None
    observe_position: bool = True
    observe_predators: bool = True
    observe_velocity: bool = True
    prey_slots: int | None = None  # observe only the k nearest living prey

    def __post_init__(self):
        if self.grid_size < 5:
            raise ValueError("grid must be at least 5x5")
        if self.n_predators < 2:
            raise ValueError("need at least two predators")
        if self.n_prey < 1:
            raise ValueError("need at least one prey")
        if self.n_predators + self.n_prey > self.grid_size ** 2:
            raise ValueError("more entities than grid cells")
        if self.step_limit < 1:
            raise ValueError("step limit must be positive")
        if self.prey_slots is not None and not 1 <= self.prey_slots <= self.n_prey:
            raise ValueError("prey_slots must lie in [1, n_prey]")


@dataclass(frozen=True)
class PredatorPreyState:
    predators: tuple[tuple[int, int], ...]
    prey: tuple[tuple[int, int], ...]
    alive: tuple[bool, ...]
    step: int
    seed: int
    prey_velocity: tuple[tuple[int, int], ...]
    config: PredatorPreyConfig = field(compare=False, repr=False)

    def key(self):
        return (self.predators, self.prey, self.alive)


def _clip(pos, move, size):
    return (min(max(pos[0] + move[0], 0), size - 1), min(max(pos[1] + move[1], 0), size - 1))


def _chebyshev(p, q):
    return max(abs(p[0] - q[0]), abs(p[1] - q[1]))


def _manhattan(p, q):
    return abs(p[0] - q[0]) + abs(p[1] - q[1])


def _visible(config, p, q):
    return config.sensing_range is None or _chebyshev(p, q) <= config.sensing_range


def pp_observations(state: PredatorPreyState) -> tuple[tuple[int, ...], ...]:
    """Per-predator feature tuples of fixed length.

    Layout: own (row, col) if enabled; per prey slot ``(visible, drow, dcol)``;
    per other predator ``(visible, drow, dcol)`` if enabled; per prey slot
    velocity ``(vrow, vcol)`` if enabled. Prey slots follow prey index order,
    or with ``prey_slots=k`` hold the k nearest living visible prey (Manhattan
    distance, then index). Invisible, captured or empty slots read as zeros.
    """
    cfg = state.config
    out = []
    for i, p in enumerate(state.predators):
        if cfg.prey_slots is None:
            slots = [k if state.alive[k] and _visible(cfg, p, q) else None
                     for k, q in enumerate(state.prey)]
        else:
            seen = sorted((_manhattan(p, q), k) for k, q in enumerate(state.prey)
                          if state.alive[k] and _visible(cfg, p, q))
            slots = [k for _, k in seen[:cfg.prey_slots]]
            slots += [None] * (cfg.prey_slots - len(slots))
        feats: list[int] = []
        if cfg.observe_position:
            feats += p
        for k in slots:
            if k is None:
                feats += (0, 0, 0)
            else:
                q = state.prey[k]
                feats += (1, q[0] - p[0], q[1] - p[1])
        if cfg.observe_predators:
            for j, q in enumerate(state.predators):
                if j == i:
                    continue
                feats += (1, q[0] - p[0], q[1] - p[1]) if _visible(cfg, p, q) else (0, 0, 0)
        if cfg.observe_velocity:
            for k in slots:
                feats += state.prey_velocity[k] if k is not None else (0, 0)
        out.append(tuple(feats))
    return tuple(out)


def pp_reset(config: PredatorPreyConfig, seed) -> tuple[PredatorPreyState, tuple]:
    """Uniform non-overlapping placement of predators then prey."""
    rng = np.random.default_rng(seed)
    cells = rng.choice(config.grid_size ** 2, size=config.n_predators + config.n_prey, replace=False)
    pos = [(int(c) // config.grid_size, int(c) % config.grid_size) for c in cells]
    state = PredatorPreyState(
        predators=tuple(pos[:config.n_predators]),
        prey=tuple(pos[config.n_predators:]),
        alive=(True,) * config.n_prey,
        step=0,
        seed=int(np.random.SeedSequence(seed).generate_state(1)[0]),
        prey_velocity=((0, 0),) * config.n_prey,
        config=config,
    )
    return state, pp_observations(state)


def pp_step(state: PredatorPreyState, joint_action) -> tuple[PredatorPreyState, float, tuple, bool]:
    """Predators move; any living prey with two or more predators within
    Chebyshev distance 1 is captured; surviving prey then flee."""
    cfg = state.config
    if len(joint_action) != cfg.n_predators:
        raise ValueError(f"expected {cfg.n_predators} actions")
    for a in joint_action:
        if a not in range(5):
            raise ValueError(f"invalid action {a!r}; use 0-4 ({', '.join(ACTION_NAMES)})")
    size = cfg.grid_size
    predators = tuple(_clip(p, MOVES[a], size) for p, a in zip(state.predators, joint_action))

    alive = list(state.alive)
    captures = 0
    for k, q in enumerate(state.prey):
        if alive[k] and sum(_chebyshev(p, q) <= 1 for p in predators) >= 2:
            alive[k] = False
            captures += 1

    rng = random.Random(state.seed * 1_000_003 + state.step)
    prey, velocity = [], []
    for k, q in enumerate(state.prey):
        if not alive[k]:
            prey.append(q)
            velocity.append((0, 0))
            continue
        options = {}
        for m in MOVES:
            dest = _clip(q, m, size)
            options.setdefault(dest, min(_manhattan(dest, p) for p in predators))
        best = max(options.values())
        dest = rng.choice([d for d, v in options.items() if v == best])
        prey.append(dest)
        velocity.append((dest[0] - q[0], dest[1] - q[1]))

    nxt = PredatorPreyState(predators, tuple(prey), tuple(alive), state.step + 1, state.seed,
                            tuple(velocity), cfg)
    done = not any(alive) or nxt.step >= cfg.step_limit
    return nxt, cfg.capture_reward * captures, pp_observations(nxt), done


def pp_coalition_structure(state: PredatorPreyState, joint_action) -> CoalitionStructure:
    """Group predators by the living prey nearest (Manhattan) to their
    post-move cell; predators sensing no living prey stay alone."""
    cfg = state.config
    labels = []
    for i, (p, a) in enumerate(zip(state.predators, joint_action)):
        dest = _clip(p, MOVES[a], cfg.grid_size)
        best, target = None, None
        for k, (q, alive) in enumerate(zip(state.prey, state.alive)):
            if not alive or not _visible(cfg, dest, q):
                continue
            d = _manhattan(dest, q)
            if best is None or d < best:
                best, target = d, k
        labels.append(target if target is not None else -1 - i)
    return CoalitionStructure.from_labels(labels)


def chase_action(predator, prey) -> int:
    """Move along the axis with the larger gap toward ``prey`` (rows first on ties)."""
    dr, dc = prey[0] - predator[0], prey[1] - predator[1]
    if dr == 0 and dc == 0:
        return STAY
    if abs(dr) >= abs(dc):
        return SOUTH if dr > 0 else NORTH
    return EAST if dc > 0 else WEST


class PredatorPreyEnv:
    def __init__(self, config: PredatorPreyConfig | None = None, **kwargs):
        self.config = config if config is not None else PredatorPreyConfig(**kwargs)
        self.n_agents = self.config.n_predators
        self.action_sizes = (5,) * self.n_agents

    def reset(self, seed=None):
        return pp_reset(self.config, seed)

    def step(self, state, joint_action):
        return pp_step(state, joint_action)

    def coalition_structure(self, state, joint_action):
        return pp_coalition_structure(state, joint_action)

    def state_key(self, state):
        return state.key()
