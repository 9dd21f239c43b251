"""Static transferable-utility games: excess, core, nucleolus, Shapley value.

Coalitions are integer bitmasks over players ``0..n-1``; a game stores its
characteristic function as a dense array of length ``2**n`` indexed by mask.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial
from typing import Callable, Iterable, Mapping

import numpy as np

from .lp import solve_linear_program

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
TIGHTNESS_TOL = 1e-7
COMPARISON_TOL = 1e-8
MAX_PLAYERS = 16


class NucleolusError(RuntimeError):
    """The sequential LP scheme failed; ``level`` is the level being solved."""

    def __init__(self, message: str, level: int):
        super().__init__(f"{message} (at level {level})")
        self.level = level


class Ordering(enum.IntEnum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


# -- coalition helpers -------------------------------------------------------

def coalition(members: Iterable[int]) -> int:
    mask = 0
    for i in members:
        if i < 0:
            raise ValueError(f"negative player index {i}")
        mask |= 1 << i
    return mask


def members(mask: int) -> tuple[int, ...]:
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return tuple(out)


def grand_coalition(n: int) -> int:
    return (1 << n) - 1


@lru_cache(maxsize=None)
def membership_matrix(n: int) -> np.ndarray:
    """Boolean-as-float matrix ``M[mask, i] = 1`` iff player ``i`` in ``mask``."""
    masks = np.arange(1 << n)
    m = ((masks[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def coalition_sizes(n: int) -> np.ndarray:
    sizes = membership_matrix(n).sum(axis=1).astype(int)
    sizes.setflags(write=False)
    return sizes


# -- the game ----------------------------------------------------------------

@dataclass(frozen=True)
class CharacteristicGame:
    n: int
    values: np.ndarray

    def __post_init__(self):
        if not 1 <= self.n <= MAX_PLAYERS:
            raise ValueError(f"player count must be in [1, {MAX_PLAYERS}], got {self.n}")
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != 1 << self.n:
            raise ValueError(f"expected {1 << self.n} coalition values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("coalition values must be finite")
        if values[0] != 0.0:
            raise ValueError("the empty coalition must have value 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def grand(self) -> int:
        return grand_coalition(self.n)

    @property
    def grand_value(self) -> float:
        return float(self.values[self.grand])

    def value(self, mask: int) -> float:
        return float(self.values[mask])

    @classmethod
    def from_function(cls, n: int, fn: Callable[[tuple[int, ...]], float]) -> "CharacteristicGame":
        values = np.zeros(1 << n)
        for mask in range(1, 1 << n):
            values[mask] = fn(members(mask))
        return cls(n, values)

    @classmethod
    def from_mapping(cls, n: int, mapping: Mapping[int, float]) -> "CharacteristicGame":
        """Build from ``{mask: value}``; every non-empty coalition must be present."""
        values = np.zeros(1 << n)
        missing = [m for m in range(1, 1 << n) if m not in mapping]
        if missing:
            raise ValueError(f"missing coalition values for masks {missing[:8]}"
                             + (" ..." if len(missing) > 8 else ""))
        for mask, v in mapping.items():
            if not 0 <= mask < 1 << n:
                raise ValueError(f"coalition mask {mask} out of range for n={n}")
            values[mask] = v
        return cls(n, values)

    def permuted(self, perm: Iterable[int]) -> "CharacteristicGame":
        """Relabel players: old player ``i`` becomes new player ``perm[i]``."""
        perm = list(perm)
        if sorted(perm) != list(range(self.n)):
            raise ValueError("perm must be a permutation of range(n)")
        values = np.zeros_like(self.values)
        for mask in range(1 << self.n):
            values[coalition(perm[i] for i in members(mask))] = self.values[mask]
        return CharacteristicGame(self.n, values)


def _as_payoff(game: CharacteristicGame, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != game.n:
        raise ValueError(f"payoff vector has length {x.size}, game has {game.n} players")
    return x


def is_efficient(game: CharacteristicGame, x, tol: float = FEASIBILITY_TOL) -> bool:
    x = _as_payoff(game, x)
    return abs(x.sum() - game.grand_value) <= tol * max(1.0, abs(game.grand_value))


# -- excess and its ordering ---------------------------------------------------

def excess(game: CharacteristicGame, c: int, x) -> float:
    x = _as_payoff(game, x)
    if not 0 <= c < 1 << game.n:
        raise ValueError(f"coalition mask {c} out of range for n={game.n}")
    if c == 0:
        return 0.0
    return game.value(c) - float(sum(x[i] for i in members(c)))


def excess_vector(game: CharacteristicGame, x) -> np.ndarray:
    """Unsorted excesses of all ``2**n`` coalitions, indexed by mask."""
    x = _as_payoff(game, x)
    return game.values - membership_matrix(game.n) @ x


def excess_sequence(game: CharacteristicGame, x) -> np.ndarray:
    """All ``2**n`` excesses (empty and grand coalition included), non-increasing."""
    return np.sort(excess_vector(game, x))[::-1]


def lex_compare(a, b, tol: float = COMPARISON_TOL) -> Ordering:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"sequences differ in length: {a.shape} vs {b.shape}")
    diff = a - b
    idx = np.flatnonzero(np.abs(diff) > tol)
    if idx.size == 0:
        return Ordering.EQUAL
    return Ordering.LESS if diff[idx[0]] < 0 else Ordering.GREATER


def core_contains(game: CharacteristicGame, x, tol: float = COMPARISON_TOL) -> bool:
    x = _as_payoff(game, x)
    if not is_efficient(game, x):
        raise ValueError("core membership is only defined for efficient payoff vectors")
    return bool(np.all(excess_vector(game, x)[1:] <= tol))


def least_core_value(game: CharacteristicGame) -> float:
    """Smallest achievable maximum excess over proper coalitions (the core is
    non-empty iff this is <= 0)."""
    n = game.n
    if n == 1:
        return 0.0
    M = membership_matrix(n)[1:-1]
    A_ub = np.hstack([-M, -np.ones((M.shape[0], 1))])
    res = solve_linear_program(
        np.r_[np.zeros(n), 1.0], A_ub, -game.values[1:-1],
        np.r_[np.ones(n), 0.0][None, :], [game.grand_value])
    if not res.ok:
        raise NucleolusError(f"least-core LP {res.status}", 1)
    return res.fun


# -- nucleolus -----------------------------------------------------------------

@dataclass
class Level:
    excess: float
    coalitions: frozenset[int]


@dataclass
class NucleolusSolution:
    allocation: np.ndarray
    levels: list[Level] = field(default_factory=list)
    lp_iterations: int = 0


class _Span:
    """Incrementally maintained orthonormal basis of fixed coalition vectors."""

    def __init__(self, n: int):
        self.n = n
        self.basis = np.empty((0, n))

    def residual(self, vectors: np.ndarray) -> np.ndarray:
        proj = vectors @ self.basis.T @ self.basis if len(self.basis) else 0.0
        return np.linalg.norm(vectors - proj, axis=-1)

    def add(self, v: np.ndarray) -> bool:
        r = v - (v @ self.basis.T @ self.basis if len(self.basis) else 0.0)
        norm = np.linalg.norm(r)
        if norm <= 1e-9:
            return False
        self.basis = np.vstack([self.basis, r / norm])
        return True

    @property
    def rank(self) -> int:
        return len(self.basis)


def nucleolus(game: CharacteristicGame, imputation: str = "pre",
              tight_tol: float = TIGHTNESS_TOL) -> NucleolusSolution:
    """Lexicographically minimal excess allocation by sequential LPs.

    Level ``k`` minimises the largest excess among unfixed coalitions subject
    to efficiency and the equalities fixed at earlier levels. Coalitions whose
    constraint binds at every optimum of that LP (positive dual, or confirmed
    by a re-solve that tries to push their excess below the level) are fixed
    at the level value. Coalitions whose payoff is already implied by fixed
    ones drop out. Stops once the fixed vectors span all ``n`` coordinates.

    ``imputation="pre"`` searches the efficiency hyperplane; ``"individual"``
    adds ``x_i >= v({i})``.
    """
    if imputation not in ("pre", "individual"):
        raise ValueError("imputation must be 'pre' or 'individual'")
    n = game.n
    if n == 1:
        return NucleolusSolution(np.array([game.grand_value]))

    M = membership_matrix(n)
    v = game.values
    bounds = [(None, None)] * n + [(None, None)]
    if imputation == "individual":
        if sum(v[1 << i] for i in range(n)) > game.grand_value + FEASIBILITY_TOL:
            raise NucleolusError("imputation set is empty", 0)
        bounds = [(v[1 << i], None) for i in range(n)] + [(None, None)]

    span = _Span(n)
    span.add(np.ones(n))
    free = np.arange(1, (1 << n) - 1)
    fixed: list[tuple[int, float]] = []
    levels: list[Level] = []
    iterations = 0
    x = None

    def equality_rows():
        A = [np.r_[np.ones(n), 0.0]]
        b = [game.grand_value]
        for mask, e in fixed:
            A.append(np.r_[M[mask], 0.0])
            b.append(v[mask] - e)
        return np.array(A), np.array(b)

    while span.rank < n and free.size:
        level = len(levels) + 1
        A_eq, b_eq = equality_rows()
        A_ub = np.hstack([-M[free], -np.ones((free.size, 1))])
        b_ub = -v[free]
        res = solve_linear_program(np.r_[np.zeros(n), 1.0], A_ub, b_ub, A_eq, b_eq, bounds)
        if not res.ok:
            raise NucleolusError(f"level LP {res.status}: {res.message}", level)
        iterations += res.iterations
        eps = res.fun
        x = res.x[:n]
        slack = v[free] - M[free] @ x
        candidates = np.flatnonzero(np.abs(slack - eps) <= tight_tol * max(1.0, abs(eps)))
        newly = [int(free[k]) for k in candidates if res.ineq_duals[k] > tight_tol]

        # Re-solve fallback: a candidate is tight at every optimum iff its
        # excess cannot be pushed below eps while all others stay <= eps.
        check_bounds = bounds[:n] + [(eps, eps + FEASIBILITY_TOL)]
        for k in candidates:
            mask = int(free[k])
            if mask in newly:
                continue
            probe = solve_linear_program(np.r_[-M[mask], 0.0], A_ub, b_ub, A_eq, b_eq, check_bounds)
            if not probe.ok:
                raise NucleolusError(f"tightness probe {probe.status}", level)
            iterations += probe.iterations
            if v[mask] + probe.fun >= eps - tight_tol:
                newly.append(mask)
        if not newly:
            raise NucleolusError("no coalition became tight; LP is degenerate", level)

        for mask in newly:
            fixed.append((mask, eps))
            span.add(M[mask])
        levels.append(Level(float(eps), frozenset(newly)))
        logger.debug("level %d: eps=%.12g fixed=%s", level, eps, sorted(newly))
        keep = np.isin(free, newly, invert=True)
        free = free[keep]
        if free.size:
            free = free[span.residual(M[free]) > 1e-9]

    if span.rank == n:
        A_eq, b_eq = equality_rows()
        x = np.linalg.lstsq(A_eq[:, :n], b_eq, rcond=None)[0]
    return NucleolusSolution(np.asarray(x, dtype=float), levels, iterations)


def nucleolus_oracle(game: CharacteristicGame, resolution: float, slack: float = 0.0,
                     max_points: int = 5_000_000) -> np.ndarray:
    """Brute-force nucleolus on a lattice of efficient payoff vectors.

    Lattice points are ``equal_split + resolution * k`` for integer ``k`` with
    zero sum, restricted to a box any pre-nucleolus must lie in. Returns the
    point whose excess sequence is lexicographically smallest (entries within
    ``slack`` count as equal), ties going to the lexicographically smallest
    payoff vector.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    n = game.n
    if n > 4:
        raise ValueError("the grid oracle supports at most 4 players")
    x0 = np.full(n, game.grand_value / n)
    if n == 1:
        return x0
    v = game.values
    full = game.grand
    eps0 = float(np.max(excess_vector(game, x0)[1:-1]))
    lo = np.array([v[1 << i] - eps0 for i in range(n)])
    hi = np.array([game.grand_value - v[full ^ (1 << i)] + eps0 for i in range(n)])

    k_lo = np.floor((lo - x0) / resolution).astype(int) - 1
    k_hi = np.ceil((hi - x0) / resolution).astype(int) + 1
    count = int(np.prod(k_hi[:-1] - k_lo[:-1] + 1))
    if count > max_points:
        raise ValueError(f"grid would hold {count} points; use a coarser resolution")
    axes = [np.arange(k_lo[i], k_hi[i] + 1) for i in range(n - 1)]
    K = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n - 1)
    K = np.hstack([K, -K.sum(axis=1, keepdims=True)])
    K = K[(K[:, -1] >= k_lo[-1]) & (K[:, -1] <= k_hi[-1])]
    X = x0 + resolution * K
    X[:, -1] = game.grand_value - X[:, :-1].sum(axis=1)

    theta = -np.sort(-(v[None, :] - X @ membership_matrix(n).T), axis=1)
    alive = np.arange(len(X))
    for j in range(theta.shape[1]):
        col = theta[alive, j]
        alive = alive[col <= col.min() + slack + 1e-12]
        if alive.size == 1:
            break
    order = np.lexsort(X[alive].T[::-1])
    return X[alive[order[0]]]


# -- comparators ---------------------------------------------------------------

def shapley(game: CharacteristicGame) -> np.ndarray:
    """Exact Shapley value by the subset formula."""
    n = game.n
    if n > 12:
        raise ValueError("exact Shapley value is limited to 12 players")
    sizes = coalition_sizes(n)
    weight = np.array([factorial(s) * factorial(n - s - 1) / factorial(n) for s in range(n)])
    phi = np.zeros(n)
    masks = np.arange(1 << n)
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        marginal = game.values[without | (1 << i)] - game.values[without]
        phi[i] = np.sum(weight[sizes[without]] * marginal)
    return phi


def equal_split(game: CharacteristicGame) -> np.ndarray:
    return np.full(game.n, game.grand_value / game.n)


# -- game constructors -----------------------------------------------------------

def additive_game(n: int, weights=None) -> CharacteristicGame:
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    return CharacteristicGame(n, membership_matrix(n) @ w)


def majority_game(n: int = 3) -> CharacteristicGame:
    sizes = coalition_sizes(n)
    return CharacteristicGame(n, (sizes > n // 2).astype(float))


def random_game(n: int, rng=None, low: float = 0.0, high: float = 1.0) -> CharacteristicGame:
    rng = np.random.default_rng(rng)
    values = rng.uniform(low, high, size=1 << n)
    values[0] = 0.0
    return CharacteristicGame(n, values)


def random_convex_game(n: int, rng=None) -> CharacteristicGame:
    """Supermodular game from nonnegative Harsanyi dividends."""
    rng = np.random.default_rng(rng)
    dividends = rng.uniform(0.0, 1.0, size=1 << n)
    dividends[0] = 0.0
    values = np.zeros(1 << n)
    for mask in range(1, 1 << n):
        sub = mask
        total = 0.0
        while sub:
            total += dividends[sub]
            sub = (sub - 1) & mask
        values[mask] = total
    return CharacteristicGame(n, values)


def iter_coalitions(n: int, nonempty: bool = True):
    return range(1 if nonempty else 0, 1 << n)
