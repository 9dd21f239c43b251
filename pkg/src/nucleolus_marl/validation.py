"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .games import MAX_PLAYERS, CharacteristicGame


def n_players_from_width(width: int) -> int:
    n = int(width).bit_length() - 1
    if width < 2 or 1 << n != width or n > MAX_PLAYERS:
        raise ValueError(f"game rows must have 2**n columns (n <= {MAX_PLAYERS}), got {width}")
    return n


def check_games(X) -> np.ndarray:
    """Validate a 2-D array of games, one characteristic function per row.

    Column ``m`` holds the value of coalition mask ``m``; column 0 must be 0.
    A single :class:`CharacteristicGame` or a list of them is also accepted.
    """
    if isinstance(X, CharacteristicGame):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], CharacteristicGame):
        widths = {g.values.size for g in X}
        if len(widths) != 1:
            raise ValueError("all games must have the same number of players")
        X = np.stack([g.values for g in X])
    X = check_array(X, dtype=float, ensure_2d=True)
    n_players_from_width(X.shape[1])
    if np.any(X[:, 0] != 0):
        raise ValueError("column 0 (empty coalition) must be zero")
    return X


def check_gamma_lambda(gamma: float, lam: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    if lam < 0:
        raise ValueError(f"multiplier must be nonnegative, got {lam}")
    if gamma + lam <= 0:
        raise ValueError("gamma + lambda must be positive for the weight bound")


def check_stochastic_rows(P: np.ndarray, atol: float = 1e-9) -> None:
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        raise ValueError("transition probabilities must be finite and nonnegative")
    sums = P.sum(axis=-1)
    bad = np.abs(sums - 1.0) > atol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"transition row {idx} sums to {float(sums[idx]):.12g}, expected 1")


def check_probability(p: float, name: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p
