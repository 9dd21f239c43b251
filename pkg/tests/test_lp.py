import numpy as np
import pytest

from nucleolus_marl.games import majority_game, membership_matrix
from nucleolus_marl.lp import INFEASIBLE, UNBOUNDED, solve_linear_program


def test_trivial_minimum():
    res = solve_linear_program([1.0], A_ub=[[-1.0]], b_ub=[0.0])
    assert res.ok
    assert res.fun == pytest.approx(0.0)


def test_infeasible_pair():
    res = solve_linear_program([0.0], A_ub=[[-1.0], [1.0]], b_ub=[-1.0, 0.0])
    assert res.status == INFEASIBLE
    assert not res.ok


def test_unbounded():
    res = solve_linear_program([1.0])
    assert res.status == UNBOUNDED


def test_majority_level_one():
    # min eps s.t. x(C) + eps >= v(C) for proper C, sum x = 1
    g = majority_game(3)
    M = membership_matrix(3)[1:-1]
    A_ub = np.hstack([-M, -np.ones((6, 1))])
    res = solve_linear_program([0, 0, 0, 1], A_ub, -g.values[1:-1], [[1, 1, 1, 0]], [1.0])
    assert res.fun == pytest.approx(1 / 3)
    # pair constraints bind, singleton ones do not
    pairs = [i for i, m in enumerate(range(1, 7)) if bin(m).count("1") == 2]
    assert np.all(res.ineq_duals[pairs] > 1e-7)
    assert np.all(res.ineq_duals >= -1e-12)
