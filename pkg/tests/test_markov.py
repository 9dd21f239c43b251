import itertools

import numpy as np
import pytest

from nucleolus_marl.environments import (
    random_mdp,
    random_stage_game,
    stage_game_model,
    stage_game_utility,
    two_block_stage_game,
)
from nucleolus_marl.games import CharacteristicGame, members, nucleolus_oracle
from nucleolus_marl.markov import (
    CoalitionStructure,
    EnvModel,
    QEnsemble,
    UtilityFunction,
    apply_operator,
    coalition_masks,
    consistency_check,
    contraction_ratio,
    ensemble_distance,
    fixed_point,
    global_q,
    lagrangian,
    markov_core_check,
    markov_nucleolus_allocation,
    project_weight_table,
    q_excess,
    q_excess_sequence,
    set_partitions,
    weight_bound_project,
    weight_bound_value,
    xi,
)


def chain_model(rewards, gamma=0.9):
    """Deterministic two-state chain, one agent, one action: 0 -> 1 (absorbing)."""
    P = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    return EnvModel((1,), P, np.array(rewards, dtype=float).reshape(2, 1), gamma,
                    np.zeros((2, 1, 1), dtype=int))


def random_ensemble(model, rng, lam=0.05, scale=2.0):
    q = [rng.uniform(-scale, scale, size=(model.n_states, k)) for k in model.action_sizes]
    W = project_weight_table(rng.uniform(0, 1, size=(model.n_states, model.n_agents)), model.gamma, lam)
    return QEnsemble(q, W, lam)


def brute_coalition_max(util, s, mask):
    if mask == 0:
        return 0.0
    ranges = [range(util.action_sizes[i]) for i in members(mask)]
    return max(util.value(s, mask, a) for a in itertools.product(*ranges))


def dense_operator(ens, util, model):
    """Loop-by-loop reference for one sweep of the constrained backup."""
    S, n = model.n_states, model.n_agents
    joint = list(itertools.product(*(range(k) for k in model.action_sizes)))
    cont = np.zeros(S)
    for s2 in range(S):
        if not model.terminal[s2]:
            cont[s2] = sum(max(ens.q[i][s2]) for i in range(n))
    new = [np.full((S, k), -np.inf) for k in model.action_sizes]
    for s in range(S):
        for j, a in enumerate(joint):
            if model.terminal[s]:
                target = 0.0
            else:
                ex = []
                for mask in range(1, 1 << n):
                    ex.append(brute_coalition_max(util, s, mask) - sum(ens.q[i][s, a[i]] for i in members(mask)))
                expected = sum(model.transitions[s, j, s2] * cont[s2] for s2 in range(S))
                target = model.rewards[s, j] + model.gamma * expected + ens.lam * max(ex)
            for i in range(n):
                w = ens.weights[s, j, i] if ens.weights.ndim == 3 else ens.weights[s, i]
                new[i][s, a[i]] = max(new[i][s, a[i]], w * target)
    for i in range(n):
        new[i][model.terminal] = 0.0
    return new


# -- coalition structures --------------------------------------------------------------

def test_structure_validation():
    with pytest.raises(ValueError):
        CoalitionStructure(3, (0b011, 0b010))
    with pytest.raises(ValueError):
        CoalitionStructure(3, (0b011,))
    cs = CoalitionStructure.from_labels(["a", "b", "a"])
    assert cs.blocks == (0b010, 0b101)
    assert cs.block_of(2) == 0b101


@pytest.mark.parametrize("n, bell", [(1, 1), (2, 2), (3, 5), (4, 15), (5, 52)])
def test_set_partitions_count_and_distinct(n, bell):
    parts = list(set_partitions(n))
    assert len(parts) == bell
    assert len(set(parts)) == bell


def test_coalition_masks_sampling_keeps_singletons_and_grand():
    masks = coalition_masks(12, rng=0)
    assert set(1 << i for i in range(12)) <= set(masks.tolist())
    assert (1 << 12) - 1 in masks
    assert len(coalition_masks(3)) == 7


# -- global Q, excess, xi, lagrangian ---------------------------------------------------

def test_global_q_examples():
    m = chain_model([3.0, 0.0])
    m.terminal[:] = [False, True]
    ens = QEnsemble.zeros(m, weights=np.ones((2, 1)))
    assert global_q(ens, m, 0, (0,)) == 3.0
    # deterministic successor with known Q
    m2 = chain_model([1.0, 0.0])
    ens2 = QEnsemble([np.array([[0.0], [2.5]])], np.ones((2, 1)))
    assert global_q(ens2, m2, 0, (0,)) == pytest.approx(3.5)
    # uniform over two successors with equal continuation
    P = np.zeros((3, 1, 3))
    P[0, 0, 1:] = 0.5
    P[1:, 0, 0] = 1.0
    m3 = EnvModel((1,), P, np.array([[2.0], [0], [0]]), 0.5, np.zeros((3, 1, 1), dtype=int))
    ens3 = QEnsemble([np.array([[0.0], [4.0], [4.0]])], np.ones((3, 1)))
    assert global_q(ens3, m3, 0, (0,)) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        global_q(ens3, m3, 5, (0,))


def test_q_excess_examples():
    sizes = (2,)
    util = UtilityFunction(sizes, [[np.zeros(()), np.array([3.0, 7.0])]])
    ens = QEnsemble([np.array([[5.0, 5.0]])], np.ones((1, 1)))
    assert q_excess(ens, util, 0, (0,), 1) == pytest.approx(2.0)
    assert q_excess(ens, util, 0, (0,), 0) == 0.0
    zero = UtilityFunction.zeros(1, (2, 2))
    ens2 = QEnsemble([np.array([[1.0, 2.0]]), np.array([[0.5, 4.0]])], np.ones((1, 2)))
    assert q_excess(ens2, zero, 0, (1, 0), 0b11) == pytest.approx(-2.5)


def test_q_excess_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sizes = tuple(int(k) for k in rng.integers(1, 4, size=3))
        util = UtilityFunction.random(2, sizes, rng)
        q = [rng.normal(size=(2, k)) for k in sizes]
        ens = QEnsemble(q, np.ones((2, 3)))
        s = int(rng.integers(2))
        a = tuple(int(rng.integers(k)) for k in sizes)
        expected = []
        for mask in range(8):
            e = brute_coalition_max(util, s, mask) - sum(q[i][s, a[i]] for i in members(mask))
            expected.append(e if mask else 0.0)
            assert q_excess(ens, util, s, a, mask) == pytest.approx(expected[-1])
        np.testing.assert_allclose(q_excess_sequence(ens, util, s, a), sorted(expected, reverse=True))
        assert xi(ens, util, s, a) == pytest.approx(max(expected[1:]))


def test_q_excess_sequence_single_agent_and_symmetry():
    util = UtilityFunction(( 2,), [[np.zeros(()), np.array([1.0, 0.0])]])
    ens = QEnsemble([np.array([[3.0, 0.0]])], np.ones((1, 1)))
    np.testing.assert_allclose(q_excess_sequence(ens, util, 0, (0,)), [0.0, -2.0])
    sym = UtilityFunction.from_function(1, (2, 2, 2), lambda s, m, a: float(len(a)))
    ens3 = QEnsemble([np.ones((1, 2))] * 3, np.ones((1, 3)))
    seq = q_excess_sequence(ens3, sym, 0, (0, 0, 0))
    np.testing.assert_allclose(seq, np.zeros(8))


def test_xi_zero_utility_is_negated_min_singleton():
    zero = UtilityFunction.zeros(1, (2, 2, 2))
    ens = QEnsemble([np.array([[1.0, 9]]), np.array([[0.3, 9]]), np.array([[2.0, 9]])], np.ones((1, 3)))
    assert xi(ens, zero, 0, (0, 0, 0)) == pytest.approx(-0.3)
    assert xi(ens, zero, 0, (0, 0, 0), terminal=True) == 0.0


def test_lagrangian_examples():
    util = UtilityFunction.from_function(1, (2, 2), lambda s, m, a: 4.0 if m == 3 else 1.0)
    q = [np.array([[1.0, 0.0]]), np.array([[0.5, 2.0]])]
    # excesses: {0}: 1-1=0, {1}: 1-0.5=0.5, {0,1}: 4-1.5=2.5 -> xi = 2.5
    assert lagrangian(QEnsemble(q, np.ones((1, 2)), 0.0), util, 0, (0, 0)) == pytest.approx(1.5)
    assert lagrangian(QEnsemble(q, np.ones((1, 2)), 0.2), util, 0, (0, 0)) == pytest.approx(1.5 + 0.2 * 2.5)


# -- allocation and the Markov core -------------------------------------------------------

def test_markov_nucleolus_allocation_examples():
    sym = UtilityFunction.from_function(1, (2, 2, 2), lambda s, m, a: float(len(a)) * (1 + sum(a)))
    np.testing.assert_allclose(markov_nucleolus_allocation(sym, 9.0, 0), [3, 3, 3], atol=1e-8)
    zero = UtilityFunction.zeros(1, (2, 2))
    np.testing.assert_allclose(markov_nucleolus_allocation(zero, 5.0, 0), [2.5, 2.5], atol=1e-8)
    with pytest.raises(ValueError):
        markov_nucleolus_allocation(zero, -1.0, 0)


def test_markov_nucleolus_allocation_two_agents_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        util = UtilityFunction.random(1, (2, 3), rng, high=3.0)
        total = float(rng.uniform(0, 5))
        x = markov_nucleolus_allocation(util, total, 0)
        values = util.coalition_max[0].copy()
        values[-1] = total
        y = nucleolus_oracle(CharacteristicGame(2, values), 0.01)
        assert np.max(np.abs(x - y)) <= 0.01


def test_markov_nucleolus_allocation_efficient_and_equivariant():
    rng = np.random.default_rng(2)
    for _ in range(10):
        util = UtilityFunction.random(1, (2, 2, 2), rng)
        total = float(rng.uniform(0, 4))
        x = markov_nucleolus_allocation(util, total, 0)
        assert x.sum() == pytest.approx(total, abs=1e-9)
        perm = list(rng.permutation(3))
        permuted = UtilityFunction.from_function(
            1, (2, 2, 2), lambda s, m, a: _reorder(util, perm, m, a) if m else 0.0)
        y = markov_nucleolus_allocation(permuted, total, 0)
        np.testing.assert_allclose(y, x[perm], atol=1e-7)


def _reorder(util, perm, mask, a_c):
    # new agent i plays the role of old agent perm[i]
    mem = members(mask)
    old_mask = sum(1 << perm[i] for i in mem)
    by_old = {perm[i]: a for i, a in zip(mem, a_c)}
    return util.value(0, old_mask, tuple(by_old[k] for k in members(old_mask)))


def test_markov_core_check_examples():
    m = random_mdp(0, 2, 2, 2)
    zero = UtilityFunction.zeros(2, m.action_sizes)
    assert markov_core_check(m, QEnsemble.zeros(m), zero, 0)
    tall = UtilityFunction.from_function(2, m.action_sizes, lambda s, mk, a: 5.0 if mk == 1 else 0.0)
    assert not markov_core_check(m, lambda s, i: np.ones(2), tall, 0)


def test_fixed_point_satisfies_markov_core_on_stage_games():
    spec = two_block_stage_game(episode_length=2)
    model, util = stage_game_model(spec, gamma=0.9), stage_game_utility(spec)
    W = project_weight_table(np.ones((model.n_states, 4)), 0.9, 0.05)
    res = fixed_point(model, util, W, 0.05)
    assert res.converged
    for s in range(model.n_states):
        assert markov_core_check(model, res.ensemble, util, s, tol=1e-6)


# -- weight projection ------------------------------------------------------------------

def test_weight_projection_examples():
    w = np.array([0.2, 0.3])
    np.testing.assert_array_equal(weight_bound_project(w, 0.9, 0.1), w)
    bound = 1 / 0.95
    w2 = np.array([bound, bound])  # sum of maxima = 2 * bound
    np.testing.assert_allclose(weight_bound_project(w2, 0.9, 0.05), w2 / 2)
    np.testing.assert_array_equal(weight_bound_project([-1.0, 0.5], 0.9, 0.0), [0.0, 0.5])
    with pytest.raises(ValueError):
        weight_bound_project(w, 0.0, 0.0)


def test_weight_projection_properties():
    rng = np.random.default_rng(3)
    for _ in range(200):
        g, lam = rng.uniform(0.01, 0.99), rng.uniform(0, 0.5)
        w = rng.normal(scale=3, size=(int(rng.integers(1, 5)), 3))
        p = weight_bound_project(w, g, lam)
        assert p.max(axis=1).sum() <= 1 / (g + lam) + 1e-12
        np.testing.assert_allclose(weight_bound_project(p, g, lam), p)
        np.testing.assert_array_equal(p.argmax(axis=1)[w.max(axis=1) > 0], w.argmax(axis=1)[w.max(axis=1) > 0])


# -- operator -----------------------------------------------------------------------------

def test_operator_single_step_reward():
    # zero Q and V, deterministic step into an absorbing terminal
    P = np.zeros((2, 4, 2))
    P[:, :, 1] = 1.0
    R = np.array([[1.0, 2.0, 3.0, 4.0], [0, 0, 0, 0]])
    m = EnvModel((2, 2), P, R, 0.9, np.zeros((2, 4, 2), dtype=int), terminal=[False, True])
    util = UtilityFunction.zeros(2, (2, 2))
    w = np.array([[0.3, 0.6], [0.3, 0.6]])
    out = apply_operator(QEnsemble.zeros(m, w), util, m)
    # agent 0 action 1 best partner: R=4
    np.testing.assert_allclose(out.q[0][0], [0.3 * 2, 0.3 * 4])
    np.testing.assert_allclose(out.q[1][0], [0.6 * 3, 0.6 * 4])


def test_operator_reduces_to_bellman_backup():
    rng = np.random.default_rng(4)
    S, A = 4, 3
    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.uniform(size=(S, A))
    m = EnvModel((A,), P, R, 0.8, np.zeros((S, A, 1), dtype=int))
    Q = rng.normal(size=(S, A))
    out = apply_operator(QEnsemble([Q], np.ones((S, 1)), 0.0), UtilityFunction.random(S, (A,), rng), m)
    np.testing.assert_allclose(out.q[0], R + 0.8 * P @ Q.max(axis=1))


@pytest.mark.parametrize("joint_weights", [False, True])
def test_operator_matches_dense_reference(joint_weights):
    rng = np.random.default_rng(5)
    for seed in range(10):
        m = random_mdp(seed, 4, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        m.terminal[3] = seed % 2 == 0
        util = UtilityFunction.random(m.n_states, m.action_sizes, rng)
        ens = random_ensemble(m, rng, lam=0.1)
        if joint_weights:
            raw = rng.uniform(size=(m.n_states, m.n_joint, m.n_agents))
            ens = QEnsemble(ens.q, project_weight_table(raw, m.gamma, 0.1), 0.1)
        ref = dense_operator(ens, util, m)
        out = apply_operator(ens, util, m)
        for a, b in zip(out.q, ref):
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_contraction_ratio_bound_on_random_pairs():
    rng = np.random.default_rng(6)
    for seed in range(10):
        m = random_mdp(seed, 5, 3, 2, gamma=0.9)
        util = UtilityFunction.random(m.n_states, m.action_sizes, rng)
        base = random_ensemble(m, rng)
        bound = (0.9 + 0.05) * weight_bound_value(base.weights)
        for _ in range(30):
            other = QEnsemble([rng.normal(scale=3, size=t.shape) for t in base.q], base.weights, 0.05)
            assert contraction_ratio(base, other, util, m) <= bound + 1e-9


def test_distance_is_summed_agent_sup():
    a = QEnsemble([np.zeros((2, 2)), np.zeros((2, 3))], np.ones((2, 2)))
    b = QEnsemble([np.array([[1.0, -2], [0, 0]]), np.array([[0, 0.5, 0], [3, 0, 0]])], np.ones((2, 2)))
    assert ensemble_distance(a, b) == pytest.approx(3.0)


# -- fixed point ---------------------------------------------------------------------------

def test_fixed_point_myopic_converges_in_two_sweeps():
    m = random_mdp(0, 4, 2, 2, gamma=0.0)
    util = UtilityFunction.random(4, m.action_sizes, 0)
    res = fixed_point(m, util, np.full((4, 2), 0.5), 0.0)
    assert res.converged and res.iterations <= 2


def test_fixed_point_converges_and_is_init_independent():
    rng = np.random.default_rng(7)
    for seed in range(5):
        m = random_mdp(seed, 5, 2, 3, gamma=0.9)
        util = UtilityFunction.random(m.n_states, m.action_sizes, rng)
        W = project_weight_table(rng.uniform(size=(5, 2)), 0.9, 0.05)
        r1 = fixed_point(m, util, W, 0.05, tol=1e-6)
        init = QEnsemble([rng.normal(scale=10, size=t.shape) for t in r1.ensemble.q], W, 0.05)
        r2 = fixed_point(m, util, W, 0.05, tol=1e-6, init=init)
        assert r1.converged and r2.converged
        assert r1.max_ratio < 1
        assert ensemble_distance(r1.ensemble, r2.ensemble) <= 1e-5


def test_fixed_point_rejects_unprojected_weights():
    m = random_mdp(0, 2, 2, 2)
    with pytest.raises(ValueError, match="project"):
        fixed_point(m, UtilityFunction.zeros(2, m.action_sizes), np.ones((2, 2)), 0.05)


# -- consistency -----------------------------------------------------------------------------

def test_consistency_single_agent_and_symmetric():
    m = random_mdp(1, 3, 1, 3)
    util = UtilityFunction.random(3, m.action_sizes, 1)
    res = fixed_point(m, util, np.ones((3, 1)), 0.0)
    assert all(consistency_check(res.ensemble, util, m, s) for s in range(3))
    spec = random_stage_game(0, n_agents=3, n_subtasks=1, episode_length=2)
    sm, su = stage_game_model(spec), stage_game_utility(spec)
    res = fixed_point(sm, su, project_weight_table(np.ones((3, 3)), 0.9, 0.05), 0.05)
    assert all(consistency_check(res.ensemble, su, sm, s) for s in range(3))


def test_consistency_on_two_block_stage_game():
    spec = two_block_stage_game(episode_length=3)
    model, util = stage_game_model(spec), stage_game_utility(spec)
    res = fixed_point(model, util, project_weight_table(np.ones((4, 4)), 0.9, 0.05), 0.05)
    assert res.converged
    assert all(consistency_check(res.ensemble, util, model, s) for s in range(model.n_states))


def test_envmodel_validation():
    m = random_mdp(0, 2, 1, 2)
    with pytest.raises(ValueError):
        EnvModel(m.action_sizes, m.transitions * 0.5, m.rewards, 0.9, m.cs_labels)
    with pytest.raises(ValueError):
        EnvModel(m.action_sizes, m.transitions, m.rewards, 1.0, m.cs_labels)
    with pytest.raises(ValueError):
        m.joint_index((2,))
