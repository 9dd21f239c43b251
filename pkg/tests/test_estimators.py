import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import FunctionTransformer

from nucleolus_marl.estimators import EqualSplitTransformer, NucleolusTransformer, ShapleyTransformer
from nucleolus_marl.games import majority_game, random_game


def test_transform_batch_of_games():
    X = np.stack([majority_game(3).values, random_game(3, 0).values])
    out = NucleolusTransformer().fit_transform(X)
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out[0], [1 / 3] * 3, atol=1e-8)
    np.testing.assert_allclose(out.sum(axis=1), X[:, -1])


def test_accepts_game_objects():
    out = ShapleyTransformer().fit_transform([majority_game(3)])
    np.testing.assert_allclose(out, [[1 / 3] * 3])


def test_params_and_clone():
    est = NucleolusTransformer(imputation="individual")
    assert est.get_params() == {"imputation": "individual", "tight_tol": 1e-7}
    assert clone(est).imputation == "individual"


def test_pipeline_composition():
    pipe = make_pipeline(EqualSplitTransformer(), FunctionTransformer(np.max))
    assert pipe.fit_transform([majority_game(3)]) == pytest.approx(1 / 3)


def test_rejects_bad_width_and_unfitted():
    with pytest.raises(ValueError):
        NucleolusTransformer().fit(np.zeros((1, 6)))
    with pytest.raises(Exception):
        NucleolusTransformer().transform([majority_game(3)])
    est = NucleolusTransformer().fit([majority_game(3)])
    with pytest.raises(ValueError):
        est.transform(np.zeros((1, 4)))


# -- model-based and sample-based estimators ------------------------------------------------

def test_q_iteration_matches_fixed_point():
    from nucleolus_marl.environments import random_mdp
    from nucleolus_marl.estimators import NucleolusQIteration
    from nucleolus_marl.markov import UtilityFunction, fixed_point, project_weight_table

    model = random_mdp(4, 4, 2, 3)
    util = UtilityFunction.random(4, model.action_sizes, rng=2)
    est = NucleolusQIteration(lam=0.05).fit(model, util)
    W = project_weight_table(np.ones((4, 2)), model.gamma, 0.05)
    ref = fixed_point(model, util, W, 0.05)
    assert est.converged_ and est.n_iter_ == ref.iterations
    for a, b in zip(est.ensemble_.q, ref.ensemble.q):
        np.testing.assert_array_equal(a, b)
    assert est.predict([0, 3]).shape == (2, 2)
    assert np.all(est.contraction_ratios_ <= model.gamma + 0.05 + 1e-9)


def test_q_learner_params_mirror_train_config():
    from dataclasses import fields

    from nucleolus_marl.estimators import NucleolusQLearner
    from nucleolus_marl.learner import TrainConfig

    params = set(NucleolusQLearner().get_params())
    assert params == {f.name for f in fields(TrainConfig)} | {"random_state"}
    cloned = clone(NucleolusQLearner(mode="vdn", history=1))
    assert cloned.get_params()["mode"] == "vdn"


def test_q_learner_fit_predict_score():
    from nucleolus_marl.environments import StageGameEnv, two_block_stage_game
    from nucleolus_marl.estimators import NucleolusQLearner

    env = StageGameEnv(two_block_stage_game())
    est = NucleolusQLearner(total_steps=4000, eval_period=1000, history=1, eta_lambda=1e-5, random_state=1)
    with pytest.raises(NotFittedError):
        est.predict(((0,),) * 4)
    est.fit(env)
    assert len(est.metrics_) == 4 and est.n_updates_ > 0
    assert np.all(est.lambda_trace_ >= 0)
    assert est.score(env) == pytest.approx(3.8)
    from nucleolus_marl.learner import HistoryTracker

    _, obs = env.reset(0)
    assert est.predict(HistoryTracker(4, 1).push(obs)) == (0, 0, 1, 1)


def test_q_learner_rejects_bad_params():
    from nucleolus_marl.environments import StageGameEnv, two_block_stage_game
    from nucleolus_marl.estimators import NucleolusQLearner

    with pytest.raises(ValueError):
        NucleolusQLearner(mode="qmix").fit(StageGameEnv(two_block_stage_game()))
