"""scikit-learn style wrappers for the allocation rules.

Each transformer maps a batch of games (rows of coalition values indexed by
bitmask) to a batch of payoff vectors, so allocation rules can sit inside
pipelines, ``clone`` and grid searches like any other transformer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .games import TIGHTNESS_TOL, CharacteristicGame, equal_split, nucleolus, shapley
from .validation import check_games, n_players_from_width


class _AllocationTransformer(TransformerMixin, BaseEstimator):

    def fit(self, X, y=None):
        X = check_games(X)
        self.n_features_in_ = X.shape[1]
        self.n_players_ = n_players_from_width(X.shape[1])
        return self

    def transform(self, X):
        check_is_fitted(self, "n_players_")
        X = check_games(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, fitted on {self.n_features_in_}")
        return np.stack([self._allocate(CharacteristicGame(self.n_players_, row)) for row in X])

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "n_players_")
        return np.array([f"player{i}" for i in range(self.n_players_)], dtype=object)

    def _allocate(self, game):
        raise NotImplementedError


class NucleolusTransformer(_AllocationTransformer):
    """Nucleolus of each game.

    Parameters
    ----------
    imputation : {"pre", "individual"}
        Search the efficiency hyperplane, or additionally require individual
        rationality.
    tight_tol : float
        Tolerance for declaring a coalition tight at an LP level.
    """

    def __init__(self, imputation="pre", tight_tol=TIGHTNESS_TOL):
        self.imputation = imputation
        self.tight_tol = tight_tol

    def _allocate(self, game):
        return nucleolus(game, imputation=self.imputation, tight_tol=self.tight_tol).allocation


class ShapleyTransformer(_AllocationTransformer):
    def _allocate(self, game):
        return shapley(game)


class EqualSplitTransformer(_AllocationTransformer):
    def _allocate(self, game):
        return equal_split(game)


class NucleolusQIteration(BaseEstimator):
    """Model-based solver: iterate the nucleolus operator to its fixed point.

    ``fit(model, util)`` takes an :class:`~nucleolus_marl.markov.EnvModel`
    and a :class:`~nucleolus_marl.markov.UtilityFunction`. ``weights``
    defaults to the uniform table projected onto the contraction bound.
    """

    def __init__(self, lam=0.0, weights=None, tol=1e-6, max_iter=2000, criterion="error"):
        self.lam = lam
        self.weights = weights
        self.tol = tol
        self.max_iter = max_iter
        self.criterion = criterion

    def fit(self, model, util=None):
        from .markov import UtilityFunction, fixed_point, project_weight_table

        if util is None:
            util = UtilityFunction.zeros(model.n_states, model.action_sizes)
        if self.weights is None:
            W = project_weight_table(np.ones((model.n_states, model.n_agents)), model.gamma, self.lam)
        else:
            W = np.asarray(self.weights, dtype=float)
        res = fixed_point(model, util, W, self.lam, tol=self.tol, max_iter=self.max_iter,
                          criterion=self.criterion)
        self.ensemble_ = res.ensemble
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        self.contraction_ratios_ = np.asarray(res.ratios)
        self.n_agents_ = model.n_agents
        return self

    def predict(self, states):
        """Greedy joint action for each state index."""
        check_is_fitted(self, "ensemble_")
        return np.array([self.ensemble_.greedy(int(s)) for s in np.atleast_1d(states)])


class NucleolusQLearner(BaseEstimator):
    """Sample-based learner with nucleolus credit assignment.

    ``fit(env)`` trains on an environment object (``reset``/``step``/
    ``coalition_structure``/``state_key``); ``mode="vdn"`` gives the
    unit-weight additive baseline. ``predict`` maps per-agent observation
    keys to greedy joint actions and ``score`` is the mean greedy return.
    """

    def __init__(self, mode="nucleolus", total_steps=10000, eta_q=0.1, eta_v=0.2, eta_lambda=1e-3,
                 gamma=0.95, lambda_init=0.0, lambda_sign="literal", eps_start=1.0, eps_end=0.05,
                 eps_decay_steps=None, batch_episodes=1, buffer_episodes=1000, target_period=1,
                 eval_period=1000, eval_episodes=10, history=4, share_tables=False, q_init=0.0,
                 random_state=0):
        self.mode = mode
        self.total_steps = total_steps
        self.eta_q = eta_q
        self.eta_v = eta_v
        self.eta_lambda = eta_lambda
        self.gamma = gamma
        self.lambda_init = lambda_init
        self.lambda_sign = lambda_sign
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_decay_steps = eps_decay_steps
        self.batch_episodes = batch_episodes
        self.buffer_episodes = buffer_episodes
        self.target_period = target_period
        self.eval_period = eval_period
        self.eval_episodes = eval_episodes
        self.history = history
        self.share_tables = share_tables
        self.q_init = q_init
        self.random_state = random_state

    def _config(self):
        from .learner import TrainConfig

        params = self.get_params()
        params.pop("random_state")
        return TrainConfig.from_dict(params)

    def fit(self, env, y=None):
        from .learner import train

        result = train(env, self._config(), self.random_state)
        self.learner_ = result.learner
        self.metrics_ = result.metrics
        self.lambda_trace_ = np.asarray(result.lambda_trace)
        self.n_updates_ = result.updates
        self.n_agents_ = env.n_agents
        return self

    def predict(self, obs_keys):
        check_is_fitted(self, "learner_")
        return self.learner_.greedy(obs_keys)

    def score(self, env, y=None, episodes=None, seed=0):
        from .learner import evaluate

        check_is_fitted(self, "learner_")
        return evaluate(self.learner_, env, episodes or self.eval_episodes, seed, self.history).mean_return
