"""Nucleolus-based credit assignment for cooperative multi-agent Q-learning."""

from .games import (
    CharacteristicGame,
    NucleolusError,
    NucleolusSolution,
    Ordering,
    core_contains,
    excess,
    excess_sequence,
    lex_compare,
    nucleolus,
    nucleolus_oracle,
    shapley,
)
from .estimators import (
    EqualSplitTransformer,
    NucleolusQIteration,
    NucleolusQLearner,
    NucleolusTransformer,
    ShapleyTransformer,
)
from .markov import CoalitionStructure, EnvModel, QEnsemble, UtilityFunction, apply_operator, fixed_point
from .learner import TrainConfig, evaluate, train
from .environments import PredatorPreyConfig, PredatorPreyEnv, StageGameEnv, two_block_stage_game
from .lp import LPResult, solve_linear_program

__version__ = "0.1.0"
