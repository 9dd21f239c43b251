import numpy as np
import pytest

from nucleolus_marl.environments import random_mdp, stage_game_model, stage_game_utility, two_block_stage_game
from nucleolus_marl.games import majority_game, random_game
from nucleolus_marl.io import (
    ConfigError,
    build_id,
    dump_json,
    game_from_document,
    load_game,
    load_model,
    parse_text,
    save_game,
    save_model,
)
from nucleolus_marl.markov import UtilityFunction


def parse_game(text):
    return game_from_document(parse_text(text, "game.yaml"))


def test_game_bitmask_string_and_member_keys():
    g = parse_game("""
n: 2
values:
  - [1, 2]
  - ["0b10", 4]
  - [[0, 1], 10]
""")
    assert g.values.tolist() == [0, 2, 4, 10]


def test_game_mapping_form():
    g = parse_game("n: 2\nvalues: {1: 2, 2: 4, 3: 10}\n")
    assert g.values.tolist() == [0, 2, 4, 10]


def test_missing_coalition_is_error_with_line():
    with pytest.raises(ConfigError, match=r"game\.yaml:3: missing coalitions: 2"):
        parse_game("n: 2\nvalues:\n  - [1, 2]\n  - [3, 10]\n")


def test_duplicate_coalition_reports_its_line():
    with pytest.raises(ConfigError, match=r"game\.yaml:5: coalition 1 listed twice"):
        parse_game("n: 2\nvalues:\n  - [1, 2]\n  - [2, 1]\n  - [1, 3]\n  - [3, 1]\n")


@pytest.mark.parametrize("text, message", [
    ("n: 2\nvalues:\n  - [1, .nan]\n  - [2, 1]\n  - [3, 1]\n", "finite"),
    ("n: 2\nvalues:\n  - [4, 1]\n", "coalition"),
    ("n: 0\nvalues: []\n", "n must be"),
    ("values: []\n", "fields 'n' and 'values'"),
    ("n: 2\nvalues:\n  - [1, 2, 3]\n", "pair"),
    ("n: 2\nvalues: [\n", "game.yaml:"),
    ("n: 2\nvalues:\n  - [0, 1]\n  - [1, 0]\n  - [2, 0]\n  - [3, 1]\n", "empty coalition"),
])
def test_malformed_games_rejected(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_game(text)


def test_game_roundtrip(tmp_path):
    g = random_game(4, rng=3)
    save_game(g, tmp_path / "g.yaml")
    np.testing.assert_array_equal(load_game(tmp_path / "g.yaml").values, g.values)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read file"):
        load_game(tmp_path / "absent.yaml")


def test_model_roundtrip_random(tmp_path):
    m = random_mdp(2, 4, 2, 3)
    util = UtilityFunction.random(4, m.action_sizes, rng=0)
    w = np.full((4, 2), 0.4)
    save_model(m, tmp_path / "m.yaml", util, w)
    m2, util2, w2 = load_model(tmp_path / "m.yaml")
    np.testing.assert_allclose(m2.transitions, m.transitions)
    np.testing.assert_allclose(m2.rewards, m.rewards)
    np.testing.assert_array_equal(m2.terminal, m.terminal)
    for s in range(4):
        for j in range(m.n_joint):
            assert m2.coalition_structure(s, m.joint_actions[j]) == m.coalition_structure(s, m.joint_actions[j])
        for mask in range(4):
            np.testing.assert_allclose(util2.tables[s][mask], util.tables[s][mask])
    np.testing.assert_allclose(w2, w)
    assert m2.gamma == m.gamma


def test_model_roundtrip_stage_game_with_terminal(tmp_path):
    spec = two_block_stage_game(2)
    m = stage_game_model(spec, 0.8)
    save_model(m, tmp_path / "m.yaml", stage_game_utility(spec))
    m2, util2, w2 = load_model(tmp_path / "m.yaml", gamma=0.5)
    assert m2.gamma == 0.5 and w2 is None
    assert m2.terminal.tolist() == m.terminal.tolist()
    assert util2.coalition_max.tolist() == stage_game_utility(spec).coalition_max.tolist()


MODEL_HEAD = """action_sizes: [2]
states: 2
gamma: 0.9
transitions:
  - [0, 0, 1, 1.0]
  - [0, 1, 0, 1.0]
  - [1, 0, 1, 1.0]
"""


def test_model_rows_must_be_stochastic():
    doc = parse_text(MODEL_HEAD + "  - [1, 1, 1, 0.5]\nrewards: []\n", "m.yaml")
    from nucleolus_marl.io import model_from_document

    with pytest.raises(ConfigError, match="m.yaml"):
        model_from_document(doc)


def test_model_bad_state_reports_line():
    from nucleolus_marl.io import model_from_document

    doc = parse_text(MODEL_HEAD + "  - [1, 1, 7, 1.0]\n", "m.yaml")
    with pytest.raises(ConfigError, match=r"m.yaml:8"):
        model_from_document(doc)


def test_dump_json_handles_numpy_and_sorts_keys():
    assert dump_json({"b": np.float64(1.5), "a": np.arange(2)}) == '{"a":[0,1],"b":1.5}'


def test_build_id_has_version_prefix():
    from nucleolus_marl import __version__

    assert build_id().startswith(__version__ + "+")


def test_majority_fixture_file_loads():
    from pathlib import Path

    g = load_game(Path(__file__).parents[1] / "configs" / "majority3.yaml")
    np.testing.assert_array_equal(g.values, majority_game(3).values)
