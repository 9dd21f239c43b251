"""File formats: game files, model files, experiment/training configs.

All inputs are YAML (JSON is accepted as a subset). Problems are reported
as :class:`ConfigError` carrying ``file:line`` diagnostics.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import subprocess
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .games import CharacteristicGame, MAX_PLAYERS, members
from .markov import EnvModel, UtilityFunction


class ConfigError(ValueError):
    """Malformed or invalid input file / configuration."""


# -- structured text with line tracking --------------------------------------------------

class Document:
    """Parsed YAML plus the source line of every node, addressed by key path."""

    def __init__(self, data, lines: dict, source: str):
        self.data = data
        self.lines = lines
        self.source = source

    def line(self, *path) -> int | None:
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def error(self, message: str, *path) -> ConfigError:
        line = self.line(*path)
        where = f"{self.source}:{line}" if line else self.source
        return ConfigError(f"{where}: {message}")


def _record_lines(node, data, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode) and isinstance(data, dict):
        for (_, vnode), (k, v) in zip(node.value, data.items()):
            _record_lines(vnode, v, path + (k,), lines)
    elif isinstance(node, yaml.SequenceNode) and isinstance(data, list):
        for k, (vnode, v) in enumerate(zip(node.value, data)):
            _record_lines(vnode, v, path + (k,), lines)


def parse_text(text: str, source: str = "<string>") -> Document:
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = f":{mark.line + 1}" if mark else ""
        raise ConfigError(f"{source}{line}: {exc.problem or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines: dict = {}
    if node is not None:
        _record_lines(node, data, (), lines)
    return Document(data, lines, source)


def load_document(path) -> Document:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read file ({exc.strerror})") from None
    return parse_text(text, str(path))


def _require_mapping(doc: Document, data, *path) -> dict:
    if not isinstance(data, dict):
        raise doc.error("expected a mapping", *path)
    return data


# -- games -------------------------------------------------------------------------------

def _coalition_key(doc, raw, n, *path) -> int:
    if isinstance(raw, bool):
        raise doc.error("coalition must be a bitmask integer or a list of players", *path)
    if isinstance(raw, int):
        mask = raw
    elif isinstance(raw, str):
        try:
            mask = int(raw, 0)
        except ValueError:
            raise doc.error(f"bad coalition bitmask {raw!r}", *path) from None
    elif isinstance(raw, list) and all(isinstance(i, int) for i in raw):
        mask = 0
        for i in raw:
            if not 0 <= i < n:
                raise doc.error(f"player {i} out of range for n={n}", *path)
            mask |= 1 << i
    else:
        raise doc.error("coalition must be a bitmask integer or a list of players", *path)
    if not 0 <= mask < 1 << n:
        raise doc.error(f"coalition {mask} out of range for n={n}", *path)
    return mask


def _real(doc, raw, *path) -> float:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise doc.error(f"expected a number, got {raw!r}", *path)
    value = float(raw)
    if not np.isfinite(value):
        raise doc.error("value must be finite", *path)
    return value


def game_from_document(doc: Document, base=()) -> CharacteristicGame:
    data = doc.data
    for key in base:
        data = data[key]
    data = _require_mapping(doc, data, *base)
    if "n" not in data or "values" not in data:
        raise doc.error("game needs fields 'n' and 'values'", *base)
    n = data["n"]
    if isinstance(n, bool) or not isinstance(n, int) or not 1 <= n <= MAX_PLAYERS:
        raise doc.error(f"n must be an integer in [1, {MAX_PLAYERS}]", *base, "n")
    raw = data["values"]
    entries = []
    if isinstance(raw, dict):
        entries = [((*base, "values", k), k, v) for k, v in raw.items()]
    elif isinstance(raw, list):
        for idx, item in enumerate(raw):
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise doc.error("each value entry must be a [coalition, value] pair", *base, "values", idx)
            entries.append(((*base, "values", idx), item[0], item[1]))
    else:
        raise doc.error("'values' must be a list of [coalition, value] pairs", *base, "values")
    values = {}
    for path, ck, v in entries:
        mask = _coalition_key(doc, ck, n, *path)
        if mask in values:
            raise doc.error(f"coalition {mask} listed twice", *path)
        values[mask] = _real(doc, v, *path)
    if values.get(0, 0.0) != 0.0:
        raise doc.error("the empty coalition must have value 0", *base, "values")
    missing = [m for m in range(1, 1 << n) if m not in values]
    if missing:
        shown = ", ".join(str(m) for m in missing[:8])
        more = f" (+{len(missing) - 8} more)" if len(missing) > 8 else ""
        raise doc.error(f"missing coalitions: {shown}{more}", *base, "values")
    dense = np.zeros(1 << n)
    for m, v in values.items():
        dense[m] = v
    return CharacteristicGame(n, dense)


def load_game(path) -> CharacteristicGame:
    return game_from_document(load_document(path))


def game_to_dict(game: CharacteristicGame) -> dict:
    return {"n": game.n, "values": [[m, float(game.values[m])] for m in range(1, 1 << game.n)]}


class _Dumper(yaml.SafeDumper):
    """Block style at the top level, one flow-style row per record, no anchors."""

    def ignore_aliases(self, data):
        return True


def _row_list(dumper, data):
    flow = not any(isinstance(v, (list, dict)) for v in data) or len(data) <= 4
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flow)


_Dumper.add_representer(list, _row_list)


def _dump_yaml(data) -> str:
    return yaml.dump(data, Dumper=_Dumper, sort_keys=False, width=120)


def save_game(game: CharacteristicGame, path):
    Path(path).write_text(_dump_yaml(game_to_dict(game)))


# -- models --------------------------------------------------------------------------------

def _joint(doc, raw, sizes, *path) -> tuple[int, ...]:
    if isinstance(raw, int) and not isinstance(raw, bool) and len(sizes) == 1:
        raw = [raw]
    if not isinstance(raw, list) or len(raw) != len(sizes):
        raise doc.error(f"joint action must list {len(sizes)} actions", *path)
    for k, m in zip(raw, sizes):
        if isinstance(k, bool) or not isinstance(k, int) or not 0 <= k < m:
            raise doc.error(f"invalid joint action {raw} for action sizes {list(sizes)}", *path)
    return tuple(raw)


def model_from_document(doc: Document, gamma: float | None = None):
    """Returns ``(model, utility, weights_or_None)``.

    Layout::

        action_sizes: [2, 2]
        states: 3                      # count
        gamma: 0.9
        terminal: [2]
        transitions: [[s, [a0, a1], s', p], ...]
        rewards:     [[s, [a0, a1], r], ...]            # default 0
        coalitions:  [[s, [a0, a1], [l0, l1]], ...]     # default singletons
        utility:     [[s, coalition, [member actions], v], ...]   # default 0
        weights:     [[w_00, w_01], ...]                # optional, one row per state
    """
    d = _require_mapping(doc, doc.data)
    for key in ("action_sizes", "states", "transitions"):
        if key not in d:
            raise doc.error(f"model needs field {key!r}")
    sizes = d["action_sizes"]
    if not isinstance(sizes, list) or not sizes or not all(isinstance(k, int) and k >= 1 for k in sizes):
        raise doc.error("action_sizes must be a non-empty list of positive integers", "action_sizes")
    S = d["states"]
    if isinstance(S, list):
        S = len(S)
    if not isinstance(S, int) or S < 1:
        raise doc.error("states must be a positive count or a list of names", "states")
    n = len(sizes)
    grid = [tuple(a) for a in itertools.product(*(range(k) for k in sizes))]
    index = {a: j for j, a in enumerate(grid)}
    J = len(grid)

    def state(raw, *path):
        if isinstance(raw, bool) or not isinstance(raw, int) or not 0 <= raw < S:
            raise doc.error(f"state {raw!r} out of range", *path)
        return raw

    P = np.zeros((S, J, S))
    for idx, row in enumerate(d["transitions"] or []):
        path = ("transitions", idx)
        if not isinstance(row, list) or len(row) != 4:
            raise doc.error("transition entries are [s, joint_action, s', probability]", *path)
        s, a, s2 = state(row[0], *path), _joint(doc, row[1], sizes, *path), state(row[2], *path)
        P[s, index[a], s2] += _real(doc, row[3], *path)
    R = np.zeros((S, J))
    for idx, row in enumerate(d.get("rewards") or []):
        path = ("rewards", idx)
        if not isinstance(row, list) or len(row) != 3:
            raise doc.error("reward entries are [s, joint_action, reward]", *path)
        R[state(row[0], *path), index[_joint(doc, row[1], sizes, *path)]] = _real(doc, row[2], *path)
    labels = np.tile(np.arange(n), (S, J, 1))
    for idx, row in enumerate(d.get("coalitions") or []):
        path = ("coalitions", idx)
        if not isinstance(row, list) or len(row) != 3 or not isinstance(row[2], list) or len(row[2]) != n:
            raise doc.error(f"coalition entries are [s, joint_action, [{n} labels]]", *path)
        labels[state(row[0], *path), index[_joint(doc, row[1], sizes, *path)]] = row[2]
    terminal = np.zeros(S, dtype=bool)
    for idx, s in enumerate(d.get("terminal") or []):
        terminal[state(s, "terminal", idx)] = True
    g = gamma if gamma is not None else d.get("gamma", 0.9)
    try:
        model = EnvModel(tuple(sizes), P, R, float(g), labels, terminal)
    except ValueError as exc:
        raise doc.error(str(exc), "transitions") from None

    tables = [[np.zeros(tuple(sizes[i] for i in members(m))) for m in range(1 << n)] for _ in range(S)]
    for idx, row in enumerate(d.get("utility") or []):
        path = ("utility", idx)
        if not isinstance(row, list) or len(row) != 4:
            raise doc.error("utility entries are [s, coalition, [member actions], value]", *path)
        s = state(row[0], *path)
        mask = _coalition_key(doc, row[1], n, *path)
        mem = members(mask)
        acts = row[2] if isinstance(row[2], list) else [row[2]]
        if mask == 0 or len(acts) != len(mem) or any(
                not isinstance(k, int) or not 0 <= k < sizes[i] for i, k in zip(mem, acts)):
            raise doc.error("utility entry needs a non-empty coalition and one valid action per member", *path)
        v = _real(doc, row[3], *path)
        if v < 0:
            raise doc.error("coalition utilities must be nonnegative", *path)
        tables[s][mask][tuple(acts)] = v
    util = UtilityFunction(sizes, tables)

    weights = None
    if d.get("weights") is not None:
        try:
            weights = np.asarray(d["weights"], dtype=float)
        except (TypeError, ValueError):
            raise doc.error("weights must be a numeric table", "weights") from None
        if weights.shape != (S, n) or np.any(weights < 0):
            raise doc.error(f"weights must be a nonnegative {S}x{n} table", "weights")
    return model, util, weights


def load_model(path, gamma: float | None = None):
    return model_from_document(load_document(path), gamma)


def model_to_dict(model: EnvModel, util: UtilityFunction | None = None, weights=None) -> dict:
    out: dict[str, Any] = {
        "action_sizes": list(model.action_sizes),
        "states": model.n_states,
        "gamma": float(model.gamma),
        "terminal": [int(s) for s in np.flatnonzero(model.terminal)],
        "transitions": [], "rewards": [], "coalitions": [],
    }
    A = model.joint_actions
    for s in range(model.n_states):
        for j, a in enumerate(A):
            a_list = [int(k) for k in a]
            for s2 in np.flatnonzero(model.transitions[s, j]):
                out["transitions"].append([s, a_list, int(s2), float(model.transitions[s, j, s2])])
            if model.rewards[s, j] != 0:
                out["rewards"].append([s, a_list, float(model.rewards[s, j])])
            out["coalitions"].append([s, a_list, [int(l) for l in model.cs_labels[s, j]]])
    if util is not None:
        out["utility"] = []
        for s in range(util.n_states):
            for mask in range(1, 1 << util.n_agents):
                t = util.tables[s][mask]
                for idx in zip(*np.nonzero(t)):
                    out["utility"].append([s, mask, [int(k) for k in idx], float(t[idx])])
    if weights is not None:
        out["weights"] = np.asarray(weights, dtype=float).tolist()
    return out


def save_model(model: EnvModel, path, util=None, weights=None):
    Path(path).write_text(_dump_yaml(model_to_dict(model, util, weights)))


# -- build identifier -------------------------------------------------------------------------

def build_id() -> str:
    """Git commit of the working tree when available, else a digest of the
    package sources; prefixed with the package version."""
    from . import __version__
    pkg = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "--short=12", "HEAD"], cwd=pkg, capture_output=True,
                             text=True, timeout=5, check=True)
        dirty = subprocess.run(["git", "status", "--porcelain", "--", str(pkg)], cwd=pkg,
                               capture_output=True, text=True, timeout=5).stdout.strip()
        return f"{__version__}+g{out.stdout.strip()}{'.dirty' if dirty else ''}"
    except (OSError, subprocess.SubprocessError):
        pass
    h = hashlib.sha1()
    for f in sorted(pkg.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+src{h.hexdigest()[:12]}"


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")
