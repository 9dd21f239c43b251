"""Experiment orchestration: environment construction from configs, single
training runs with on-disk artifacts, seed fans, aggregation to
``summary.csv`` and allocation comparisons."""

from __future__ import annotations

import csv
import io as _io
import json
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .environments import (
    ModelEnv,
    PredatorPreyConfig,
    PredatorPreyEnv,
    PredatorPreyState,
    StageGameEnv,
    StageGameSpec,
    random_stage_game,
    two_block_stage_game,
)
from .games import (
    CharacteristicGame,
    Ordering,
    core_contains,
    equal_split,
    excess_sequence,
    lex_compare,
    members,
    nucleolus,
    shapley,
)
from .io import ConfigError, Document, build_id, dump_json, game_from_document, load_model
from .learner import MODES, HistoryTracker, Learner, TrainConfig, TrainingAborted, random_policy_baseline, train

SUMMARY_COLUMNS = ("step", "mode", "metric", "mean", "median", "q25", "q75", "n_seeds")
SUMMARY_METRICS = ("mean_return", "episode_length", "lambda", "mean_xi")
ENV_KINDS = ("predator_prey", "stage_game", "two_block", "random_stage_game", "model")


# -- environments from configs ------------------------------------------------------------

def make_env(spec: dict, doc: Document | None = None, base=("env",)):
    """Build an environment from its config mapping (``kind`` plus options).

    A ``seed`` key seeds trace rollouts (and, for ``random_stage_game``,
    the generated game).
    """
    if doc is None:
        doc, base = Document({"env": spec}, {}, "<env>"), ("env",)

    if not isinstance(spec, dict) or "kind" not in spec:
        raise doc.error(f"environment needs a 'kind' (one of {', '.join(ENV_KINDS)})", *base)
    opts = {k: v for k, v in spec.items() if k not in ("kind", "seed")}
    kind = spec["kind"]
    try:
        if kind == "predator_prey":
            unknown = sorted(set(opts) - {f.name for f in fields(PredatorPreyConfig)})
            if unknown:
                raise doc.error(f"unknown predator_prey options: {unknown}", *base, unknown[0])
            return PredatorPreyEnv(PredatorPreyConfig(**opts))
        if kind == "two_block":
            return StageGameEnv(two_block_stage_game(int(opts.get("episode_length", 1))))
        if kind == "random_stage_game":
            return StageGameEnv(random_stage_game(spec.get("seed", 0), **opts))
        if kind == "stage_game":
            games_raw = opts.get("games")
            if not isinstance(games_raw, list) or not games_raw:
                raise doc.error("stage_game needs a non-empty 'games' list", *base, "games")
            games = [game_from_document(doc, (*base, "games", k)) for k in range(len(games_raw))]
            mapping = opts.get("mapping")
            if mapping is not None:
                mapping = {tuple(a): tuple(l) for a, l in mapping}
            return StageGameEnv(StageGameSpec(games, int(opts.get("episode_length", 1)), mapping))
        if kind == "model":
            if "path" not in opts:
                raise doc.error("model environment needs a 'path'", *base, "path")
            model, _, _ = load_model(opts["path"], opts.get("gamma"))
            return ModelEnv(model, int(opts.get("horizon", 50)), int(opts.get("start_state", 0)))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise doc.error(f"invalid {kind} environment: {exc}", *base) from None
    raise doc.error(f"unknown environment kind {kind!r}; expected one of {', '.join(ENV_KINDS)}", *base, "kind")


def train_config_from(data, doc: Document | None = None, base=("train",)) -> TrainConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise doc.error("expected a mapping", *base) if doc else ConfigError("train config must be a mapping")
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        if doc is not None:
            unknown = sorted(set(data) - {f.name for f in fields(TrainConfig)})
            raise doc.error(str(exc), *base, *(unknown[:1])) from None
        raise ConfigError(str(exc)) from None


# -- checkpoints ------------------------------------------------------------------------------

def _store_state(store):
    return {"live": store.live, "target": store.target}


def _restore_store(store, data):
    store.live = dict(data["live"])
    store.target = dict(data["target"])
    store._dirty = set()


def save_checkpoint(learner: Learner, path, extra: dict | None = None):
    """Pickle every table (live and target), the weights, utilities and
    multiplier; shared Q tables are stored once."""
    tables = learner.tables()
    state = {
        "format": 1,
        "q": [_store_state(t) for t in tables],
        "q_index": [next(k for k, t in enumerate(tables) if t is q) for q in learner.q],
        "action_sizes": [q.n_actions for q in learner.q],
        "weights": _store_state(learner.weights),
        "utility": _store_state(learner.util.store),
        "lambda": learner.lam,
        "gamma": learner.gamma,
        "mode": learner.mode,
        **(extra or {}),
    }
    with open(path, "wb") as f:
        pickle.dump(state, f, protocol=4)


def load_checkpoint(path) -> tuple[Learner, dict]:
    with open(path, "rb") as f:
        state = pickle.load(f)
    sizes = tuple(state["action_sizes"])
    shared = len(state["q"]) == 1 and len(sizes) > 1
    cfg = TrainConfig(mode=state["mode"], gamma=state["gamma"], share_tables=shared)
    learner = Learner.create(sizes, cfg)
    tables = [learner.q[state["q_index"].index(k)] if not shared else learner.q[0]
              for k in range(len(state["q"]))]
    for t, data in zip(tables, state["q"]):
        _restore_store(t, data)
    learner.q = [tables[k] for k in state["q_index"]]
    _restore_store(learner.weights, state["weights"])
    _restore_store(learner.util.store, state["utility"])
    learner.lam = state["lambda"]
    meta = {k: v for k, v in state.items() if k not in {"q", "q_index", "weights", "utility"}}
    return learner, meta


# -- single runs ------------------------------------------------------------------------------

class RunFailure(RuntimeError):
    pass


def run_training(env_spec: dict, config: TrainConfig, seed: int, out_dir=None, build: str | None = None,
                 extra_config: dict | None = None):
    """Train once; with ``out_dir`` write ``metrics.jsonl`` (streamed) and
    the ``final_tables.pkl`` checkpoint. Returns the metrics records."""
    env = make_env(env_spec)
    build = build or build_id()
    resolved = {"env": env_spec, "train": config.to_dict(), "seed": seed, **(extra_config or {})}
    out = Path(out_dir) if out_dir is not None else None
    records = []
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.jsonl", "w")

    def emit(rec):
        rec = {**rec, "mode": config.mode, "seed": seed, "build": build, "config": resolved}
        records.append(rec)
        if fh is not None:
            fh.write(dump_json(rec) + "\n")
            fh.flush()

    try:
        result = train(env, config, seed, callback=emit)
    except TrainingAborted as exc:
        if out is not None:
            save_checkpoint(exc.result.learner, out / "final_tables.pkl",
                            {"aborted": True, "steps": exc.result.steps, "build": build})
        raise RunFailure(str(exc)) from exc
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(result.learner, out / "final_tables.pkl",
                        {"aborted": False, "steps": result.steps, "build": build, "config": resolved})
    return records, result


def _job(args):
    env_spec, cfg_dict, seed, out_dir, build = args
    cfg = TrainConfig.from_dict(cfg_dict)
    try:
        records, _ = run_training(env_spec, cfg, seed, out_dir, build)
        return cfg.mode, seed, records, None
    except Exception as exc:  # reported as a partial failure
        return cfg.mode, seed, None, f"{type(exc).__name__}: {exc}"


# -- experiments --------------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    env: dict
    train: TrainConfig
    seeds: list[int]
    modes: list[str] = field(default_factory=lambda: ["nucleolus"])
    out: Path | None = None
    workers: int = 1
    baseline_episodes: int = 0

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {MODES}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    @classmethod
    def from_document(cls, doc: Document, out=None) -> "ExperimentSpec":
        d = doc.data
        if not isinstance(d, dict):
            raise doc.error("experiment spec must be a mapping")
        allowed = {"env", "train", "seeds", "modes", "out", "workers", "baseline_episodes"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise doc.error(f"unknown experiment fields: {unknown}", unknown[0])
        if "env" not in d:
            raise doc.error("experiment needs an 'env' section")
        make_env(d["env"], doc)  # validate eagerly with line diagnostics
        cfg = train_config_from(d.get("train"), doc)
        seeds = d.get("seeds", [0])
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise doc.error("seeds must be a list of integers", "seeds")
        modes = d.get("modes", [cfg.mode])
        if not isinstance(modes, list):
            raise doc.error("modes must be a list", "modes")
        try:
            return cls(d["env"], cfg, seeds, modes, Path(out or d.get("out") or "runs"),
                       int(d.get("workers", 1)), int(d.get("baseline_episodes", 0)))
        except ConfigError as exc:
            raise doc.error(str(exc), "seeds" if "seed" in str(exc) else "modes") from None


@dataclass
class ExperimentResult:
    rows: list[dict]
    runs: dict
    failures: dict
    baseline: dict | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def aggregate(runs: dict) -> list[dict]:
    """Per (step, mode, metric) order statistics across seeds.

    ``runs`` maps ``(mode, seed)`` to metrics records. Eval-step grids must
    agree across the seeds of a mode.
    """
    rows = []
    for mode in sorted({m for m, _ in runs}, key=MODES.index):
        per_seed = [runs[k] for k in sorted(k for k in runs if k[0] == mode)]
        grids = {tuple(r["step"] for r in recs) for recs in per_seed}
        if len(grids) != 1:
            raise ValueError(f"eval-step grids differ across seeds for mode {mode!r}")
        for idx, step in enumerate(next(iter(grids))):
            for metric in SUMMARY_METRICS:
                vals = [recs[idx][metric] for recs in per_seed if recs[idx].get(metric) is not None]
                if not vals:
                    continue
                a = np.asarray(vals, dtype=float)
                q25, med, q75 = np.percentile(a, [25, 50, 75])
                rows.append({"step": step, "mode": mode, "metric": metric, "mean": float(a.mean()),
                             "median": float(med), "q25": float(q25), "q75": float(q75), "n_seeds": len(a)})
    rows.sort(key=lambda r: (r["step"], MODES.index(r["mode"]), SUMMARY_METRICS.index(r["metric"])))
    return rows


def _fmt(v):
    return f"{v:.12g}" if isinstance(v, float) else str(v)


def summary_csv(rows: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def run_experiment(spec: ExperimentSpec, progress=None) -> ExperimentResult:
    """Train every (mode, seed) pair, aggregate, and write artifacts under
    ``spec.out``: ``<mode>/seed_<k>/metrics.jsonl``, ``summary.csv`` and,
    when runs fail, ``failures.json``."""
    out = Path(spec.out) if spec.out is not None else None
    build = build_id()
    jobs = []
    for mode in spec.modes:
        cfg = {**spec.train.to_dict(), "mode": mode}
        for seed in spec.seeds:
            run_dir = out / mode / f"seed_{seed}" if out is not None else None
            jobs.append((spec.env, cfg, seed, run_dir, build))
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_job(job))
            if progress:
                progress(results[-1])
    runs, failures = {}, {}
    for mode, seed, records, err in results:
        if err is None:
            runs[(mode, seed)] = records
        else:
            failures[f"{mode}/seed_{seed}"] = err
    rows = aggregate(runs) if runs else []
    baseline = None
    if spec.baseline_episodes > 0:
        ev = random_policy_baseline(make_env(spec.env), spec.baseline_episodes, seed=0)
        baseline = {"mean_return": ev.mean_return, "mean_length": ev.mean_length,
                    "return_se": ev.return_se, "length_se": ev.length_se, "episodes": ev.episodes}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(summary_csv(rows))
        if baseline is not None:
            (out / "baseline.json").write_text(json.dumps(baseline, indent=2, sort_keys=True) + "\n")
        if failures:
            (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(rows, runs, failures, baseline)


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# -- allocation comparison -------------------------------------------------------------------------

@dataclass
class AllocationRow:
    method: str
    allocation: np.ndarray
    excesses: np.ndarray
    in_core: bool
    lex_min: bool = False


def compare_allocations(game: CharacteristicGame) -> list[AllocationRow]:
    """Nucleolus, Shapley value (n <= 12) and equal split with their excess
    sequences; ``lex_min`` flags rows whose sequence is lexicographically
    minimal among the three."""
    methods = [("nucleolus", nucleolus(game).allocation)]
    if game.n <= 12:
        methods.append(("shapley", shapley(game)))
    methods.append(("equal_split", equal_split(game)))
    rows = [AllocationRow(name, x, excess_sequence(game, x), core_contains(game, x)) for name, x in methods]
    for r in rows:
        r.lex_min = all(lex_compare(r.excesses, o.excesses) != Ordering.GREATER for o in rows)
    return rows


def allocations_csv(rows: list[AllocationRow]) -> str:
    n = len(rows[0].allocation)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *[f"x{i}" for i in range(n)], "in_core", "lex_min", "excess_sequence"])
    for r in rows:
        w.writerow([r.method, *[_fmt(float(v)) for v in r.allocation], int(r.in_core), int(r.lex_min),
                    " ".join(_fmt(float(v)) for v in r.excesses)])
    return buf.getvalue()


# -- trace export ------------------------------------------------------------------------------------

def _state_record(state):
    if isinstance(state, PredatorPreyState):
        return {"predators": [list(p) for p in state.predators], "prey": [list(p) for p in state.prey],
                "alive": list(state.alive), "step": state.step}
    return {"state": state if isinstance(state, (int, float)) else repr(state)}


def export_trace(env, learner: Learner, seed, path, window: int = 4, max_steps: int = 10_000) -> int:
    """Roll out one greedy episode and write one JSON record per step
    (state before the step, joint action, reward, coalition structure).
    Returns the number of steps written."""
    state, obs = env.reset(seed)
    hist = HistoryTracker(env.n_agents, window)
    keys = hist.push(obs)
    done, t = False, 0
    with open(path, "w") as f:
        f.write(dump_json({"t": 0, **_state_record(state), "done": False}) + "\n")
        while not done and t < max_steps:
            a = learner.greedy(keys)
            cs = env.coalition_structure(state, a)
            state, r, obs, done = env.step(state, a)
            keys = hist.push(obs)
            t += 1
            f.write(dump_json({"t": t, "action": list(a), "reward": float(r),
                               "coalitions": [list(members(b)) for b in cs.blocks],
                               **_state_record(state), "done": bool(done)}) + "\n")
    return t
