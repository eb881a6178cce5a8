"""(1+lambda) evolution strategy over grammar-encoded CNNs.

Offspring ``i`` of generation ``g`` draws all of its randomness (mutation,
weight init, shuffling, dropout) from ``SeedSequence(seed, spawn_key=(g, i))``
so results do not depend on evaluation order or worker count. Generation 0
uses spawn keys ``(0, attempt)`` for its random initial parents.
"""
from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datasets import DatasetBundle, apply_norm, fit_norm
from .genotype import Genotype, Individual, parse_genotype, random_genotype, serialize_genotype
from .grammar import Grammar, OuterStructure, parse_outer
from .metrics import INVALID, evaluate, fitness_key
from .nn.model import TrainBudget, VirtualClock, WallClock, assemble, model_from_bytes, model_to_bytes, train
from .phenotype import build_plan, check_valid
from .variation import VariationRates, mutate_with_log

__all__ = [
    "ConfigError",
    "CheckpointError",
    "EsConfig",
    "RunState",
    "PreparedData",
    "evaluate_genotype",
    "select",
    "run",
    "run_many",
    "checkpoint_save",
    "checkpoint_load",
    "history_csv",
    "parse_run_config",
    "load_run_config",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("generation", "best_fitness", "parent_layer_count", "budget_units", "evaluations", "accepted")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EsConfig:
    lam: int = 4
    generations: int = 100
    rates: VariationRates = field(default_factory=VariationRates)
    default_budget_seconds: float = 30.0
    seed: int = 0
    runs: int = 10
    clock: str = "virtual"
    workers: int = 1
    max_init_attempts: int = 50
    grammar_path: str | None = None
    outer_structure: str | None = None
    dataset_path: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.lam < 1:
            raise ConfigError("lambda must be >= 1")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if not self.default_budget_seconds > 0:
            raise ConfigError("default_budget_seconds must be > 0")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.clock not in ("virtual", "wall"):
            raise ConfigError(f"clock must be 'virtual' or 'wall', got {self.clock!r}")
        if self.workers < 1 or self.max_init_attempts < 1:
            raise ConfigError("workers and max_init_attempts must be >= 1")

    def to_text(self) -> str:
        """Serialise as a run-config file (``key = value`` lines)."""
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            if f.name == "rates":
                v = ",".join(repr(getattr(v, r.name)) for r in fields(v))
            if v is None:
                continue
            out.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
        return "\n".join(out) + "\n"


_INT_KEYS = {"lam", "generations", "seed", "runs", "workers", "max_init_attempts"}
_FLOAT_KEYS = {"default_budget_seconds"}
_STR_KEYS = {"clock", "grammar_path", "outer_structure", "dataset_path", "output_dir"}
_RATE_KEYS = {f"{f.name}_rate": f.name for f in fields(VariationRates)}


def parse_run_config(text: str, base: EsConfig | None = None) -> EsConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``rates`` takes five comma-separated values (add, duplicate, remove, dsge,
    train_time); single rates can also be set with ``<name>_rate``. A first
    line that starts with ``[`` is taken as the outer structure.
    """
    values: dict = {}
    rates = asdict(base.rates) if base else asdict(VariationRates())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and not values:
            values["outer_structure"] = line
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        name = "lam" if key == "lambda" else key
        try:
            if name in _INT_KEYS:
                values[name] = int(val)
            elif name in _FLOAT_KEYS:
                values[name] = float(val)
            elif name in _STR_KEYS:
                values[name] = val
            elif name == "rates":
                parts = [float(p) for p in val.split(",")]
                if len(parts) != len(rates):
                    raise ConfigError(f"line {lineno}: rates needs {len(rates)} values")
                rates = dict(zip(rates, parts))
            elif name in _RATE_KEYS:
                rates[_RATE_KEYS[name]] = float(val)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
    try:
        values["rates"] = VariationRates(**rates)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return replace(base or EsConfig(), **values)


def load_run_config(path: str | Path) -> EsConfig:
    return parse_run_config(Path(path).read_text())


# ------------------------------------------------------------------ data

class PreparedData:
    """Training-set normalisation applied once and shared by all evaluations."""

    def __init__(self, bundle: DatasetBundle):
        self.bundle = bundle
        self.stats = fit_norm(bundle.train.X)
        self.train_X = apply_norm(self.stats, bundle.train.X).astype(np.float32)[..., None]
        self.train_y = bundle.train.y
        self.val_X = apply_norm(self.stats, bundle.validation.X).astype(np.float32)[..., None]
        self.val_y = bundle.validation.y
        g = bundle.geometry
        self.input_shape = (g.height, g.width, 1)


def _rngs(seed: int, g: int, i: int) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence(seed, spawn_key=(g, i))
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def evaluate_genotype(
    genotype: Genotype,
    grammar: Grammar,
    outer: OuterStructure,
    data: PreparedData,
    config: EsConfig,
    rng: np.random.Generator,
) -> Individual:
    """Decode, train on train/validation and score on the test partition."""
    ind = Individual(genotype)
    plan = build_plan(genotype, grammar, outer, data.input_shape)
    ok, reason = check_valid(plan)
    ind.metrics["layers"] = len(plan.layers)
    if not ok:
        ind.fitness = INVALID
        ind.metrics["status"] = f"invalid: {reason}"
        return ind
    model = assemble(plan, rng)
    model.norm_mean, model.norm_std = data.stats.mean, data.stats.std
    budget = TrainBudget(genotype.train_time_units * config.default_budget_seconds,
                         patience=plan.learning.early_stop_patience)
    clock = VirtualClock() if config.clock == "virtual" else WallClock()
    train(model, data.train_X, data.train_y, data.val_X, data.val_y, budget, rng, clock=clock)
    ind.metrics.update(status=model.status, stop_reason=model.stop_reason, epochs=model.epochs,
                       train_seconds=round(clock.elapsed(), 6), budget_seconds=budget.max_seconds)
    if model.failed:
        ind.fitness = INVALID
        return ind
    test = data.bundle.test
    ev = evaluate(model, test.X, test.y)
    ind.fitness = ev.fitness
    ind.metrics["accuracy"] = ev.accuracy
    ind.model = model
    return ind


def select(parent: Individual, offspring: list[Individual]) -> Individual:
    """Best of parent and offspring; offspring win ties, lowest index first."""
    best = parent
    best_key = fitness_key(parent.fitness)
    chosen = None
    for child in offspring:
        k = fitness_key(child.fitness)
        if k > best_key or (k == best_key and chosen is None and k > -np.inf):
            best, best_key, chosen = child, k, child
    return best


# ----------------------------------------------------------------- state

@dataclass
class RunState:
    config: EsConfig
    generation: int
    parent: Individual
    history: list[dict] = field(default_factory=list)
    evaluations: int = 0
    init_attempts: int = 0
    log: list[dict] = field(default_factory=list)

    @property
    def rng_state(self) -> str:
        # all randomness is keyed by (seed, generation, index)
        return f"seedsequence:{self.config.seed}:next={self.generation + 1}"

    @property
    def best_fitness(self) -> float:
        return float(self.parent.fitness)

    @property
    def finished(self) -> bool:
        return self.generation >= self.config.generations


def _history_row(state: RunState, accepted: int) -> dict:
    return {
        "generation": state.generation,
        "best_fitness": repr(float(state.parent.fitness)),
        "parent_layer_count": state.parent.genotype.layer_count(),
        "budget_units": state.parent.genotype.train_time_units,
        "evaluations": state.evaluations,
        "accepted": accepted,
    }


def history_csv(state: RunState) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in state.history:
        w.writerow(row)
    return buf.getvalue()


def evaluations_csv(state: RunState) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["generation", "index", "fitness", "operators", "layers", "budget_units", "status"])
    for e in state.log:
        w.writerow([e["generation"], e["index"], repr(e["fitness"]), "+".join(e["operators"]) or "-",
                    e["layers"], e["budget_units"], e["status"]])
    return buf.getvalue()


# ---------------------------------------------------------------- driver

_WORKER: dict = {}


def _worker_init(grammar, outer, data, config):
    _WORKER.update(grammar=grammar, outer=outer, data=data, config=config)


def _offspring_task(args):
    text, g, i = args
    w = _WORKER
    _, train_rng = _rngs(w["config"].seed, g, i)
    return evaluate_genotype(parse_genotype(text), w["grammar"], w["outer"], w["data"], w["config"], train_rng)


def _initial_parent(config, grammar, outer, data) -> tuple[Individual, int]:
    for attempt in range(config.max_init_attempts):
        init_rng, train_rng = _rngs(config.seed, 0, attempt)
        ind = evaluate_genotype(random_genotype(grammar, outer, init_rng), grammar, outer, data, config, train_rng)
        if fitness_key(ind.fitness) > -np.inf:
            return ind, attempt + 1
    raise ConfigError(f"{config.max_init_attempts} consecutive random initial networks were invalid")


def run(
    config: EsConfig,
    grammar: Grammar,
    outer: OuterStructure,
    data: DatasetBundle | PreparedData,
    state: RunState | None = None,
    checkpoint_path: str | Path | None = None,
    on_generation=None,
) -> RunState:
    """Evolve until ``config.generations``; pass ``state`` to resume.

    The returned state's parent is the best individual found and carries
    its trained model.
    """
    prepared = data if isinstance(data, PreparedData) else PreparedData(data)
    if state is None:
        parent, attempts = _initial_parent(config, grammar, outer, prepared)
        state = RunState(config, 0, parent, evaluations=1, init_attempts=attempts)
        state.history.append(_history_row(state, -1))
        if checkpoint_path is not None:
            checkpoint_save(state, checkpoint_path)
        if on_generation:
            on_generation(state)
    else:
        state.config = config

    pool = None
    if config.workers > 1:
        ctx = multiprocessing.get_context("fork")
        pool = ProcessPoolExecutor(min(config.workers, config.lam), mp_context=ctx,
                                   initializer=_worker_init, initargs=(grammar, outer, prepared, config))
    try:
        while state.generation < config.generations:
            g = state.generation + 1
            children, fired = [], []
            for i in range(config.lam):
                mut_rng, _ = _rngs(config.seed, g, i)
                child, ops = mutate_with_log(state.parent, config.rates, grammar, outer, mut_rng)
                children.append(child)
                fired.append(ops)
            if pool is None:
                offspring = [evaluate_genotype(c, grammar, outer, prepared, config, _rngs(config.seed, g, i)[1])
                             for i, c in enumerate(children)]
            else:
                tasks = [(serialize_genotype(c), g, i) for i, c in enumerate(children)]
                offspring = list(pool.map(_offspring_task, tasks))
            for i, (child, ops) in enumerate(zip(offspring, fired)):
                state.log.append({"generation": g, "index": i, "fitness": float(child.fitness), "operators": ops,
                                  "layers": child.metrics.get("layers", 0),
                                  "budget_units": child.genotype.train_time_units,
                                  "status": child.metrics.get("status", "")})
            state.evaluations += len(offspring)
            winner = select(state.parent, offspring)
            accepted = -1 if winner is state.parent else offspring.index(winner)
            state.parent = winner
            state.generation = g
            state.history.append(_history_row(state, accepted))
            log.info("run seed %d gen %d best %.4f", config.seed, g, state.parent.fitness)
            if checkpoint_path is not None:
                checkpoint_save(state, checkpoint_path)
            if on_generation:
                on_generation(state)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def run_many(config: EsConfig, grammar: Grammar, outer: OuterStructure, data: DatasetBundle,
             run_dir_fn=None) -> list[RunState]:
    """``config.runs`` independent runs, run ``r`` seeded with ``seed + r``."""
    prepared = PreparedData(data)
    states = []
    for r in range(config.runs):
        cfg = replace(config, seed=config.seed + r)
        ckpt = run_dir_fn(r) if run_dir_fn else None
        states.append(run(cfg, grammar, outer, prepared, checkpoint_path=ckpt))
    return states


# ------------------------------------------------------------ checkpoint

def _sections(state: RunState) -> str:
    p = state.parent
    parts = [
        f"#checkpoint v{CHECKPOINT_VERSION}",
        "[config]",
        state.config.to_text().rstrip("\n"),
        "[state]",
        f"generation = {state.generation}",
        f"evaluations = {state.evaluations}",
        f"init_attempts = {state.init_attempts}",
        f"rng_state = {state.rng_state}",
        f"parent_fitness = {float(p.fitness)!r}",
        f"parent_metrics = {json.dumps(p.metrics, sort_keys=True)}",
        "[history]",
        history_csv(state).rstrip("\n"),
        "[log]",
        "\n".join(json.dumps(e, sort_keys=True) for e in state.log),
        "[genotype]",
        serialize_genotype(p.genotype).rstrip("\n"),
        "[model]",
    ]
    if p.model is not None:
        b64 = base64.b64encode(model_to_bytes(p.model)).decode()
        parts.extend(b64[i : i + 76] for i in range(0, len(b64), 76))
    return "\n".join(parts) + "\n"


def checkpoint_save(state: RunState, path: str | Path) -> None:
    """Write atomically: a temp file renamed over ``path``."""
    body = _sections(state)
    digest = hashlib.sha256(body.encode()).hexdigest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(body + f"sha256 = {digest}\n")
    tmp.replace(path)


def checkpoint_load(path: str | Path) -> RunState:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    body, sep, tail = text.rpartition("sha256 = ")
    if not sep or hashlib.sha256(body.encode()).hexdigest() != tail.strip():
        raise CheckpointError(f"checksum mismatch in {path}")
    lines = body.split("\n")
    if lines[0] != f"#checkpoint v{CHECKPOINT_VERSION}":
        raise CheckpointError(f"unsupported checkpoint version: {lines[0]!r}")
    sections: dict[str, list[str]] = {}
    current = None
    for ln in lines[1:]:
        if ln in ("[config]", "[state]", "[history]", "[log]", "[genotype]", "[model]"):
            current = ln[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(ln)
    try:
        config = parse_run_config("\n".join(sections["config"]))
        kv = dict(ln.split(" = ", 1) for ln in sections["state"] if ln)
        genotype = parse_genotype("\n".join(sections["genotype"]))
        b64 = "".join(sections["model"]).strip()
        model = model_from_bytes(base64.b64decode(b64)) if b64 else None
        parent = Individual(genotype, float(kv["parent_fitness"]), json.loads(kv["parent_metrics"]), model)
        rows = list(csv.DictReader(io.StringIO("\n".join(sections["history"]))))
        history = [{k: (r[k] if k == "best_fitness" else int(r[k])) for k in HISTORY_FIELDS} for r in rows]
        log_rows = [json.loads(ln) for ln in sections["log"] if ln.strip()]
        return RunState(config, int(kv["generation"]), parent, history, int(kv["evaluations"]),
                        int(kv["init_attempts"]), log_rows)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from None


def outer_from_config(config: EsConfig) -> OuterStructure | None:
    """Outer structure given inline (``[(...)]``) or as a file path."""
    spec = config.outer_structure
    if spec is None:
        return None
    if spec.lstrip().startswith("["):
        return parse_outer(spec)
    return parse_outer(Path(spec).read_text())
