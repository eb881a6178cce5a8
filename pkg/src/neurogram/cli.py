"""``neurogram`` command line: evolve, resume, evaluate, ensemble, baseline, synth, report.

Exit codes: 0 ok, 2 input error, 3 corrupt state, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines
from .datasets import (DESK_GEOMETRY, FULL_GEOMETRY, PARTITIONS, DatasetError, GeneratorConfig,
                       load_events, save_events, synth_generate)
from .engine import (CheckpointError, ConfigError, EsConfig, PreparedData, checkpoint_load, checkpoint_save,
                     evaluations_csv, history_csv, load_run_config, outer_from_config, run)
from .genotype import GenotypeError
from .grammar import GrammarError, default_grammar, default_outer, desk_grammar, desk_outer, load_grammar, validate
from .metrics import PROTON, accuracy, ensemble_confidences, evaluate, fitness_from_roc, roc_curve, write_roc_csv
from .nn.model import load_model, save_model

EXIT_OK, EXIT_INPUT, EXIT_CORRUPT, EXIT_RUNTIME = 0, 2, 3, 4
RESULTS_FIELDS = ("method", "kind", "partition", "fitness", "accuracy")

log = logging.getLogger("neurogram")


class InputError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _need_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_bundle(path: str | Path):
    return load_events(_need_file(path, "dataset"))


def _partition(bundle, name: str):
    if name not in bundle.partitions:
        raise InputError(f"unknown partition {name!r}; valid names: {', '.join(PARTITIONS)}")
    return bundle.partitions[name]


def _search_space(config: EsConfig):
    spec = config.grammar_path or "desk"
    if spec == "desk":
        grammar, outer = desk_grammar(), desk_outer()
    elif spec == "full":
        grammar, outer = default_grammar(), default_outer()
    else:
        grammar, outer = load_grammar(_need_file(spec, "grammar file")), default_outer()
    if config.outer_structure is not None:
        if not config.outer_structure.lstrip().startswith("["):
            _need_file(config.outer_structure, "outer structure file")
        outer = outer_from_config(config)
    problems = validate(grammar, outer)
    if problems:
        raise InputError("grammar/outer structure mismatch: " + "; ".join(problems))
    return grammar, outer


def _append_results(out_dir: Path | None, rows: list[dict]) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "results.csv"
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULTS_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


# -------------------------------------------------------------- commands

def _write_run_outputs(state, run_dir: Path, prepared: PreparedData) -> float | None:
    (run_dir / "history.csv").write_text(history_csv(state))
    (run_dir / "evaluations.csv").write_text(evaluations_csv(state))
    model = state.parent.model
    if model is None:
        return None
    save_model(model, run_dir / "best_model.ngm")
    bundle = prepared.bundle
    gen = None
    for name in ("test", "generalisation"):
        part = bundle.partitions[name]
        ev = evaluate(model, part.X, part.y)
        if ev.roc is not None:
            write_roc_csv(ev.roc, run_dir / f"roc_{name}.csv")
        if name == "generalisation":
            gen = ev.fitness
    return gen


def cmd_evolve(args) -> int:
    if args.config is None:
        raise InputError("evolve needs --config <run-config>")
    config = load_run_config(_need_file(args.config, "run config"))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.threads is not None:
        config = replace(config, workers=args.threads)
    if args.generations is not None:
        config = replace(config, generations=args.generations)
    out = Path(args.output_dir or config.output_dir or "runs")
    config = replace(config, output_dir=str(out))
    if config.dataset_path is None:
        raise InputError("run config lacks dataset_path")
    grammar, outer = _search_space(config)
    bundle = _load_bundle(config.dataset_path)
    prepared = PreparedData(bundle)
    out.mkdir(parents=True, exist_ok=True)
    bests, gens = [], []
    for r in range(config.runs):
        cfg = replace(config, seed=config.seed + r, runs=1)
        run_dir = out / f"run_{r:02d}"
        run_dir.mkdir(exist_ok=True)
        (run_dir / "config.txt").write_text(cfg.to_text())
        state = run(cfg, grammar, outer, prepared, checkpoint_path=run_dir / "checkpoint.txt")
        gen = _write_run_outputs(state, run_dir, prepared)
        bests.append(state.best_fitness)
        gens.append(gen)
        print(f"run {r} seed {cfg.seed} best {_fmt(state.best_fitness)}"
              + (f" generalisation {_fmt(gen)}" if gen is not None else ""))
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "seed", "best_fitness", "generalisation_fitness"])
        for r, (b, g) in enumerate(zip(bests, gens)):
            w.writerow([r, config.seed + r, _fmt(b), "" if g is None else _fmt(g)])
    b = np.array(bests)
    print(f"summary min {_fmt(b.min())} mean {_fmt(b.mean())} max {_fmt(b.max())}")
    return EXIT_OK


def cmd_resume(args) -> int:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    state = checkpoint_load(ckpt)
    config = state.config
    if args.generations is not None:
        config = replace(config, generations=args.generations)
    if args.threads is not None:
        config = replace(config, workers=args.threads)
    if state.generation >= config.generations:
        print(f"run already finished at generation {state.generation}; best {_fmt(state.best_fitness)}")
        return EXIT_OK
    if config.dataset_path is None:
        raise InputError("checkpoint config lacks dataset_path")
    grammar, outer = _search_space(config)
    prepared = PreparedData(_load_bundle(config.dataset_path))
    state = run(config, grammar, outer, prepared, state=state, checkpoint_path=ckpt)
    run_dir = ckpt.parent
    (run_dir / "config.txt").write_text(config.to_text())
    _write_run_outputs(state, run_dir, prepared)
    print(f"resumed to generation {state.generation}; best {_fmt(state.best_fitness)}")
    return EXIT_OK


def _report_eval(label: str, conf: np.ndarray, part, args, method: str, partition: str) -> int:
    roc = roc_curve(conf[:, PROTON], part.y)
    fit, acc = fitness_from_roc(roc), accuracy(conf, part.y)
    print(f"{label} partition {partition} fitness {_fmt(fit)} accuracy {acc:.4f}")
    if args.roc:
        write_roc_csv(roc, args.roc)
    out = Path(args.output_dir) if args.output_dir else None
    _append_results(out, [{"method": method, "kind": "evolved", "partition": partition,
                           "fitness": _fmt(fit), "accuracy": f"{acc:.4f}"}])
    return EXIT_OK


def _load_models(paths):
    from .nn.model import ModelFormatError

    models = []
    for p in paths:
        try:
            models.append(load_model(_need_file(p, "model")))
        except ModelFormatError as e:
            raise InputError(f"{p}: {e}") from None
    return models


def cmd_evaluate(args) -> int:
    bundle = _load_bundle(args.dataset)
    part = _partition(bundle, args.partition)
    (model,) = _load_models([args.model])
    _check_shape([model], bundle)
    conf = ensemble_confidences([model], part.X)
    return _report_eval("model", conf, part, args, "network", args.partition)


def _check_shape(models, bundle) -> None:
    g = bundle.geometry
    shapes = {tuple(m.plan.input_shape) for m in models}
    if len(shapes) != 1:
        raise InputError(f"models disagree on input shape: {sorted(shapes)}")
    (shape,) = shapes
    if shape[:2] != (g.height, g.width):
        raise InputError(f"model input {shape[:2]} does not match dataset grid {(g.height, g.width)}")


def cmd_ensemble(args) -> int:
    if len(args.paths) < 2:
        raise InputError("ensemble needs at least one model and a dataset")
    *model_paths, data_path = args.paths
    bundle = _load_bundle(data_path)
    part = _partition(bundle, args.partition)
    models = _load_models(model_paths)
    _check_shape(models, bundle)
    conf = ensemble_confidences(models, part.X)
    return _report_eval(f"ensemble of {len(models)}", conf, part, args, "ensemble", args.partition)


def cmd_baseline(args) -> int:
    bundle = _load_bundle(args.dataset)
    part = _partition(bundle, args.partition)
    try:
        model = baselines.fit_baselines(bundle.train, bundle.geometry)
    except ValueError as e:
        raise InputError(f"{args.dataset}: {e}") from None
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, s in model.scores(part.X).items():
        roc = roc_curve(s, part.y)
        fit = fitness_from_roc(roc)
        acc = baselines.score_accuracy(s, part.y, model.thresholds[name])
        write_roc_csv(roc, out / f"roc_{name}.csv")
        rows.append({"method": name, "fitness": _fmt(fit), "accuracy": f"{acc:.4f}"})
        print(f"{name:<12} fitness {_fmt(fit)} accuracy {acc:.4f}")
    with open(out / "baseline.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=("method", "fitness", "accuracy"), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def _parse_floats(text: str, n: int, what: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"{what}: expected {n} comma-separated numbers") from None
    if len(vals) != n:
        raise InputError(f"{what}: expected {n} comma-separated numbers")
    return vals


def _generator_config(path: str | None, split: str | None) -> GeneratorConfig:
    kw: dict = {}
    if path is not None:
        types = {k: type(v) for k, v in GeneratorConfig().__dict__.items()}
        for lineno, raw in enumerate(_need_file(path, "generator config").read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise InputError(f"{path}:{lineno}: unknown generator parameter {k!r}")
            kw[k] = _parse_floats(v, 4, k) if k == "split" else types[k](v)
    if split is not None:
        kw["split"] = _parse_floats(split, 4, "--split")
    if "split" in kw and abs(sum(kw["split"]) - 1.0) > 1e-9:
        raise InputError("split fractions must sum to 1")
    return GeneratorConfig(**kw)


def cmd_synth(args) -> int:
    geometry = {"desk": DESK_GEOMETRY, "full": FULL_GEOMETRY}[args.geometry]
    cfg = _generator_config(args.config, args.split)
    gen = None
    if args.generalisation:
        g = _parse_floats(args.generalisation, 2, "--generalisation")
        gen = (int(g[0]), int(g[1]))
    seed = 0 if args.seed is None else args.seed
    bundle = synth_generate(args.n_gamma, args.n_proton, geometry, seed, cfg, generalisation=gen)
    out = Path(args.out)
    if args.output_dir and not out.is_absolute():
        out = Path(args.output_dir) / out
    out.parent.mkdir(parents=True, exist_ok=True)
    save_events(bundle, out, binary=args.binary)
    digest = hashlib.sha256(out.read_bytes()).hexdigest()
    counts = " ".join(f"{k}={g}/{p}" for k, (g, p) in bundle.counts().items())
    print(f"wrote {out} ({counts}) sha256 {digest}")
    return EXIT_OK


def _read_rows(path: Path, kind: str | None) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        try:
            out.append({"method": r["method"], "kind": kind or r["kind"], "fitness": float(r["fitness"])})
        except (KeyError, ValueError):
            raise InputError(f"{path}: malformed row {r}") from None
    return out


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise InputError(f"run directory not found: {root}")
    rows = []
    for p in sorted(root.rglob("results.csv")):
        rows += _read_rows(p, None)
    for p in sorted(root.rglob("baseline.csv")):
        rows += _read_rows(p, "classic")
    for p in sorted(root.rglob("summary.csv")):
        with open(p, newline="") as f:
            for r in csv.DictReader(f):
                val = r.get("generalisation_fitness") or r.get("best_fitness")
                if val:
                    rows.append({"method": f"run_{int(r['run']):02d}", "kind": "evolved", "fitness": float(val)})
    if not rows:
        raise InputError(f"no results.csv, baseline.csv or summary.csv under {root}")
    classic = [r for r in rows if r["kind"] == "classic"]
    best_classic = max((r["fitness"] for r in classic), default=None)
    print(f"{'method':<14}{'kind':<9}{'fitness':>8}{'factor':>8}")
    table = []
    for r in rows:
        factor = ""
        if r["kind"] == "evolved" and best_classic:
            factor = _fmt(r["fitness"] / best_classic)
        table.append({**r, "fitness": _fmt(r["fitness"]), "factor": factor})
        print(f"{r['method']:<14}{r['kind']:<9}{_fmt(r['fitness']):>8}{factor:>8}")
    evolved = [r for r in rows if r["kind"] == "evolved"]
    if evolved and best_classic:
        best = max(evolved, key=lambda r: r["fitness"])
        print(f"improvement best-evolved/best-classic {_fmt(best['fitness'] / best_classic)}")
    out = Path(args.output_dir) if args.output_dir else root
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=("method", "kind", "fitness", "factor"), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run-config (evolve) or generator config (synth)")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--threads", type=int, help="parallel evaluation workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="neurogram", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("evolve", parents=[common], help="run the evolutionary search")
    e.add_argument("--generations", type=int)
    e.set_defaults(func=cmd_evolve)

    r = sub.add_parser("resume", parents=[common], help="continue a checkpointed run")
    r.add_argument("checkpoint")
    r.add_argument("--generations", type=int)
    r.set_defaults(func=cmd_resume)

    ev = sub.add_parser("evaluate", parents=[common], help="score one model on a partition")
    ev.add_argument("model")
    ev.add_argument("dataset")
    ev.add_argument("--partition", default="generalisation")
    ev.add_argument("--roc", help="write the ROC curve to this CSV")
    ev.set_defaults(func=cmd_evaluate)

    en = sub.add_parser("ensemble", parents=[common], help="average several models' confidences")
    en.add_argument("paths", nargs="+", metavar="MODEL... DATASET")
    en.add_argument("--partition", default="generalisation")
    en.add_argument("--roc")
    en.set_defaults(func=cmd_ensemble)

    b = sub.add_parser("baseline", parents=[common], help="score S40, Compactness and Fisher")
    b.add_argument("dataset")
    b.add_argument("--partition", default="test")
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic EVT dataset")
    s.add_argument("--n-gamma", type=int, default=1000)
    s.add_argument("--n-proton", type=int, default=1000)
    s.add_argument("--geometry", choices=("desk", "full"), default="desk")
    s.add_argument("--split", help="train,validation,test,generalisation fractions")
    s.add_argument("--generalisation", help="separate gamma,proton counts for that partition")
    s.add_argument("--binary", action="store_true")
    s.add_argument("--out", default="events.evt")
    s.set_defaults(func=cmd_synth)

    rp = sub.add_parser("report", parents=[common], help="consolidate results and improvement factors")
    rp.add_argument("run_dir")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except (InputError, ConfigError, GrammarError, DatasetError, GenotypeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
