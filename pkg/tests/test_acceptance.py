"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line; the lines are repeated in
an ``acceptance criteria`` section at the end of the pytest run.
"""
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from neurogram.baselines import fit_baselines
from neurogram.cli import main
from neurogram.datasets import GeneratorConfig, synth_generate
from neurogram.engine import EsConfig, PreparedData, checkpoint_load, history_csv, run, run_many
from neurogram.genotype import check_genotype, random_genotype
from neurogram.grammar import default_grammar, parse_grammar
from neurogram.metrics import ensemble_confidences, evaluate, fitness, fitness_from_roc, roc_curve
from neurogram.nn import adam_step, sgd_step
from neurogram.variation import OPERATORS, VariationRates, mutate, mutate_with_log
from test_grammar import expected_grammar_rules
from test_layers import KINDS, make_model, max_rel_error, random_case
from test_metrics import brute_fitness, brute_roc, random_sets
from test_optim import NESTEROV_TRACE, PLAIN_TRACE
from test_optim import run as trace


def test_c1_grammar_fidelity(criterion):
    t = time.perf_counter()
    g = default_grammar()
    exp = expected_grammar_rules()
    same = list(g.rules) == list(exp) and all([a.symbols for a in g[n]] == alts for n, alts in exp.items())
    rt = parse_grammar(g.serialize()) == g and parse_grammar(g.serialize()).serialize() == g.serialize()
    dt = time.perf_counter() - t
    assert criterion(1, same and rt and dt < 1.0,
                     f"rules match transcription={same}, round trip={rt}, {dt:.3f}s (< 1s)")


def test_c2_dsge_validity(criterion, grammar, outer):
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    bad_init = bad_mut = unchanged = 0
    g = random_genotype(grammar, outer, rng)
    for i in range(10_000):
        fresh = random_genotype(grammar, outer, rng)
        bad_init += bool(check_genotype(fresh, grammar, outer))
        # walk a mutation chain, restarting from fresh genotypes now and then
        parent = g if i % 50 else fresh
        child = mutate(parent, VariationRates(), grammar, outer, rng)
        bad_mut += bool(check_genotype(child, grammar, outer))
        unchanged += child.content_key() == parent.content_key()
        g = child
    dt = time.perf_counter() - t
    ok = bad_init == bad_mut == unchanged == 0 and dt < 30
    assert criterion(2, ok, f"invalid random={bad_init}, invalid mutants={bad_mut}, "
                            f"unchanged mutants={unchanged} of 10^4 each, {dt:.1f}s (< 30s)")


def test_c3_mutation_rates(criterion, grammar, outer):
    rng = np.random.default_rng(3)
    parent = random_genotype(grammar, outer, rng)
    counts = dict.fromkeys(OPERATORS, 0)
    n = 10_000
    for _ in range(n):
        for name in mutate_with_log(parent, VariationRates(), grammar, outer, rng)[1]:
            counts[name] += 1
    want = dict(zip(OPERATORS, (0.25, 0.15, 0.25, 0.15, 0.20)))
    freq = {k: counts[k] / n for k in OPERATORS}
    ok = all(abs(freq[k] - want[k]) <= 0.02 for k in OPERATORS)
    shown = ", ".join(f"{k} {100 * freq[k]:.1f}%" for k in OPERATORS)
    assert criterion(3, ok, f"{shown} (targets 25/15/25/15/20 +-2)")


def test_c4_gradients(criterion):
    t = time.perf_counter()
    worst = {}
    for kind in KINDS:
        rng = np.random.default_rng(100 + KINDS.index(kind))
        errs = []
        for case in range(20):
            lines, shape, X, y = random_case(kind, rng)
            errs.append(max_rel_error(make_model(lines, shape, seed=case), X, y))
        worst[kind] = max(errs)
    dt = time.perf_counter() - t
    ok = all(e < 1e-4 for e in worst.values()) and dt < 120
    shown = ", ".join(f"{k} {e:.1e}" for k, e in worst.items())
    assert criterion(4, ok, f"worst rel err over 20 shapes: {shown}; {dt:.1f}s (< 120s)")


def test_c5_optimizer_identities(criterion):
    errs = []
    for lr in (0.1, 0.01, 1e-4):
        (w1,) = trace(adam_step, {"lr": lr, "beta1": 0.9, "beta2": 0.999, "decay": 0.0, "epsilon": 0.0}, [3.0])
        errs.append(abs(abs(w1 - 1.0) - lr))
        (w1,) = trace(sgd_step, {"lr": lr, "momentum": 0.0, "decay": 0.0, "nesterov": False}, [3.0])
        errs.append(abs((w1 - 1.0) + lr * 3.0))
    hyper = {"lr": 0.1, "momentum": 0.9, "decay": 0.0}
    plain = trace(sgd_step, {**hyper, "nesterov": False}, [1.0, 0.5])
    nest = trace(sgd_step, {**hyper, "nesterov": True}, [1.0, 0.5])
    errs += [abs(a - b) for a, b in zip(plain + nest, PLAIN_TRACE + NESTEROV_TRACE)]
    ok = max(errs) <= 1e-12 and plain != nest
    assert criterion(5, ok, f"max deviation {max(errs):.1e} (<= 1e-12); plain {plain} vs nesterov {nest}")


def test_c6_roc_oracle(criterion):
    mismatches = sum(roc_curve(s, y).points != brute_roc(s, y) or fitness(s, y) != brute_fitness(brute_roc(s, y))
                     for s, y in random_sets())
    degenerate = {
        "all-tied": fitness_from_roc(roc_curve([0.5, 0.5, 0.5], [1, 0, 1])),
        "perfect": fitness_from_roc(roc_curve([0.9, 0.8, 0.1], [1, 1, 0])),
        "anti-perfect": fitness_from_roc(roc_curve([0.1, 0.2, 0.9], [1, 1, 0])),
    }
    ok = mismatches == 0 and all(v == 1.0 for v in degenerate.values())
    shown = ", ".join(f"{k} {v}" for k, v in degenerate.items())
    assert criterion(6, ok, f"{mismatches} mismatches over 200 sets; {shown}")


@pytest.mark.slow
def test_c7_es_behaviour(criterion, bundle, small_space, tmp_path):
    g, o = small_space
    data = PreparedData(bundle)
    cfg = EsConfig(lam=4, generations=30, default_budget_seconds=10.0, seed=7)
    straight = run(cfg, g, o, data)
    best = [float(r["best_fitness"]) for r in straight.history]
    monotone = all(b >= a for a, b in zip(best, best[1:]))
    ckpt = tmp_path / "ckpt.txt"
    run(replace(cfg, generations=15), g, o, data, checkpoint_path=ckpt)
    resumed = run(cfg, g, o, data, state=checkpoint_load(ckpt))
    same = history_csv(resumed).encode() == history_csv(straight).encode()
    ok = monotone and straight.evaluations == 1 + 30 * 4 and same
    assert criterion(7, ok, f"best non-decreasing={monotone}, evaluations={straight.evaluations} (121), "
                            f"resume at 15 byte-identical={same}")


@pytest.mark.slow
def test_c8_desk_experiment(criterion, small_space):
    t = time.perf_counter()
    g, o = small_space
    gen_cfg = GeneratorConfig(split=(0.625, 0.0625, 0.125, 0.1875))
    data = synth_generate(1600, 1600, rng=0, config=gen_cfg)
    sizes = tuple(len(data[n]) for n in ("train", "validation", "test", "generalisation"))
    classic = fit_baselines(data.train, data.geometry).evaluate(data.test.X, data.test.y)
    best_classic = max(f for f, _ in classic.values())
    # results do not depend on the worker count; cores only change the runtime
    cores = min(4, os.cpu_count() or 1)
    cfg = EsConfig(lam=4, generations=20, default_budget_seconds=10.0, seed=0, runs=10, workers=cores)
    states = run_many(cfg, g, o, data)
    bests = [s.best_fitness for s in states]
    wins = sum(b > best_classic for b in bests)
    models = [s.parent.model for s in states]
    gen = data.generalisation
    singles = [evaluate(m, gen.X, gen.y).fitness for m in models]
    ens = fitness(ensemble_confidences(models, gen.X)[:, 1], gen.y)
    dt = (time.perf_counter() - t) / 60
    ok = sizes == (2000, 200, 400, 600) and wins >= 8 and ens >= np.median(singles) and dt <= 60
    assert criterion(8, ok, f"evolved > best classic {best_classic:.2f} on test in {wins}/10 runs "
                            f"(mean best {np.mean(bests):.2f}); ensemble {ens:.2f} vs median single "
                            f"{np.median(singles):.2f} on generalisation; {dt:.1f} min on {cores} core(s) (<= 60)")


def test_c9_baseline_sanity(criterion, bundle):
    fitted = fit_baselines(bundle.train, bundle.geometry)
    s = fitted.scores(bundle.test.X)
    y = bundle.test.y
    pvals = {n: mannwhitneyu(s[n][y == 1], s[n][y == 0], alternative="greater").pvalue
             for n in ("compactness", "s40")}
    higher = all(s[n][y == 1].mean() > s[n][y == 0].mean() for n in pvals)
    X = np.concatenate([bundle.test.X, bundle.generalisation.X])
    yy = np.concatenate([bundle.test.y, bundle.generalisation.y])
    fit = {k: v[0] for k, v in fitted.evaluate(X, yy).items()}
    order = fit["fisher"] >= max(fit["compactness"], fit["s40"]) - 0.2
    ok = higher and all(p < 0.01 for p in pvals.values()) and order
    assert criterion(9, ok, f"proton means higher={higher}, rank-test p "
                            f"{pvals['compactness']:.1e}/{pvals['s40']:.1e}; fitness fisher {fit['fisher']:.2f} "
                            f"compactness {fit['compactness']:.2f} s40 {fit['s40']:.2f}")


def test_c10_report_arithmetic(criterion, tmp_path, capsys):
    (tmp_path / "results.csv").write_text("method,kind,partition,fitness,accuracy\n"
                                          "network,evolved,generalisation,8.34,\n"
                                          "ensemble,evolved,generalisation,9.89,\n")
    (tmp_path / "baseline.csv").write_text("method,fitness,accuracy\ns40,3.13,\ncompactness,3.35,\nfisher,4.22,\n")
    code = main(["report", str(tmp_path)])
    capsys.readouterr()
    import csv
    with open(tmp_path / "report.csv", newline="") as f:
        factors = {r["method"]: float(r["factor"]) for r in csv.DictReader(f) if r["factor"]}
    ok = code == 0 and abs(factors["network"] - 2.0) <= 0.05 and abs(factors["ensemble"] - 2.3) <= 0.05
    assert criterion(10, ok, f"factors network {factors['network']:.2f} (2.0), "
                             f"ensemble {factors['ensemble']:.2f} (2.3)")
