import numpy as np
import pytest

from neurogram.genotype import Alias, DsgeGene, EvoUnit, Genotype, GenotypeError, random_genotype
from neurogram.phenotype import (
    LayerSpec,
    LearningSpec,
    NetworkPlan,
    PhenotypeError,
    build_plan,
    check_valid,
    derive,
    parse_phenotype,
    plan_from_phenotypes,
    propagate_shapes,
)

SOFTMAX = "layer:fc act:softmax num-units:2 bias:True"
ADAM = "learning:adam lr:0.0001 beta1:0.75192 beta2:0.91021 decay:0.00047 early_stop:7 batch_size:98"


def fc_unit(uid, units=128, act=1, bias=0):
    return EvoUnit(uid, "classification", [
        DsgeGene("classification", 0, []),
        DsgeGene("fully-connected", 0, [[units]]),
        DsgeGene("activation", act, []),
        DsgeGene("bias", bias, []),
    ])


def conv_unit(uid, filters=32, k=3, s=1, pad=0):
    return EvoUnit(uid, "features", [
        DsgeGene("features", 0, []),
        DsgeGene("convolution", 0, [[filters], [k], [s]]),
        DsgeGene("padding", pad, []),
        DsgeGene("activation", 1, []),
        DsgeGene("bias", 0, []),
    ])


def dropout_unit(uid, rate, rule="classification"):
    genes = [DsgeGene(rule, 1 if rule == "classification" else 4, []), DsgeGene("dropout", 0, [[rate]])]
    return EvoUnit(uid, rule, genes)


def softmax_unit(uid):
    return EvoUnit(uid, "softmax", [DsgeGene("softmax", 0, [])])


def adam_unit(uid):
    return EvoUnit(uid, "learning", [
        DsgeGene("learning", 2, [[98]]),
        DsgeGene("adam", 0, [[0.0001], [0.75192], [0.91021], [0.00047]]),
        DsgeGene("stop", 0, [[7]]),
    ])


def test_derive_fc(grammar):
    assert derive(fc_unit(0), grammar) == "layer:fc act:relu num-units:128 bias:True"


def test_derive_softmax(grammar):
    assert derive(softmax_unit(0), grammar) == SOFTMAX


def test_derive_dropout_zero(grammar):
    assert derive(dropout_unit(0, 0.0), grammar) == "layer:dropout rate:0.0"


def test_derive_full_precision(grammar):
    assert derive(dropout_unit(0, 0.1234567890123), grammar) == "layer:dropout rate:0.1234567890123"


def test_derive_incomplete(grammar):
    unit = fc_unit(0)
    unit.genes.pop()
    with pytest.raises(GenotypeError):
        derive(unit, grammar)


def test_minimal_plan(grammar, outer):
    g = Genotype([[conv_unit(0)], [fc_unit(1)], [softmax_unit(2)], [adam_unit(3)]], next_id=4)
    plan = build_plan(g, grammar, outer, (24, 24, 1))
    assert [l.kind for l in plan.layers] == ["conv", "fc", "fc"]
    assert plan.learning.algorithm == "adam"
    assert check_valid(plan) == (True, "ok")


def test_fig5_style_plan(grammar):
    feats = [conv_unit(i, 32 + 16 * i) for i in range(4)]
    g = Genotype([feats, [fc_unit(4)], [softmax_unit(5)], [adam_unit(6)]], next_id=7)
    plan = build_plan(g, grammar, None, (100, 45, 1))
    assert [l.kind for l in plan.layers] == ["conv"] * 4 + ["fc", "fc"]
    assert plan.learning == LearningSpec(
        "adam", {"lr": 0.0001, "beta1": 0.75192, "beta2": 0.91021, "decay": 0.00047}, 98, 7)
    assert plan.layers[-1].attrs == {"act": "softmax", "num-units": 2, "bias": True}


def test_aliased_dropout_twice(grammar):
    d = dropout_unit(1, 0.3)
    g = Genotype([[conv_unit(0)], [d, Alias(1)], [softmax_unit(2)], [adam_unit(3)]], next_id=4)
    plan = build_plan(g, grammar)
    assert plan.layers[1] == plan.layers[2] == LayerSpec("dropout", {"rate": 0.3})


def test_layer_counts_in_range(grammar, outer, rng):
    from neurogram.grammar import default_grammar, default_outer
    grammar, outer = default_grammar(), default_outer()
    counts = []
    for _ in range(300):
        plan = build_plan(random_genotype(grammar, outer, rng), grammar, outer)
        counts.append(len(plan.layers))
        assert 3 <= len(plan.layers) <= 41
        assert plan.layers[-1].attrs["act"] == "softmax"
    assert min(counts) < 10 and max(counts) > 25


def test_determinism(grammar, outer, rng):
    g = random_genotype(grammar, outer, rng)
    assert build_plan(g, grammar).phenotypes == build_plan(g.clone(), grammar).phenotypes


def test_every_key_consumed(grammar, outer, rng):
    for _ in range(200):
        g = random_genotype(grammar, outer, rng)
        plan = build_plan(g, grammar, outer)
        for line in plan.phenotypes:
            keys = {tok.split(":")[0] for tok in line.split()}
            spec = parse_phenotype(line)
            if isinstance(spec, LayerSpec):
                assert keys == set(spec.attrs) | {"layer"}
            else:
                assert keys == set(spec.hyper) | {"learning", "batch_size", "early_stop"}


@pytest.mark.parametrize("line", [
    "layer:conv num-filters:3", "layer:warp", "learning:adam lr:0.1", "nothing", "layer:dropout rate:0.1 rate:0.2",
    "learning:adam lr:0.1 beta1:0.9 beta2:0.9 decay:0.1 momentum:0.9 early_stop:5 batch_size:50",
])
def test_parse_phenotype_errors(line):
    with pytest.raises(PhenotypeError):
        parse_phenotype(line)


def test_plan_requires_learning():
    with pytest.raises(PhenotypeError):
        plan_from_phenotypes([SOFTMAX], (4, 4, 1))
    with pytest.raises(PhenotypeError):
        plan_from_phenotypes([ADAM, ADAM, SOFTMAX], (4, 4, 1))


def _plan(lines, shape):
    return plan_from_phenotypes(list(lines) + [SOFTMAX, ADAM], shape)


def test_same_padding_keeps_spatial():
    plan = _plan(["layer:conv num-filters:32 filter-shape:3 stride:1 padding:same act:relu bias:True"], (100, 45, 1))
    assert propagate_shapes(plan)[0] == (100, 45, 32)


def test_pool_kernel_exceeds():
    plan = _plan(["layer:pool-max kernel-size:5 stride:1 padding:valid"], (4, 4, 1))
    ok, reason = check_valid(plan)
    assert not ok and "kernel exceeds input" in reason


def test_pool_chain_collapses():
    pool = "layer:pool-avg kernel-size:2 stride:2 padding:valid"
    for n, width in [(1, 22), (2, 11), (3, 5), (4, 2), (5, 1)]:
        plan = _plan([pool] * n, (100, 45, 1))
        assert check_valid(plan)[0]
        assert propagate_shapes(plan)[n - 1][1] == width
    assert not check_valid(_plan([pool] * 6, (100, 45, 1)))[0]


def _shape_oracle(d, k, s, padding):
    # enumerate window start positions directly
    if padding == "same":
        return len(range(0, d, s))
    return len([i for i in range(0, d, s) if i + k <= d])


def test_shape_arithmetic_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        d, k, s = int(rng.integers(1, 30)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        pad = "same" if rng.random() < 0.5 else "valid"
        plan = _plan([f"layer:pool-max kernel-size:{k} stride:{s} padding:{pad}"], (d, d, 1))
        ok, _ = check_valid(plan)
        want = _shape_oracle(d, k, s, pad)
        assert ok == (want >= 1)
        if ok:
            assert propagate_shapes(plan)[0] == (want, want, 1)


def test_softmax_must_be_last():
    assert not check_valid(plan_from_phenotypes(
        [SOFTMAX, "layer:dropout rate:0.1", ADAM], (4, 4, 1)))[0]
    assert not check_valid(plan_from_phenotypes(
        [SOFTMAX, SOFTMAX, ADAM], (4, 4, 1)))[0]
    three = SOFTMAX.replace("num-units:2", "num-units:3")
    assert not check_valid(plan_from_phenotypes([three, ADAM], (4, 4, 1)))[0]


def test_conv_after_fc_invalid():
    plan = _plan(["layer:fc act:relu num-units:8 bias:True",
                  "layer:conv num-filters:4 filter-shape:2 stride:1 padding:same act:relu bias:True"], (8, 8, 1))
    assert not check_valid(plan)[0]


def test_network_plan_classes():
    plan = _plan([], (4, 4, 1))
    assert isinstance(plan, NetworkPlan) and plan.n_classes == 2
