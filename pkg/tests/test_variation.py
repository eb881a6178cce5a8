import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurogram.genotype import (
    Alias,
    DsgeGene,
    EvoUnit,
    Genotype,
    check_genotype,
    random_genotype,
    random_unit,
    resolve,
)
from neurogram.grammar import parse_outer
from neurogram.phenotype import derive
from neurogram.variation import (
    OPERATORS,
    VariationRates,
    crossover,
    mutate,
    mutate_add,
    mutate_dsge,
    mutate_duplicate,
    mutate_remove,
    mutate_train_time,
    mutate_with_log,
)

ZERO = VariationRates(0, 0, 0, 0, 0)


def _unit(grammar, rule, uid, seed=0):
    return random_unit(grammar, rule, np.random.default_rng(seed), uid)


def test_rates_validated():
    with pytest.raises(ValueError):
        VariationRates(add=1.5)
    assert VariationRates() == VariationRates(0.25, 0.15, 0.25, 0.15, 0.20)


def test_add_skips_full_block(grammar, rng):
    outer = parse_outer("[(classification,1,2),(dropout,1,5)]")
    g = Genotype([[_unit(grammar, "classification", 0), _unit(grammar, "classification", 1)],
                  [_unit(grammar, "dropout", 2)]], next_id=3)
    for _ in range(30):
        child = mutate_add(g, grammar, outer, rng)
        assert len(child.blocks[0]) == 2 and len(child.blocks[1]) == 2
    assert len(g.blocks[1]) == 1


def test_add_identity_when_nothing_eligible(grammar, outer, rng):
    single = parse_outer("[(softmax,1,1)]")
    g = Genotype([[_unit(grammar, "softmax", 0)]], next_id=1)
    assert mutate_add(g, grammar, single, rng) == g


def test_add_increments_count(grammar, rng):
    outer = parse_outer("[(pooling,1,10)]")
    g = Genotype([[_unit(grammar, "pooling", i, i) for i in range(3)]], next_id=3)
    child = mutate_add(g, grammar, outer, rng)
    assert len(child.blocks[0]) == 4
    assert check_genotype(child, grammar, outer) == []


def test_add_position_uniform(grammar):
    outer = parse_outer("[(pooling,1,10)]")
    g = Genotype([[_unit(grammar, "pooling", i, i) for i in range(3)]], next_id=3)
    rng = np.random.default_rng(4)
    counts = np.zeros(4)
    for _ in range(2000):
        child = mutate_add(g, grammar, outer, rng)
        ids = [s.unit_id for s in child.blocks[0]]
        counts[ids.index(3)] += 1
    assert np.all(np.abs(counts / 2000 - 0.25) < 0.04)


def test_duplicate_single_unit(grammar, rng):
    a = _unit(grammar, "classification", 0)
    g = Genotype([[a]], next_id=1)
    seen = set()
    for _ in range(40):
        child = mutate_duplicate(g, rng, parse_outer("[(classification,1,10)]"))
        seen.add(tuple(type(s).__name__ for s in child.blocks[0]))
        r = resolve(child)
        assert r[0] is r[1]
    assert seen == {("EvoUnit", "Alias"), ("Alias", "EvoUnit")}


def test_duplicate_full_block_identity(grammar, rng):
    g = Genotype([[_unit(grammar, "softmax", 0)]], next_id=1)
    assert mutate_duplicate(g, rng, parse_outer("[(softmax,1,1)]")) == g


def test_duplicated_unit_shares_edits(grammar, rng):
    g = Genotype([[_unit(grammar, "dropout", 0)]], next_id=1)
    child = mutate_duplicate(g, rng)
    owner = next(s for s in child.blocks[0] if isinstance(s, EvoUnit))
    owner.genes[0].params[0][0] = 0.5
    assert {derive(u, grammar) for u in resolve(child)} == {"layer:dropout rate:0.5"}


def test_remove_two(grammar, rng):
    a, b = _unit(grammar, "classification", 0, 1), _unit(grammar, "classification", 1, 2)
    g = Genotype([[a, b]], next_id=2)
    outer = parse_outer("[(classification,1,10)]")
    results = {tuple(s.unit_id for s in mutate_remove(g, rng, outer).blocks[0]) for _ in range(40)}
    assert results == {(0,), (1,)}


def test_remove_owner_promotes_alias(grammar):
    a = _unit(grammar, "dropout", 0)
    g = Genotype([[a, Alias(0)]], next_id=1)
    before = [derive(u, grammar) for u in resolve(g)]
    found_owner_removal = False
    for seed in range(20):
        child = mutate_remove(g, np.random.default_rng(seed), parse_outer("[(dropout,1,5)]"))
        (slot,) = child.blocks[0]
        assert isinstance(slot, EvoUnit)
        assert derive(slot, grammar) == before[0]
        found_owner_removal = True
    assert found_owner_removal


def test_remove_at_min_identity(grammar, outer, rng):
    g = random_genotype(grammar, parse_outer("[(softmax,1,1),(learning,1,1)]"), rng)
    assert mutate_remove(g, rng, parse_outer("[(softmax,1,1),(learning,1,1)]")) == g


def test_dsge_activation_choice():
    from neurogram.grammar import parse_grammar
    g = parse_grammar("<c> ::= layer:fc <activation>\n<activation> ::= act:linear | act:relu")
    unit = EvoUnit(0, "c", [DsgeGene("c", 0, []), DsgeGene("activation", 1, [])])
    geno = Genotype([[unit]], next_id=1)
    child = mutate_dsge(geno, g, np.random.default_rng(0))
    assert derive(child.blocks[0][0], g) == "layer:fc act:linear"
    assert derive(unit, g) == "layer:fc act:relu"


def test_dsge_dropout_rate_in_range(grammar, rng):
    g = Genotype([[_unit(grammar, "dropout", 0)]], next_id=1)
    outer = parse_outer("[(dropout,1,1)]")
    for _ in range(200):
        g = mutate_dsge(g, grammar, rng)
        assert 0 <= g.blocks[0][0].genes[0].params[0][0] <= 0.7
        assert check_genotype(g, grammar, outer) == []


def _algo(unit):
    return next(g for g in unit.genes if g.nonterminal in ("bp", "adam", "rmsprop"))


def test_dsge_learning_switch_keeps_shared_genes(grammar):
    outer = parse_outer("[(learning,1,1)]")
    switched = 0
    for seed in range(300):
        rng = np.random.default_rng(seed)
        unit = random_unit(grammar, "learning", rng, 0)
        if unit.genes[0].choice != 0:
            continue
        g = Genotype([[unit]], next_id=1)
        child = mutate_dsge(g, grammar, rng)
        new = child.blocks[0][0]
        if new.genes[0].choice == 0:
            continue
        switched += 1
        assert check_genotype(child, grammar, outer) == []
        assert _algo(new).nonterminal != "bp"
        assert new.genes[0].params == unit.genes[0].params
        stop_old = next(x for x in unit.genes if x.nonterminal == "stop")
        stop_new = next(x for x in new.genes if x.nonterminal == "stop")
        assert stop_old == stop_new
    assert switched > 5


def test_dsge_excludes_fixed_rules(grammar, rng):
    g = Genotype([[_unit(grammar, "softmax", 0)]], next_id=1)
    assert mutate_dsge(g, grammar, rng) == g


def test_train_time():
    g = Genotype([[EvoUnit(0, "softmax", [DsgeGene("softmax", 0, [])])]], train_time_units=1, next_id=1)
    assert mutate_train_time(g).train_time_units == 2
    g.train_time_units = 5
    assert mutate_train_time(g).train_time_units == 6
    assert g.train_time_units == 5


def test_zero_rates_force_single_dsge(grammar, outer):
    rng = np.random.default_rng(2)
    for _ in range(100):
        parent = random_genotype(grammar, outer, rng)
        child, fired = mutate_with_log(parent, ZERO, grammar, outer, rng)
        assert fired == []
        assert child.content_key() != parent.content_key()
        assert [len(b) for b in child.blocks] == [len(b) for b in parent.blocks]
        assert child.train_time_units == parent.train_time_units
        diff = [(a.genes, b.genes) for a, b in zip(resolve(parent), resolve(child)) if a.genes != b.genes]
        assert len(diff) == 1


def test_firing_frequencies(grammar, outer):
    rng = np.random.default_rng(11)
    parent = random_genotype(grammar, outer, rng)
    counts = dict.fromkeys(OPERATORS, 0)
    n = 10_000
    for _ in range(n):
        _, fired = mutate_with_log(parent, VariationRates(), grammar, outer, rng)
        for name in fired:
            counts[name] += 1
    expected = {"add": 0.25, "duplicate": 0.15, "remove": 0.25, "dsge": 0.15, "train_time": 0.20}
    for name, p in expected.items():
        assert abs(counts[name] / n - p) < 0.02, name


def test_parent_untouched(grammar, outer, rng):
    parent = random_genotype(grammar, outer, rng)
    key = parent.content_key()
    for _ in range(50):
        mutate(parent, VariationRates(), grammar, outer, rng)
    assert parent.content_key() == key


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 25))
def test_operator_sequences_keep_integrity(grammar, outer, seed, steps):
    rng = np.random.default_rng(seed)
    g = random_genotype(grammar, outer, rng)
    for _ in range(steps):
        child = mutate(g, VariationRates(0.4, 0.4, 0.4, 0.4, 0.1), grammar, outer, rng)
        assert check_genotype(child, grammar, outer) == []
        assert child.content_key() != g.content_key()
        g = child


def test_crossover_identical(grammar, outer, rng):
    a = random_genotype(grammar, outer, rng)
    for _ in range(20):
        x, y = crossover(a, a.clone(), rng, outer)
        assert x.content_key() == a.content_key() == y.content_key()


def test_crossover_learning_swap(grammar):
    outer = parse_outer("[(learning,1,1)]")
    rng = np.random.default_rng(0)
    a = Genotype([[random_unit(grammar, "learning", rng, 0)]], next_id=1)
    b = Genotype([[random_unit(grammar, "learning", rng, 0)]], next_id=1)
    swapped = 0
    for _ in range(30):
        x, y = crossover(a, b, rng, outer)
        assert {x.content_key(), y.content_key()} == {a.content_key(), b.content_key()}
        swapped += x.content_key() == b.content_key()
    assert swapped > 0


def test_crossover_bounds(grammar, outer):
    rng = np.random.default_rng(8)
    for _ in range(1000):
        a = random_genotype(grammar, outer, rng)
        b = random_genotype(grammar, outer, rng)
        a = mutate_duplicate(a, rng, outer)
        b = mutate_duplicate(b, rng, outer)
        x, y = crossover(a, b, rng, outer)
        assert check_genotype(x, grammar, outer) == []
        assert check_genotype(y, grammar, outer) == []
        assert sum(map(len, x.blocks)) + sum(map(len, y.blocks)) == \
            sum(map(len, a.blocks)) + sum(map(len, b.blocks))


def test_crossover_materialises_aliases(grammar):
    outer = parse_outer("[(dropout,1,4)]")
    u = random_unit(grammar, "dropout", np.random.default_rng(1), 0)
    v = random_unit(grammar, "dropout", np.random.default_rng(2), 0)
    a = Genotype([[u, Alias(0)]], next_id=1)
    b = Genotype([[v]], next_id=1)
    for seed in range(40):
        x, y = crossover(a, b, np.random.default_rng(seed), outer)
        for child in (x, y):
            assert check_genotype(child, grammar, outer) == []
            assert sorted(derive(s, grammar) for s in resolve(child)) is not None
        contents = sorted(derive(s, grammar) for c in (x, y) for s in resolve(c))
        assert contents == sorted(derive(s, grammar) for c in (a, b) for s in resolve(c))


def test_crossover_rejects_mismatch(grammar, outer, rng):
    a = random_genotype(grammar, outer, rng)
    b = random_genotype(grammar, parse_outer("[(softmax,1,1)]"), rng)
    with pytest.raises(ValueError):
        crossover(a, b, rng)
