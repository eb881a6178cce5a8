"""Genetic operators over two-level genotypes.

Every public operator returns a new genotype and leaves its input untouched.
"""
from __future__ import annotations

import copy
from collections import defaultdict
from dataclasses import dataclass, fields

import numpy as np

from .genotype import (
    Alias,
    DerivationNode,
    EvoUnit,
    Genotype,
    Individual,
    derivation_tree,
    flatten_tree,
    random_unit,
    sample_params,
    sample_subtree,
)
from .grammar import Grammar, OuterStructure

__all__ = [
    "VariationRates",
    "OPERATORS",
    "mutate_add",
    "mutate_duplicate",
    "mutate_remove",
    "mutate_dsge",
    "mutate_train_time",
    "mutate",
    "mutate_with_log",
    "crossover",
]

OPERATORS = ("add", "duplicate", "remove", "dsge", "train_time")


@dataclass(frozen=True)
class VariationRates:
    add: float = 0.25
    duplicate: float = 0.15
    remove: float = 0.25
    dsge: float = 0.15
    train_time: float = 0.20

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f.name} rate must lie in [0, 1], got {v}")


def _add(g: Genotype, grammar: Grammar, outer: OuterStructure, rng: np.random.Generator) -> bool:
    eligible = [b for b, spec in enumerate(outer) if len(g.blocks[b]) < spec.max_units]
    if not eligible:
        return False
    b = eligible[int(rng.integers(len(eligible)))]
    pos = int(rng.integers(len(g.blocks[b]) + 1))
    g.blocks[b].insert(pos, random_unit(grammar, outer[b].rule, rng, g.new_id()))
    return True


def _duplicate(g: Genotype, outer: OuterStructure | None, rng: np.random.Generator) -> bool:
    eligible = [
        b for b, slots in enumerate(g.blocks)
        if slots and (outer is None or len(slots) < outer[b].max_units)
    ]
    if not eligible:
        return False
    b = eligible[int(rng.integers(len(eligible)))]
    slots = g.blocks[b]
    source = slots[int(rng.integers(len(slots)))]
    pos = int(rng.integers(len(slots) + 1))
    slots.insert(pos, Alias(source.unit_id))
    return True


def _remove(g: Genotype, outer: OuterStructure | None, rng: np.random.Generator) -> bool:
    candidates = [
        (b, i) for b, slots in enumerate(g.blocks)
        if len(slots) > (outer[b].min_units if outer is not None else 1)
        for i in range(len(slots))
    ]
    if not candidates:
        return False
    b, i = candidates[int(rng.integers(len(candidates)))]
    slots = g.blocks[b]
    removed = slots.pop(i)
    if isinstance(removed, EvoUnit):
        # the first remaining alias takes over ownership of the shared unit
        for j, s in enumerate(slots):
            if isinstance(s, Alias) and s.unit_id == removed.unit_id:
                slots[j] = removed
                break
    return True


def _eligible_genes(unit: EvoUnit, grammar: Grammar) -> list[int]:
    out = []
    for i, gene in enumerate(unit.genes):
        alts = grammar[gene.nonterminal]
        if len(alts) > 1 or alts[gene.choice].params:
            out.append(i)
    return out


def _rederive(node: DerivationNode, new_choice: int, grammar: Grammar, rng: np.random.Generator) -> DerivationNode:
    """Switch a node to another alternative, keeping whatever still fits."""
    old_alt = grammar[node.gene.nonterminal][node.gene.choice]
    new_alt = grammar[node.gene.nonterminal][new_choice]

    old_params = {b.name: (b, grp) for b, grp in zip(old_alt.params, node.gene.params)}
    fresh = sample_params(new_alt, rng)
    params = []
    for block, grp in zip(new_alt.params, fresh):
        kept = old_params.get(block.name)
        if kept is not None and kept[0] == block:
            params.append(list(kept[1]))
        else:
            params.append(grp)

    pool: dict[str, list[DerivationNode]] = defaultdict(list)
    for child in node.children:
        pool[child.gene.nonterminal].append(child)
    children = []
    for name in new_alt.nonterminals:
        if pool[name]:
            children.append(pool[name].pop(0))
        else:
            children.append(sample_subtree(grammar, name, rng))
    node.gene.choice = new_choice
    node.gene.params = params
    node.children = children
    return node


def _find_node(root: DerivationNode, gene) -> DerivationNode:
    stack = [root]
    while stack:
        node = stack.pop()
        if node.gene is gene:
            return node
        stack.extend(node.children)
    raise LookupError("gene not in derivation")  # unreachable for consistent units


def _dsge(g: Genotype, grammar: Grammar, rng: np.random.Generator) -> bool:
    units = [(u, idx) for u in g.owned() if (idx := _eligible_genes(u, grammar))]
    if not units:
        return False
    unit, idx = units[int(rng.integers(len(units)))]
    gene = unit.genes[idx[int(rng.integers(len(idx)))]]
    alts = grammar[gene.nonterminal]
    alt = alts[gene.choice]
    n_values = sum(len(grp) for grp in gene.params)
    change_choice = len(alts) > 1 and (n_values == 0 or rng.random() < 0.5)
    if change_choice:
        others = [c for c in range(len(alts)) if c != gene.choice]
        new_choice = others[int(rng.integers(len(others)))]
        root = derivation_tree(unit, grammar)
        _rederive(_find_node(root, gene), new_choice, grammar, rng)
        unit.genes = flatten_tree(root)
    else:
        k = int(rng.integers(n_values))
        for block, grp in zip(alt.params, gene.params):
            if k < len(grp):
                if block.kind == "int":
                    grp[k] = int(rng.integers(int(block.min), int(block.max) + 1))
                else:
                    grp[k] = float(rng.uniform(block.min, block.max))
                break
            k -= len(grp)
    return True


def mutate_add(genotype: Genotype, grammar: Grammar, outer: OuterStructure, rng: np.random.Generator) -> Genotype:
    """Insert a fresh random unit into a block that still has room."""
    g = genotype.clone()
    _add(g, grammar, outer, rng)
    return g


def mutate_duplicate(genotype: Genotype, rng: np.random.Generator, outer: OuterStructure | None = None) -> Genotype:
    """Insert an alias (copy by reference) of an existing unit in its block."""
    g = genotype.clone()
    _duplicate(g, outer, rng)
    return g


def mutate_remove(genotype: Genotype, rng: np.random.Generator, outer: OuterStructure | None = None) -> Genotype:
    g = genotype.clone()
    _remove(g, outer, rng)
    return g


def mutate_dsge(genotype: Genotype, grammar: Grammar, rng: np.random.Generator) -> Genotype:
    """Perturb one inner gene: either its expansion choice or one parameter."""
    g = genotype.clone()
    _dsge(g, grammar, rng)
    return g


def mutate_train_time(genotype: Genotype) -> Genotype:
    g = genotype.clone()
    g.train_time_units += 1
    return g


def mutate_with_log(
    parent: Individual | Genotype,
    rates: VariationRates,
    grammar: Grammar,
    outer: OuterStructure,
    rng: np.random.Generator,
) -> tuple[Genotype, list[str]]:
    """Like :func:`mutate` but also returns the operators whose draw fired."""
    source = parent.genotype if isinstance(parent, Individual) else parent
    g = source.clone()
    fired = []
    for name in OPERATORS:
        if rng.random() < getattr(rates, name):
            fired.append(name)
            if name == "add":
                _add(g, grammar, outer, rng)
            elif name == "duplicate":
                _duplicate(g, outer, rng)
            elif name == "remove":
                _remove(g, outer, rng)
            elif name == "dsge":
                _dsge(g, grammar, rng)
            else:
                g.train_time_units += 1
    if not fired:
        _dsge(g, grammar, rng)
    target = source.content_key()
    tries = 0
    while g.content_key() == target:
        # operators can cancel out or resample an identical value
        if tries >= 100 or not _dsge(g, grammar, rng):
            g.train_time_units += 1
        tries += 1
    return g, fired


def mutate(
    parent: Individual | Genotype,
    rates: VariationRates,
    grammar: Grammar,
    outer: OuterStructure,
    rng: np.random.Generator,
) -> Genotype:
    """Produce one offspring genotype.

    Each operator fires independently with its rate. When nothing fires, one
    DSGE perturbation is forced, so the offspring always differs from its
    parent.
    """
    return mutate_with_log(parent, rates, grammar, outer, rng)[0]


def _rebuild_block(child: Genotype, tagged: list[tuple[Genotype, int, object]]) -> list:
    """Re-own slots coming from two parents, materialising orphaned aliases."""
    out: list = [None] * len(tagged)
    id_map: dict[tuple[int, int], int] = {}
    for i, (src, b, slot) in enumerate(tagged):
        if isinstance(slot, EvoUnit):
            unit = copy.deepcopy(slot)
            unit.unit_id = child.new_id()
            id_map[(id(src), slot.unit_id)] = unit.unit_id
            out[i] = unit
    for i, (src, b, slot) in enumerate(tagged):
        if isinstance(slot, Alias):
            key = (id(src), slot.unit_id)
            if key in id_map:
                out[i] = Alias(id_map[key])
            else:
                unit = copy.deepcopy(src.find(b, slot.unit_id))
                unit.unit_id = child.new_id()
                id_map[key] = unit.unit_id
                out[i] = unit
    return out


def crossover(
    a: Genotype,
    b: Genotype,
    rng: np.random.Generator,
    outer: OuterStructure | None = None,
) -> tuple[Genotype, Genotype]:
    """Swap the units at one positional span of one block between two parents.

    Both children keep their parents' block sizes, so bounds that held before
    still hold afterwards.
    """
    if len(a.blocks) != len(b.blocks):
        raise ValueError("parents have different outer structures")
    blk = int(rng.integers(len(a.blocks)))
    sa, sb = a.blocks[blk], b.blocks[blk]
    n = min(len(sa), len(sb))
    if n == 0:
        return a.clone(), b.clone()
    i = int(rng.integers(n))
    j = int(rng.integers(i + 1, n + 1))

    new_a = [(a, blk, s) for s in sa[:i]] + [(b, blk, s) for s in sb[i:j]] + [(a, blk, s) for s in sa[j:]]
    new_b = [(b, blk, s) for s in sb[:i]] + [(a, blk, s) for s in sa[i:j]] + [(b, blk, s) for s in sb[j:]]
    child_a, child_b = a.clone(), b.clone()
    # existing ids stay valid in untouched blocks; the rebuilt block gets fresh ones
    child_a.blocks[blk] = _rebuild_block(child_a, new_a)
    child_b.blocks[blk] = _rebuild_block(child_b, new_b)
    return child_a, child_b
