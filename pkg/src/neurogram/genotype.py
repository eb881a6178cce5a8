"""Two-level individual representation.

The outer level is a list of blocks (one per outer-structure entry), each a
list of slots. A slot either owns an :class:`EvoUnit` or is an
:class:`Alias` pointing at an owned unit of the same block. The inner level
of each unit is a flat, depth-first list of DSGE genes.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from .grammar import Alternative, Grammar, NonTerminal, OuterStructure, ParamBlock, Terminal

__all__ = [
    "GenotypeError",
    "DsgeGene",
    "EvoUnit",
    "Alias",
    "Genotype",
    "Individual",
    "DerivationNode",
    "random_unit",
    "random_genotype",
    "resolve",
    "derivation_tree",
    "flatten_tree",
    "sample_params",
    "sample_subtree",
    "check_genotype",
    "serialize_genotype",
    "parse_genotype",
]

MAX_EXPANSIONS = 50
SERIAL_VERSION = 1


class GenotypeError(ValueError):
    """Structural error: dangling alias, incomplete derivation, bad bounds."""


@dataclass
class DsgeGene:
    nonterminal: str
    choice: int
    params: list[list[Any]] = field(default_factory=list)


@dataclass
class EvoUnit:
    unit_id: int
    start: str
    genes: list[DsgeGene]


@dataclass(frozen=True)
class Alias:
    unit_id: int


Slot = Union[EvoUnit, Alias]


@dataclass
class Genotype:
    blocks: list[list[Slot]]
    train_time_units: int = 1
    next_id: int = 0

    def new_id(self) -> int:
        uid = self.next_id
        self.next_id += 1
        return uid

    def owned(self, block: int | None = None) -> list[EvoUnit]:
        blocks = self.blocks if block is None else [self.blocks[block]]
        return [s for b in blocks for s in b if isinstance(s, EvoUnit)]

    def find(self, block: int, unit_id: int) -> EvoUnit:
        for s in self.blocks[block]:
            if isinstance(s, EvoUnit) and s.unit_id == unit_id:
                return s
        raise GenotypeError(f"dangling alias @{unit_id} in block {block}")

    def clone(self) -> "Genotype":
        # gene values are scalars and aliases are immutable, so a structural copy suffices
        def unit(u: EvoUnit) -> EvoUnit:
            genes = [DsgeGene(g.nonterminal, g.choice, [list(b) for b in g.params]) for g in u.genes]
            return EvoUnit(u.unit_id, u.start, genes)

        blocks = [[unit(s) if isinstance(s, EvoUnit) else s for s in b] for b in self.blocks]
        return Genotype(blocks, self.train_time_units, self.next_id)

    def content_key(self) -> tuple:
        """Identity-free structural and parametric fingerprint."""
        key = []
        for b, slots in enumerate(self.blocks):
            owners = {s.unit_id: i for i, s in enumerate(slots) if isinstance(s, EvoUnit)}
            row = []
            for s in slots:
                if isinstance(s, Alias):
                    row.append(("alias", owners.get(s.unit_id, -1)))
                else:
                    row.append(tuple((g.nonterminal, g.choice, tuple(map(tuple, g.params))) for g in s.genes))
            key.append(tuple(row))
        return (tuple(key), self.train_time_units)

    def layer_count(self) -> int:
        return sum(len(b) for b in self.blocks)


@dataclass
class Individual:
    genotype: Genotype
    fitness: float | None = None
    metrics: dict = field(default_factory=dict)
    model: Any = None

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None


@dataclass
class DerivationNode:
    gene: DsgeGene
    children: list["DerivationNode"]


def sample_params(alt: Alternative, rng: np.random.Generator) -> list[list[Any]]:
    groups = []
    for block in alt.params:
        groups.append(_sample_block(block, rng))
    return groups


def _sample_block(block: ParamBlock, rng: np.random.Generator) -> list[Any]:
    if block.kind == "int":
        return [int(v) for v in rng.integers(int(block.min), int(block.max) + 1, size=block.count)]
    return [float(v) for v in rng.uniform(block.min, block.max, size=block.count)]


def sample_subtree(
    grammar: Grammar,
    symbol: str,
    rng: np.random.Generator,
    choice: int | None = None,
    _counts: Counter | None = None,
) -> DerivationNode:
    counts = Counter() if _counts is None else _counts
    counts[symbol] += 1
    if counts[symbol] > MAX_EXPANSIONS:
        raise GenotypeError(f"derivation of <{symbol}> exceeded {MAX_EXPANSIONS} expansions")
    alts = grammar[symbol]
    if choice is None:
        choice = int(rng.integers(len(alts)))
    alt = alts[choice]
    gene = DsgeGene(symbol, choice, sample_params(alt, rng))
    children = [sample_subtree(grammar, name, rng, _counts=counts) for name in alt.nonterminals]
    return DerivationNode(gene, children)


def flatten_tree(node: DerivationNode) -> list[DsgeGene]:
    out = [node.gene]
    for child in node.children:
        out.extend(flatten_tree(child))
    return out


def derivation_tree(unit: EvoUnit, grammar: Grammar) -> DerivationNode:
    """Rebuild the derivation tree from a unit's flat gene list."""
    pos = 0

    def walk(symbol: str) -> DerivationNode:
        nonlocal pos
        if pos >= len(unit.genes):
            raise GenotypeError(f"unit {unit.unit_id}: incomplete derivation, <{symbol}> has no gene")
        gene = unit.genes[pos]
        if gene.nonterminal != symbol:
            raise GenotypeError(
                f"unit {unit.unit_id}: expected gene for <{symbol}>, found <{gene.nonterminal}>"
            )
        if symbol not in grammar:
            raise GenotypeError(f"unit {unit.unit_id}: unknown nonterminal <{symbol}>")
        alts = grammar[symbol]
        if not 0 <= gene.choice < len(alts):
            raise GenotypeError(f"unit {unit.unit_id}: choice {gene.choice} out of range for <{symbol}>")
        pos += 1
        alt = alts[gene.choice]
        return DerivationNode(gene, [walk(name) for name in alt.nonterminals])

    root = walk(unit.start)
    if pos != len(unit.genes):
        raise GenotypeError(f"unit {unit.unit_id}: {len(unit.genes) - pos} non-coding genes")
    return root


def random_unit(grammar: Grammar, start: str, rng: np.random.Generator, unit_id: int = 0) -> EvoUnit:
    """Sample a complete derivation from ``start``.

    Every choice is uniform over the rule's alternatives and every parameter
    uniform over its block range (integers inclusive).
    """
    if start not in grammar:
        raise GenotypeError(f"unknown start symbol <{start}>")
    return EvoUnit(unit_id, start, flatten_tree(sample_subtree(grammar, start, rng)))


def random_genotype(grammar: Grammar, outer: OuterStructure, rng: np.random.Generator) -> Genotype:
    g = Genotype(blocks=[], train_time_units=1)
    for block in outer:
        size = int(rng.integers(block.min_units, block.max_units + 1))
        g.blocks.append([random_unit(grammar, block.rule, rng, g.new_id()) for _ in range(size)])
    return g


def resolve(genotype: Genotype) -> list[EvoUnit]:
    """Flatten all blocks, replacing aliases with the unit they point at."""
    out = []
    for b, slots in enumerate(genotype.blocks):
        for s in slots:
            out.append(genotype.find(b, s.unit_id) if isinstance(s, Alias) else s)
    return out


def _check_params(gene: DsgeGene, alt: Alternative) -> list[str]:
    problems = []
    blocks = alt.params
    if len(gene.params) != len(blocks):
        return [f"<{gene.nonterminal}> has {len(gene.params)} param groups, expected {len(blocks)}"]
    for block, values in zip(blocks, gene.params):
        if len(values) != block.count:
            problems.append(f"{block.name}: {len(values)} values, expected {block.count}")
        for v in values:
            if block.kind == "int" and (not isinstance(v, (int, np.integer)) or isinstance(v, bool)):
                problems.append(f"{block.name}: non-integer value {v!r}")
            if not block.min <= v <= block.max:
                problems.append(f"{block.name}: {v!r} outside [{block.min}, {block.max}]")
    return problems


def check_genotype(genotype: Genotype, grammar: Grammar, outer: OuterStructure) -> list[str]:
    """Full structural validator; returns a list of problems (empty = valid)."""
    problems: list[str] = []
    if len(genotype.blocks) != len(outer):
        return [f"{len(genotype.blocks)} blocks, outer structure has {len(outer)}"]
    if genotype.train_time_units < 1:
        problems.append("train_time_units < 1")
    seen_ids: set[int] = set()
    for b, (slots, spec) in enumerate(zip(genotype.blocks, outer)):
        if not spec.min_units <= len(slots) <= spec.max_units:
            problems.append(f"block {spec.rule}: {len(slots)} slots outside [{spec.min_units}, {spec.max_units}]")
        owned_here = set()
        for s in slots:
            if isinstance(s, EvoUnit):
                if s.unit_id in seen_ids:
                    problems.append(f"duplicate unit id {s.unit_id}")
                seen_ids.add(s.unit_id)
                owned_here.add(s.unit_id)
                if s.start != spec.rule:
                    problems.append(f"unit {s.unit_id} starts at <{s.start}> in block {spec.rule}")
                try:
                    tree = derivation_tree(s, grammar)
                except GenotypeError as e:
                    problems.append(str(e))
                    continue
                stack = [tree]
                while stack:
                    node = stack.pop()
                    alt = grammar[node.gene.nonterminal][node.gene.choice]
                    problems.extend(_check_params(node.gene, alt))
                    stack.extend(node.children)
        for s in slots:
            if isinstance(s, Alias) and s.unit_id not in owned_here:
                problems.append(f"dangling alias @{s.unit_id} in block {spec.rule}")
    if genotype.next_id <= max(seen_ids, default=-1):
        problems.append("next_id collides with an existing unit id")
    return problems


def _fmt_value(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        raise GenotypeError("boolean parameter values are not supported")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse_value(tok: str) -> Any:
    try:
        return int(tok)
    except ValueError:
        return float(tok)


def serialize_genotype(genotype: Genotype, outer: OuterStructure | None = None) -> str:
    """Text form: block headers, ``unit <id> <start>`` lines, one gene per
    line as ``nonterminal/choice/group/group...`` and ``@id`` alias markers."""
    lines = [f"#genotype v{SERIAL_VERSION}", f"train_time_units={genotype.train_time_units}",
             f"next_id={genotype.next_id}"]
    for b, slots in enumerate(genotype.blocks):
        name = outer[b].rule if outer is not None else str(b)
        lines.append(f"[{name}]")
        for s in slots:
            if isinstance(s, Alias):
                lines.append(f"@{s.unit_id}")
                continue
            lines.append(f"unit {s.unit_id} {s.start}")
            for g in s.genes:
                fields = [g.nonterminal, str(g.choice)] + [",".join(_fmt_value(v) for v in grp) for grp in g.params]
                lines.append("/".join(fields))
    return "\n".join(lines) + "\n"


def parse_genotype(text: str) -> Genotype:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != f"#genotype v{SERIAL_VERSION}":
        raise GenotypeError("missing or unsupported genotype header")
    g = Genotype(blocks=[])
    current: EvoUnit | None = None
    for ln in lines[1:]:
        if ln.startswith("train_time_units="):
            g.train_time_units = int(ln.split("=", 1)[1])
        elif ln.startswith("next_id="):
            g.next_id = int(ln.split("=", 1)[1])
        elif ln.startswith("[") and ln.endswith("]"):
            g.blocks.append([])
            current = None
        elif ln.startswith("@"):
            if not g.blocks:
                raise GenotypeError("alias before first block header")
            g.blocks[-1].append(Alias(int(ln[1:])))
            current = None
        elif ln.startswith("unit "):
            if not g.blocks:
                raise GenotypeError("unit before first block header")
            _, uid, start = ln.split()
            current = EvoUnit(int(uid), start, [])
            g.blocks[-1].append(current)
        else:
            if current is None:
                raise GenotypeError(f"gene line outside a unit: {ln!r}")
            fields = ln.split("/")
            if len(fields) < 2:
                raise GenotypeError(f"malformed gene line {ln!r}")
            params = [[_parse_value(t) for t in grp.split(",")] for grp in fields[2:]]
            current.genes.append(DsgeGene(fields[0], int(fields[1]), params))
    return g
