"""Grammar and outer-structure parsing.

Grammar sources use a plain ASCII notation::

    <activation> ::= act:linear | act:relu | act:sigmoid
    <dropout> ::= layer:dropout [rate,float,1,0,0.7]

A rule may span several lines; every line up to the next ``::=`` belongs to
the current rule. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Union

__all__ = [
    "GrammarError",
    "ParamBlock",
    "Terminal",
    "NonTerminal",
    "Alternative",
    "Grammar",
    "OuterBlock",
    "OuterStructure",
    "parse_grammar",
    "parse_outer",
    "validate",
    "load_grammar",
    "default_grammar",
    "default_outer",
    "desk_grammar",
    "desk_outer",
]


class GrammarError(ValueError):
    """Syntax or consistency error in a grammar or outer-structure source."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ParamBlock:
    name: str
    kind: str  # "int" | "float"
    count: int
    min: float
    max: float

    def __str__(self) -> str:
        return f"[{self.name},{self.kind},{self.count},{_fmt(self.min, self.kind)},{_fmt(self.max, self.kind)}]"


@dataclass(frozen=True)
class Terminal:
    text: str

    @property
    def key(self) -> str:
        return self.text.split(":", 1)[0]

    @property
    def value(self) -> str:
        return self.text.split(":", 1)[1]

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class NonTerminal:
    name: str

    def __str__(self) -> str:
        return f"<{self.name}>"


Symbol = Union[Terminal, NonTerminal, ParamBlock]


@dataclass(frozen=True)
class Alternative:
    symbols: tuple[Symbol, ...]

    @property
    def params(self) -> tuple[ParamBlock, ...]:
        return tuple(s for s in self.symbols if isinstance(s, ParamBlock))

    @property
    def nonterminals(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.symbols if isinstance(s, NonTerminal))

    def __str__(self) -> str:
        return " ".join(str(s) for s in self.symbols)


@dataclass(frozen=True)
class Grammar:
    """Ordered production rules; alternative order defines the DSGE indices."""

    rules: Mapping[str, tuple[Alternative, ...]]

    def __post_init__(self):
        if not self.rules:
            raise GrammarError("grammar has no rules")
        # freeze a private copy so the mapping cannot be mutated behind our back
        object.__setattr__(self, "rules", dict(self.rules))

    def __getitem__(self, name: str) -> tuple[Alternative, ...]:
        return self.rules[name]

    def __contains__(self, name: object) -> bool:
        return name in self.rules

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Grammar):
            return NotImplemented
        return list(self.rules.items()) == list(other.rules.items())

    def __hash__(self) -> int:
        return hash(tuple(self.rules.items()))

    def serialize(self) -> str:
        lines = []
        for name, alts in self.rules.items():
            lines.append(f"<{name}> ::= " + " | ".join(str(a) for a in alts))
        return "\n".join(lines) + "\n"

    def unresolved(self) -> list[str]:
        """Nonterminals referenced by some alternative but lacking a rule."""
        missing: list[str] = []
        for alts in self.rules.values():
            for alt in alts:
                for name in alt.nonterminals:
                    if name not in self.rules and name not in missing:
                        missing.append(name)
        return missing


@dataclass(frozen=True)
class OuterBlock:
    rule: str
    min_units: int
    max_units: int


@dataclass(frozen=True)
class OuterStructure:
    blocks: tuple[OuterBlock, ...]

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, i: int) -> OuterBlock:
        return self.blocks[i]

    def serialize(self) -> str:
        return "[" + ",".join(f"({b.rule},{b.min_units},{b.max_units})" for b in self.blocks) + "]"


def _fmt(x: float, kind: str) -> str:
    if kind == "int":
        return str(int(x))
    return repr(float(x))


_TOKEN = re.compile(r"<[^<>\s]+>|\[[^\]]*\]?|\||\S+")
_NAME = re.compile(r"^[A-Za-z_][\w\-.]*$")
_RULE_HEAD = re.compile(r"^\s*<([^<>\s]+)>\s*::=(.*)$")


def _parse_number(tok: str, line: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise GrammarError(f"non-numeric bound {tok!r}", line) from None


def _parse_block(tok: str, line: int) -> ParamBlock:
    if not tok.endswith("]"):
        raise GrammarError(f"unterminated parameter block {tok!r}", line)
    fields = [f.strip() for f in tok[1:-1].split(",")]
    if len(fields) != 5:
        raise GrammarError(f"parameter block needs 5 fields, got {len(fields)}: {tok!r}", line)
    name, kind, count, lo, hi = fields
    if not _NAME.match(name):
        raise GrammarError(f"bad parameter name {name!r}", line)
    if kind not in ("int", "float"):
        raise GrammarError(f"unknown parameter kind {kind!r}", line)
    try:
        n = int(count)
    except ValueError:
        raise GrammarError(f"non-integer value count {count!r}", line) from None
    if n < 1:
        raise GrammarError(f"value count must be >= 1, got {n}", line)
    lo_v, hi_v = _parse_number(lo, line), _parse_number(hi, line)
    if lo_v > hi_v:
        raise GrammarError(f"min > max in {tok!r}", line)
    if kind == "int":
        if lo_v != int(lo_v) or hi_v != int(hi_v):
            raise GrammarError(f"int parameter with fractional bounds {tok!r}", line)
        lo_v, hi_v = int(lo_v), int(hi_v)
    return ParamBlock(name, kind, n, lo_v, hi_v)


def _parse_alternative(tokens: list[str], line: int) -> Alternative:
    if not tokens:
        raise GrammarError("empty alternative", line)
    symbols: list[Symbol] = []
    for tok in tokens:
        if tok.startswith("<"):
            if not tok.endswith(">") or not _NAME.match(tok[1:-1]):
                raise GrammarError(f"malformed nonterminal {tok!r}", line)
            symbols.append(NonTerminal(tok[1:-1]))
        elif tok.startswith("["):
            symbols.append(_parse_block(tok, line))
        else:
            if tok.count(":") != 1 or tok.startswith(":") or tok.endswith(":"):
                raise GrammarError(f"terminal must have form key:value, got {tok!r}", line)
            symbols.append(Terminal(tok))
    return Alternative(tuple(symbols))


def parse_grammar(text: str) -> Grammar:
    """Parse a grammar source into a :class:`Grammar`.

    Raises
    ------
    GrammarError
        On empty input, a missing ``::=``, malformed parameter blocks or
        terminals, or a rule defined twice. The message carries the line.
    """
    if not text or not text.strip():
        raise GrammarError("empty grammar source")
    chunks: list[tuple[str, int, list[tuple[str, int]]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _RULE_HEAD.match(raw)
        if m:
            chunks.append((m.group(1), lineno, [(m.group(2), lineno)]))
        elif "::=" in raw:
            raise GrammarError("malformed rule head", lineno)
        elif not chunks:
            raise GrammarError("missing '::='", lineno)
        else:
            chunks[-1][2].append((raw, lineno))

    rules: dict[str, tuple[Alternative, ...]] = {}
    for name, head_line, body in chunks:
        if not _NAME.match(name):
            raise GrammarError(f"bad rule name {name!r}", head_line)
        if name in rules:
            raise GrammarError(f"rule <{name}> defined twice", head_line)
        alts: list[Alternative] = []
        current: list[str] = []
        current_line = head_line
        for segment, lineno in body:
            for tok in _TOKEN.findall(segment):
                if tok == "|":
                    alts.append(_parse_alternative(current, current_line))
                    current, current_line = [], lineno
                else:
                    if not current:
                        current_line = lineno
                    current.append(tok)
        alts.append(_parse_alternative(current, current_line))
        rules[name] = tuple(alts)
    return Grammar(rules)


_OUTER_ITEM = re.compile(r"\(\s*([^,()\s]+)\s*,\s*([^,()\s]+)\s*,\s*([^,()\s]+)\s*\)")


def parse_outer(text: str) -> OuterStructure:
    """Parse ``[(rule,min,max), ...]`` into an :class:`OuterStructure`."""
    if not text or not text.strip():
        raise GrammarError("empty outer-structure source")
    s = text.strip()
    if not (s.startswith("[") and s.endswith("]")):
        raise GrammarError(f"outer structure must be a bracketed list: {s!r}")
    body = s[1:-1].strip()
    blocks: list[OuterBlock] = []
    pieces = _OUTER_ITEM.split(body)
    # split() alternates separator text with the three captured fields
    separators = pieces[0::4]
    if separators[0].strip() or separators[-1].strip() or any(
        sep.strip() != "," for sep in separators[1:-1]
    ):
        raise GrammarError(f"malformed tuple list {body!r}")
    for m in _OUTER_ITEM.finditer(body):
        rule, lo, hi = m.groups()
        if not _NAME.match(rule):
            raise GrammarError(f"bad rule name {rule!r}")
        try:
            lo_i, hi_i = int(lo), int(hi)
        except ValueError:
            raise GrammarError(f"non-integer bound in ({rule},{lo},{hi})") from None
        if lo_i < 0:
            raise GrammarError(f"negative min_units for {rule}")
        if lo_i > hi_i:
            raise GrammarError(f"min_units > max_units for {rule}: {lo_i} > {hi_i}")
        blocks.append(OuterBlock(rule, lo_i, hi_i))
    if not blocks:
        raise GrammarError("outer structure has no blocks")
    return OuterStructure(tuple(blocks))


def validate(grammar: Grammar, outer: OuterStructure) -> list[str]:
    """Return diagnostics; an empty list means the pair is usable."""
    diagnostics = []
    for block in outer:
        if block.rule not in grammar:
            diagnostics.append(f"unresolved: {block.rule}")
    for name in grammar.unresolved():
        diagnostics.append(f"unresolved: {name}")
    return diagnostics


def load_grammar(path: str | Path) -> Grammar:
    return parse_grammar(Path(path).read_text(encoding="utf-8"))


def _data_text(name: str) -> str:
    return resources.files("neurogram.data").joinpath(name).read_text(encoding="utf-8")


def default_grammar() -> Grammar:
    """The full CNN search space (32-256 filters, 128-2048 units)."""
    return parse_grammar(_data_text("cnn.grammar"))


def default_outer() -> OuterStructure:
    return parse_outer(_data_text("cnn.outer"))


def desk_grammar() -> Grammar:
    """Same rules as :func:`default_grammar` with ranges shrunk for CPU runs."""
    return parse_grammar(_data_text("desk.grammar"))


def desk_outer() -> OuterStructure:
    return parse_outer(_data_text("desk.outer"))
