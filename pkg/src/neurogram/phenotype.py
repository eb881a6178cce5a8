"""Genotype to network-description mapping and static shape checking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

from .genotype import EvoUnit, Genotype, GenotypeError, derivation_tree, resolve
from .grammar import Grammar, NonTerminal, OuterStructure, ParamBlock, Terminal

__all__ = [
    "PhenotypeError",
    "LayerSpec",
    "LearningSpec",
    "NetworkPlan",
    "LAYER_KINDS",
    "ALGORITHMS",
    "derive",
    "parse_phenotype",
    "build_plan",
    "plan_from_phenotypes",
    "check_valid",
    "propagate_shapes",
]

LAYER_KINDS = ("conv", "pool-avg", "pool-max", "dropout", "batch-norm", "fc")
ALGORITHMS = ("gradient-descent", "adam", "rmsprop")
_ALGO_KEYS = {
    "gradient-descent": {"lr", "momentum", "decay", "nesterov"},
    "adam": {"lr", "beta1", "beta2", "decay"},
    "rmsprop": {"lr", "rho", "decay"},
}
_LAYER_KEYS = {
    "conv": {"num-filters", "filter-shape", "stride", "padding", "act", "bias"},
    "pool-avg": {"kernel-size", "stride", "padding"},
    "pool-max": {"kernel-size", "stride", "padding"},
    "dropout": {"rate"},
    "batch-norm": set(),
    "fc": {"act", "num-units", "bias"},
}


class PhenotypeError(ValueError):
    """A phenotype string that does not describe a layer or learning unit."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    attrs: dict = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((self.kind, tuple(sorted(self.attrs.items()))))


@dataclass(frozen=True)
class LearningSpec:
    algorithm: str
    hyper: dict
    batch_size: int
    early_stop_patience: int

    def __hash__(self) -> int:
        return hash((self.algorithm, tuple(sorted(self.hyper.items())), self.batch_size, self.early_stop_patience))


@dataclass(frozen=True)
class NetworkPlan:
    layers: tuple[LayerSpec, ...]
    learning: LearningSpec
    input_shape: tuple[int, int, int]
    phenotypes: tuple[str, ...] = ()

    @property
    def n_classes(self) -> int:
        return int(self.layers[-1].attrs["num-units"])


def _render(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def derive(unit: EvoUnit, grammar: Grammar) -> str:
    """Expand a unit depth-first into its ``key:value`` phenotype string."""
    tree = derivation_tree(unit, grammar)
    tokens: list[str] = []

    def walk(node) -> None:
        alt = grammar[node.gene.nonterminal][node.gene.choice]
        children = iter(node.children)
        groups = iter(node.gene.params)
        for sym in alt.symbols:
            if isinstance(sym, Terminal):
                tokens.append(sym.text)
            elif isinstance(sym, ParamBlock):
                values = next(groups)
                rendered = ",".join(_render(v) for v in values)
                tokens.append(f"{sym.name}:{rendered}")
            else:
                walk(next(children))

    walk(tree)
    return " ".join(tokens)


def _convert(key: str, raw: str) -> Any:
    if raw in ("True", "False"):
        return raw == "True"
    if key in ("padding", "act", "layer", "learning"):
        return raw
    if "," in raw:
        return tuple(_convert(key, r) for r in raw.split(","))
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_phenotype(text: str) -> LayerSpec | LearningSpec:
    pairs: dict[str, Any] = {}
    for tok in text.split():
        if ":" not in tok:
            raise PhenotypeError(f"token without ':' in {text!r}")
        key, raw = tok.split(":", 1)
        if key in pairs:
            raise PhenotypeError(f"duplicate key {key!r} in {text!r}")
        pairs[key] = _convert(key, raw)

    if "learning" in pairs:
        algo = pairs.pop("learning")
        if algo not in ALGORITHMS:
            raise PhenotypeError(f"unknown learning algorithm {algo!r}")
        try:
            batch = pairs.pop("batch_size")
            patience = pairs.pop("early_stop")
        except KeyError as e:
            raise PhenotypeError(f"learning unit lacks {e.args[0]}") from None
        if set(pairs) != _ALGO_KEYS[algo]:
            raise PhenotypeError(f"{algo}: unexpected hyper-parameters {sorted(pairs)}")
        return LearningSpec(algo, pairs, int(batch), int(patience))

    if "layer" not in pairs:
        raise PhenotypeError(f"neither a layer nor a learning unit: {text!r}")
    kind = pairs.pop("layer")
    if kind not in LAYER_KINDS:
        raise PhenotypeError(f"unknown layer kind {kind!r}")
    if set(pairs) != _LAYER_KEYS[kind]:
        raise PhenotypeError(f"{kind}: attributes {sorted(pairs)} do not match {sorted(_LAYER_KEYS[kind])}")
    return LayerSpec(kind, pairs)


def plan_from_phenotypes(lines: list[str], input_shape: tuple[int, int, int]) -> NetworkPlan:
    layers: list[LayerSpec] = []
    learning: LearningSpec | None = None
    for line in lines:
        spec = parse_phenotype(line)
        if isinstance(spec, LearningSpec):
            if learning is not None:
                raise PhenotypeError("more than one learning unit")
            learning = spec
        else:
            layers.append(spec)
    if learning is None:
        raise PhenotypeError("no learning unit")
    if not layers:
        raise PhenotypeError("no layers")
    return NetworkPlan(tuple(layers), learning, tuple(int(d) for d in input_shape), tuple(lines))


def build_plan(
    genotype: Genotype,
    grammar: Grammar,
    outer: OuterStructure | None = None,
    input_shape: tuple[int, int, int] = (24, 24, 1),
) -> NetworkPlan:
    """Decode a genotype: resolved unit order is layer order; the learning
    unit becomes the :class:`LearningSpec`."""
    try:
        lines = [derive(u, grammar) for u in resolve(genotype)]
        return plan_from_phenotypes(lines, input_shape)
    except (GenotypeError, PhenotypeError) as e:
        raise RuntimeError(f"internal error decoding genotype: {e}") from e


def _out_dim(d: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(d / s)
    return (d - k) // s + 1


def propagate_shapes(plan: NetworkPlan) -> list[tuple[int, ...]]:
    """Output shape after each layer; raises ValueError on an infeasible net.

    Spatial tensors are channels-last ``(h, w, c)``; after the first fc the
    shape is ``(units,)``.
    """
    shape: tuple[int, ...] = tuple(plan.input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"bad input shape {shape}")
    out = []
    for i, layer in enumerate(plan.layers):
        a = layer.attrs
        if layer.kind in ("conv", "pool-avg", "pool-max"):
            if len(shape) != 3:
                raise ValueError(f"layer {i} ({layer.kind}) after flatten")
            k = a["filter-shape"] if layer.kind == "conv" else a["kernel-size"]
            s = a["stride"]
            h, w, c = shape
            if a["padding"] == "valid" and (k > h or k > w):
                raise ValueError(f"layer {i} ({layer.kind}): kernel exceeds input {h}x{w}")
            h2, w2 = _out_dim(h, k, s, a["padding"]), _out_dim(w, k, s, a["padding"])
            if h2 < 1 or w2 < 1:
                raise ValueError(f"layer {i} ({layer.kind}): output {h2}x{w2}")
            shape = (h2, w2, a["num-filters"] if layer.kind == "conv" else c)
        elif layer.kind == "fc":
            if a["num-units"] < 1:
                raise ValueError(f"layer {i}: fc with {a['num-units']} units")
            shape = (int(a["num-units"]),)
        out.append(shape)
    return out


def check_valid(plan: NetworkPlan, n_classes: int = 2) -> tuple[bool, str]:
    """Return ``(True, "ok")`` or ``(False, reason)``."""
    last = plan.layers[-1]
    if last.kind != "fc" or last.attrs.get("act") != "softmax":
        return False, "last layer is not a softmax fc"
    if last.attrs["num-units"] != n_classes:
        return False, f"softmax has {last.attrs['num-units']} units, expected {n_classes}"
    for i, layer in enumerate(plan.layers[:-1]):
        if layer.kind == "fc" and layer.attrs.get("act") == "softmax":
            return False, f"softmax at hidden layer {i}"
    try:
        propagate_shapes(plan)
    except ValueError as e:
        return False, str(e)
    return True, "ok"
