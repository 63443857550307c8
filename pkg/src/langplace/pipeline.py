"""parse -> embed -> adapt -> ground -> place, in one call."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from langplace.adapter import AdapterPair, AdapterWeights
from langplace.core import GroundedPair, Scene, Vec2
from langplace.grounding import ground_all
from langplace.parser import Lexicon, ParsedInstruction, parse
from langplace.placement import PlacementField, PlacementParams, build_field, normalize_and_sample


@dataclass
class Placement:
    parsed: ParsedInstruction
    pairs: list[GroundedPair]
    field: PlacementField
    point: Vec2


def identity_pair(dim: int, hidden: int = 112, temperature: float = 0.01) -> AdapterPair:
    """Gates at zero: grounding on the raw encoder similarities."""
    return AdapterPair(AdapterWeights.zeros(dim, hidden), AdapterWeights.zeros(dim, hidden),
                       alpha=0.0, beta=0.0, temperature=temperature)


def ground_and_place(scene: Scene, instruction: str, pair: AdapterPair, provider,
                     lex: Optional[Lexicon] = None, params: PlacementParams = PlacementParams(),
                     seed=0, llm=None) -> Placement:
    lex = lex or Lexicon.default()
    parsed = parse(instruction, lex, llm)
    pairs = ground_all(scene, parsed, pair, provider, lex)
    field = build_field(pairs, scene, params)
    return Placement(parsed, pairs, field, normalize_and_sample(field, seed))
