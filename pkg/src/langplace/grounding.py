"""Turn parsed tuples into (visual token index, canonical relation) pairs."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from langplace.adapter import AdapterPair
from langplace.core import (
    CanonicalRelation, GroundedPair, RelationFamily, Scene, Tuple, relations_of,
)
from langplace.embeddings import tokenize_scene
from langplace.parser import Lexicon, ParsedInstruction


def ground_references(P: np.ndarray) -> list[int]:
    """Row-wise argmax; ``np.argmax`` already returns the lowest index on ties."""
    P = np.asarray(P)
    if P.ndim != 2 or P.shape[0] == 0 or P.shape[1] == 0:
        raise ValueError(f"need a non-empty L x (N+1) matrix, got shape {P.shape}")
    return [int(i) for i in np.argmax(P, axis=1)]


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def refers_to_table(ref_expr: str) -> bool:
    return "table" in ref_expr.lower().split()


def relation_family_for(ref_expr: str) -> RelationFamily:
    return RelationFamily.TABLE_REGION if refers_to_table(ref_expr) else RelationFamily.OBJECT_DIR


def ground_relation(t: Tuple, lex: Lexicon, provider) -> CanonicalRelation:
    """Canonical relation for a tuple.

    Lexicon hits are used as-is.  Anything else is resolved by substituting
    each candidate relation into the tuple and keeping the one whose text
    embedding is closest to the original tuple's.
    """
    hit = lex.lookup(t.rel_expr)
    if hit is not None:
        return hit
    candidates = relations_of(relation_family_for(t.ref_expr))
    anchor = provider.embed_text(t.render())
    scores = [_cos(anchor, provider.embed_text(Tuple(t.ref_expr, c.value).render())) for c in candidates]
    return candidates[int(np.argmax(scores))]


def ground_relation_text(text: str, provider, family: Optional[RelationFamily] = None) -> CanonicalRelation:
    """Fallback for completions with no tuple structure: compare the raw text to each relation name."""
    candidates = relations_of(family) if family is not None else tuple(CanonicalRelation)
    anchor = provider.embed_text(text)
    scores = [_cos(anchor, provider.embed_text(c.value)) for c in candidates]
    return candidates[int(np.argmax(scores))]


def ground_all(scene: Scene, parsed: ParsedInstruction, pair: AdapterPair, provider,
               lex: Lexicon) -> list[GroundedPair]:
    tuples = parsed.tuples
    if not tuples:
        raise ValueError("nothing to ground")
    V, T = tokenize_scene(provider, scene, tuples)
    refs = ground_references(pair.probs(V, T))
    out = []
    for t, n in zip(tuples, refs):
        rel = ground_relation(t, lex, provider)
        if rel.is_region:
            n = scene.n_objects
        elif n == scene.n_objects:
            # a direction has to hang off an object; take the best object crop instead
            n = _best_object(pair, V, T, len(out), scene.n_objects)
        out.append(GroundedPair(n, rel))
    return out


def _best_object(pair: AdapterPair, V, T, row: int, n_objects: int) -> int:
    if n_objects == 0:
        return n_objects
    P = pair.probs(V, T)
    return int(np.argmax(P[row, :n_objects]))
