"""Instruction parsing into (reference, relation) tuples.

The default path is a deterministic lexicon grammar.  An LLM client that
speaks a small JSON wire protocol can be plugged in instead; its completions
are read back with :func:`parse_llm_output`.
"""
from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Optional, Sequence

from langplace.core import CanonicalRelation, Tuple


class ParseFailure(ValueError):
    pass


class LlmFormatFailure(ValueError):
    def __init__(self, message: str, completion: str):
        super().__init__(message)
        self.completion = completion


class LlmUnavailable(RuntimeError):
    pass


class ParseSource(str, Enum):
    GRAMMAR = "grammar"
    LLM = "llm"
    LLM_FALLBACK = "llm_fallback"


_TOKEN_RE = re.compile(r"[a-z0-9]+(?:['\-][a-z0-9]+)*")
_DETERMINERS = ("the", "a", "an")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RelationEntry:
    expr: str
    canonical: CanonicalRelation
    split: str = "seen"

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self.expr.split())


@dataclass
class Lexicon:
    relation_entries: list[RelationEntry]
    prefix_list: list[str] = field(default_factory=list)
    verb_list: list[str] = field(default_factory=list)
    pronoun_list: list[str] = field(default_factory=list)

    def __post_init__(self):
        for e in self.relation_entries:
            if e.expr != " ".join(e.expr.lower().split()):
                raise ValueError(f"relation expression {e.expr!r} must be lowercase and trimmed")
        missing = set(CanonicalRelation) - {e.canonical for e in self.relation_entries}
        if missing:
            raise ValueError(f"lexicon has no surface form for {sorted(m.value for m in missing)}")
        self._by_expr = {e.expr: e.canonical for e in self.relation_entries}
        # longest entries first so a scan can stop at the first hit
        self._rel_patterns = sorted(
            {e.tokens: e.canonical for e in self.relation_entries}.items(),
            key=lambda kv: -len(kv[0]),
        )
        self._lead_lists = [
            sorted((tuple(p.split()) for p in lst), key=len, reverse=True)
            for lst in (self.prefix_list, self.verb_list, self.pronoun_list)
        ]

    @classmethod
    def from_json(cls, doc: dict) -> "Lexicon":
        return cls(
            [RelationEntry(r["expr"], CanonicalRelation.parse(r["canonical"]), r.get("split", "seen"))
             for r in doc["relations"]],
            list(doc.get("prefixes", [])),
            list(doc.get("verbs", [])),
            list(doc.get("pronouns", [])),
        )

    @classmethod
    def load(cls, path) -> "Lexicon":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    @classmethod
    def default(cls) -> "Lexicon":
        text = resources.files("langplace.data").joinpath("lexicon.json").read_text()
        return cls.from_json(json.loads(text))

    def to_json(self) -> dict:
        return {
            "relations": [{"expr": e.expr, "canonical": e.canonical.value, "split": e.split}
                          for e in self.relation_entries],
            "prefixes": self.prefix_list,
            "verbs": self.verb_list,
            "pronouns": self.pronoun_list,
        }

    def expressions(self, canonical: CanonicalRelation, split: Optional[str] = None) -> list[str]:
        return [e.expr for e in self.relation_entries
                if e.canonical is canonical and (split is None or e.split == split)]

    def lookup(self, rel_expr: str) -> Optional[CanonicalRelation]:
        """Canonical relation for a relation string, or None if it is not in the vocabulary.

        Accepts canonical names as well as surface expressions.
        """
        key = " ".join(tokenize(rel_expr))
        if key in self._by_expr:
            return self._by_expr[key]
        try:
            return CanonicalRelation.parse(key)
        except ValueError:
            return None

    def match_relation(self, tokens: Sequence[str], i: int) -> Optional[tuple[int, CanonicalRelation]]:
        for pattern, canonical in self._rel_patterns:
            k = len(pattern)
            if tuple(tokens[i:i + k]) == pattern:
                return k, canonical
        return None

    def strip_lead(self, tokens: Sequence[str]) -> int:
        """Index of the first token after any prefix / verb / pronoun run."""
        i = 0
        progressed = True
        while progressed:
            progressed = False
            for patterns in self._lead_lists:
                for p in patterns:
                    if tuple(tokens[i:i + len(p)]) == p:
                        i += len(p)
                        progressed = True
                        break
        return i


@dataclass(frozen=True)
class ParsedInstruction:
    tuples: list[Tuple]
    source: ParseSource = ParseSource.GRAMMAR

    def __post_init__(self):
        if not self.tuples:
            raise ValueError("a parsed instruction needs at least one tuple")


def _reference(tokens: Sequence[str]) -> str:
    toks = list(tokens)
    while toks and toks[0] in ("of",) + _DETERMINERS:
        toks.pop(0)
    return " ".join(toks)


def parse_instruction(text: str, lex: Lexicon) -> ParsedInstruction:
    """Parse a free-form instruction with the lexicon grammar.

    Relation expressions are found by longest match, scanning left to right.
    Each one opens a tuple whose reference runs up to the next "and" that is
    directly followed by another relation expression.
    """
    if not text or not text.strip():
        raise ParseFailure("empty instruction")
    tokens = tokenize(text)
    i = lex.strip_lead(tokens)

    # first relation anywhere after the lead-in
    while i < len(tokens) and lex.match_relation(tokens, i) is None:
        i += 1
    if i >= len(tokens):
        raise ParseFailure(f"no relation expression in {text!r}")

    tuples = []
    while i < len(tokens):
        k, canonical = lex.match_relation(tokens, i)
        start = i + k
        j = start
        while j < len(tokens):
            if tokens[j] == "and" and lex.match_relation(tokens, j + 1) is not None:
                break
            j += 1
        ref = _reference(tokens[start:j])
        if not ref:
            raise ParseFailure(f"relation {canonical.value!r} has no reference in {text!r}")
        tuples.append(Tuple(ref, canonical.value))
        i = j + 1 if j < len(tokens) else j
    return ParsedInstruction(tuples, ParseSource.GRAMMAR)


# -- LLM route --------------------------------------------------------------

PROMPT_HEADER = ("Parse each placement instruction into (reference | relation) tuples, "
                 "one per line.\n\n")


def build_llm_prompt(examples: Sequence[tuple[str, Sequence[Tuple]]], query: str) -> str:
    """Few-shot prompt built from seen-template examples, ending in an open slot."""
    if not examples:
        raise ValueError("the prompt needs at least one example")
    blocks = []
    for instruction, tuples in examples:
        if not instruction.lower().startswith("put it "):
            raise ValueError(f"prompt examples must come from seen templates, got {instruction!r}")
        lines = [f"instruction: {instruction}"]
        lines += [f"({t.ref_expr} | {t.rel_expr})" for t in tuples]
        blocks.append("\n".join(lines))
    return PROMPT_HEADER + "\n\n".join(blocks) + f"\n\ninstruction: {query}\n"


_TUPLE_LINE = re.compile(r"\(\s*([^()|\n]+?)\s*\|\s*([^()|\n]+?)\s*\)")


def parse_llm_output(completion: str, lex: Lexicon) -> ParsedInstruction:
    tuples = []
    for ref, rel in _TUPLE_LINE.findall(completion):
        ref = _reference(tokenize(ref)) or ref.strip()
        canonical = lex.lookup(rel)
        if canonical is None:
            tuples.append(Tuple(ref, " ".join(rel.lower().split()), canonical=False))
        else:
            tuples.append(Tuple(ref, canonical.value))
    if not tuples:
        raise LlmFormatFailure("no (reference | relation) lines in completion", completion)
    return ParsedInstruction(tuples, ParseSource.LLM)


class LlmClient:
    """POSTs ``{prompt, max_tokens, temperature}`` and reads back ``{text}``."""

    def __init__(self, url: Optional[str] = None, timeout: float = 30.0, max_tokens: int = 64):
        self.url = url or os.environ.get("PLACE_LLM_URL")
        if not self.url:
            raise LlmUnavailable("no LLM endpoint configured (set PLACE_LLM_URL)")
        self.timeout = timeout
        self.max_tokens = max_tokens

    def complete(self, prompt: str) -> str:
        body = json.dumps({"prompt": prompt, "max_tokens": self.max_tokens, "temperature": 0})
        req = urllib.request.Request(self.url, data=body.encode(), method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            raise LlmUnavailable(f"LLM endpoint returned HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise LlmUnavailable(f"LLM endpoint unreachable: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise LlmUnavailable("LLM endpoint returned non-JSON body") from exc
        if not isinstance(payload, dict) or "text" not in payload:
            raise LlmUnavailable("LLM response has no 'text' field")
        return str(payload["text"])


def default_prompt_examples(lex: Lexicon) -> list[tuple[str, list[Tuple]]]:
    """A few seen-template instructions with their tuples, rendered from the lexicon."""
    def expr(rel):
        return (lex.expressions(rel, "seen") or lex.expressions(rel))[0]
    shots = [
        [("table", CanonicalRelation.BOTTOM_RIGHT_CORNER)],
        [("mug", CanonicalRelation.FRONT)],
        [("apple", CanonicalRelation.BEHIND), ("plate", CanonicalRelation.LEFT)],
    ]
    out = []
    for pairs in shots:
        text = "put it " + " and ".join(f"{expr(rel)} the {ref}" for ref, rel in pairs) + "."
        out.append((text, [Tuple(ref, rel.value) for ref, rel in pairs]))
    return out


def parse(text: str, lex: Lexicon, llm: Optional[LlmClient] = None,
          examples: Sequence[tuple[str, Sequence[Tuple]]] = ()) -> ParsedInstruction:
    """Grammar by default; with an LLM client, ask it first and fall back to the grammar."""
    if llm is None:
        return parse_instruction(text, lex)
    examples = examples or default_prompt_examples(lex)
    try:
        return parse_llm_output(llm.complete(build_llm_prompt(examples, text)), lex)
    except (LlmUnavailable, LlmFormatFailure):
        parsed = parse_instruction(text, lex)
        return ParsedInstruction(parsed.tuples, ParseSource.LLM_FALLBACK)
