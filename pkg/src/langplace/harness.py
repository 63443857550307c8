"""Synthetic dataset generation, success-rate evaluation and the eval loop."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from langplace.adapter import AdapterPair, TrainSample
from langplace.core import (
    AABB, CanonicalRelation, GroundedPair, OBJECT_DIRS, Scene, SceneObject, TABLE_REGIONS,
    Tuple, Vec2, Workspace, load_scene, save_scene,
)
from langplace.embeddings import load_vocabulary, tokenize_scene
from langplace.grounding import ground_all
from langplace.parser import Lexicon, ParseFailure, parse
from langplace.placement import InfeasiblePlacement, PlacementParams, build_field, normalize_and_sample

log = logging.getLogger(__name__)

LEVELS = ("table", "1obj", "2obj")
SPLITS = ("train", "test_seen", "test_unseen_obj", "test_unseen_inst")
FAILURE_REASONS = ("wrong_region", "too_close", "too_far", "wrong_direction", "collision",
                   "grounding_error", "parse_error")

DEFAULT_COUNTS = {
    "train": (450, 450, 1100),
    "test_seen": (90, 90, 220),
    "test_unseen_obj": (90, 90, 220),
    "test_unseen_inst": (90, 90, 220),
}


class GenerationError(RuntimeError):
    pass


def level_counts(total: int, ratio=(9, 9, 22)) -> tuple[int, int, int]:
    """Split ``total`` records over the three levels at ``ratio`` (largest remainder)."""
    s = sum(ratio)
    raw = [total * r / s for r in ratio]
    counts = [int(math.floor(x)) for x in raw]
    for k in sorted(range(3), key=lambda k: counts[k] - raw[k])[: total - sum(counts)]:
        counts[k] += 1
    return tuple(counts)


@dataclass
class DatasetRecord:
    id: int
    scene: Scene
    instruction: str
    gt_tuples: list[Tuple]
    gt_labels: list[int]
    gt_relations: list[CanonicalRelation]
    level: str
    split: str

    def __post_init__(self):
        if not len(self.gt_tuples) == len(self.gt_labels) == len(self.gt_relations):
            raise ValueError("tuples, labels and relations must line up")
        if self.level not in LEVELS or self.split not in SPLITS:
            raise ValueError(f"bad level/split {self.level}/{self.split}")

    @property
    def gt_pairs(self) -> list[GroundedPair]:
        return [GroundedPair(n, r) for n, r in zip(self.gt_labels, self.gt_relations)]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "instruction": self.instruction,
            "gt_tuples": [[t.ref_expr, t.rel_expr] for t in self.gt_tuples],
            "gt_labels": self.gt_labels,
            "gt_relations": [r.value for r in self.gt_relations],
            "level": self.level,
            "split": self.split,
        }

    def train_sample(self) -> TrainSample:
        return TrainSample(self.scene, self.gt_tuples, self.gt_labels)


@dataclass
class DatasetSpec:
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    seed: int = 0
    vocabulary: Optional[dict] = None
    n_objects: int = 5
    size_range: tuple[float, float] = (0.04, 0.12)
    workspace: Workspace = field(default_factory=Workspace)


def _random_scene(rng: np.random.Generator, names: Sequence[str], rid: int, spec: DatasetSpec) -> Scene:
    ws = spec.workspace
    lo, hi = spec.size_range
    chosen = rng.choice(len(names), size=spec.n_objects, replace=False)
    boxes: list[AABB] = []
    for _ in range(spec.n_objects):
        for _attempt in range(500):
            w, h = rng.uniform(lo, hi, size=2)
            cx = rng.uniform(-ws.width / 2 + w / 2, ws.width / 2 - w / 2)
            cy = rng.uniform(-ws.height / 2 + h / 2, ws.height / 2 - h / 2)
            box = AABB.from_bounds(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            if not any(box.overlaps(b) for b in boxes):
                boxes.append(box)
                break
        else:
            raise GenerationError(f"could not pack {spec.n_objects} objects into the workspace")
    objects = [SceneObject(k, names[int(c)], b, f"s{rid:05d}/o{k}") for k, (c, b) in enumerate(zip(chosen, boxes))]
    return Scene(ws, objects, f"s{rid:05d}/workspace")


def render_instruction(pairs: Sequence[tuple[str, CanonicalRelation]], lex: Lexicon, unseen: bool,
                       rng: np.random.Generator) -> str:
    split = "unseen" if unseen else "seen"
    parts = []
    for name, rel in pairs:
        exprs = lex.expressions(rel, split) or lex.expressions(rel)
        parts.append(f"{exprs[int(rng.integers(len(exprs)))]} the {name}")
    if unseen:
        lead = " ".join(lst[int(rng.integers(len(lst)))]
                        for lst in (lex.prefix_list, lex.verb_list, lex.pronoun_list))
    else:
        lead = "put it"
    return f"{lead} {' and '.join(parts)}."


def gen_instruction(scene: Scene, level: str, lex: Lexicon, rng: np.random.Generator, unseen: bool = False):
    """Random (instruction, tuples, labels, relations) for ``scene`` at ``level``."""
    if level == "table":
        rel = TABLE_REGIONS[int(rng.integers(len(TABLE_REGIONS)))]
        refs = [(scene.n_objects, "table", rel)]
    else:
        k = 1 if level == "1obj" else 2
        idx = rng.choice(scene.n_objects, size=k, replace=False)
        refs = [(int(i), scene.objects[int(i)].name, OBJECT_DIRS[int(rng.integers(len(OBJECT_DIRS)))])
                for i in idx]
    text = render_instruction([(name, rel) for _, name, rel in refs], lex, unseen, rng)
    tuples = [Tuple(name, rel.value) for _, name, rel in refs]
    return text, tuples, [n for n, _, _ in refs], [rel for _, _, rel in refs]


def gen_record(rid: int, split: str, level: str, spec: DatasetSpec, lex: Lexicon,
               params: PlacementParams, max_tries: int = 200) -> DatasetRecord:
    vocab = spec.vocabulary or load_vocabulary()
    names = vocab["unseen"] if split == "test_unseen_obj" else vocab["seen"]
    rng = np.random.default_rng([spec.seed, rid])
    for _ in range(max_tries):
        scene = _random_scene(rng, names, rid, spec)
        for _inst in range(20):
            text, tuples, labels, rels = gen_instruction(scene, level, lex, rng, unseen=split == "test_unseen_inst")
            record = DatasetRecord(rid, scene, text, tuples, labels, rels, level, split)
            if admits_success(record, params, rng):
                return record
    raise GenerationError(f"record {rid}: no feasible {level} instruction after {max_tries} scenes")


def admits_success(record: DatasetRecord, params: PlacementParams, rng) -> bool:
    try:
        f = build_field(record.gt_pairs, record.scene, params)
    except InfeasiblePlacement:
        return False
    x = normalize_and_sample(f, rng)
    return evaluate_placement(x, record, params).success


def gen_dataset(spec: Optional[DatasetSpec] = None, lex: Optional[Lexicon] = None,
                params: PlacementParams = PlacementParams()) -> list[DatasetRecord]:
    """Records for every split in ``spec.counts`` (split -> (table, 1obj, 2obj) counts).

    Each record is seeded from ``(spec.seed, record id)`` alone, so records do
    not depend on the ones generated before them.
    """
    spec = spec or DatasetSpec()
    lex = lex or Lexicon.default()
    records = []
    rid = 0
    for split in SPLITS:
        if split not in spec.counts:
            continue
        for level, n in zip(LEVELS, spec.counts[split]):
            for _ in range(n):
                records.append(gen_record(rid, split, level, spec, lex, params))
                rid += 1
    return records


# -- evaluation ---------------------------------------------------------------
# Deliberately independent of the placement module: its own geometry, its own
# direction table, angle tests via atan2 instead of dot products.

_REGION_CELL = {
    "left part": (0, 1), "right part": (2, 1), "top part": (1, 2), "bottom part": (1, 0),
    "middle": (1, 1), "top left corner": (0, 2), "top right corner": (2, 2),
    "bottom left corner": (0, 0), "bottom right corner": (2, 0),
}
_HEADING_DEG = {
    "right": 0.0, "behind right": 45.0, "behind": 90.0, "behind left": 135.0,
    "left": 180.0, "front left": -135.0, "front": -90.0, "front right": -45.0,
}


def _point_box_distance(x: float, y: float, box: AABB) -> float:
    cx = min(max(x, box.min.x), box.max.x)
    cy = min(max(y, box.min.y), box.max.y)
    return math.sqrt((x - cx) ** 2 + (y - cy) ** 2)


@dataclass(frozen=True)
class EvalOutcome:
    success: bool
    reason: Optional[str] = None


def evaluate_placement(x: Vec2, record: DatasetRecord, params: PlacementParams = PlacementParams()) -> EvalOutcome:
    """Check ``x`` against every ground-truth constraint and for collisions.

    The first violated predicate names the failure.
    """
    ws = record.scene.workspace
    if not (abs(x.x) <= ws.width / 2 and abs(x.y) <= ws.height / 2):
        return EvalOutcome(False, "wrong_region")
    for label, rel in zip(record.gt_labels, record.gt_relations):
        if rel.value in _REGION_CELL:
            col, row = _REGION_CELL[rel.value]
            left = -ws.width / 2 + col * ws.width / 3
            bottom = -ws.height / 2 + row * ws.height / 3
            e = 1e-9  # edges computed by accumulation can be off by an ulp
            if not (left - e <= x.x <= left + ws.width / 3 + e and bottom - e <= x.y <= bottom + ws.height / 3 + e):
                return EvalOutcome(False, "wrong_region")
            continue
        box = record.scene.objects[label].aabb
        d = _point_box_distance(x.x, x.y, box)
        if d < params.d_min:
            return EvalOutcome(False, "too_close")
        if d > params.d_max:
            return EvalOutcome(False, "too_far")
        c = box.center
        heading = math.degrees(math.atan2(x.y - c.y, x.x - c.x))
        off = abs((heading - _HEADING_DEG[rel.value] + 180.0) % 360.0 - 180.0)
        if off > params.cone_half_angle + 1e-9:
            return EvalOutcome(False, "wrong_direction")
    for o in record.scene.objects:
        if _point_box_distance(x.x, x.y, o.aabb) < params.placed_radius:
            return EvalOutcome(False, "collision")
    return EvalOutcome(True)


@dataclass
class EvalReport:
    counts: dict
    successes: dict
    failures: dict
    grounding_correct: int = 0
    grounding_total: int = 0

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def rate(self, level: str) -> float:
        c = self.counts.get(level, 0)
        return self.successes.get(level, 0) / c if c else float("nan")

    @property
    def overall(self) -> float:
        return sum(self.successes.values()) / self.n if self.n else float("nan")

    @property
    def grounding_accuracy(self) -> float:
        return self.grounding_correct / self.grounding_total if self.grounding_total else float("nan")

    def to_json(self) -> dict:
        def r(v):
            return None if isinstance(v, float) and math.isnan(v) else round(v, 6)
        return {
            "levels": {lv: {"count": self.counts.get(lv, 0), "success": self.successes.get(lv, 0),
                            "rate": r(self.rate(lv))} for lv in LEVELS},
            "overall": r(self.overall),
            "count": self.n,
            "failures": {k: self.failures.get(k, 0) for k in FAILURE_REASONS},
            "grounding_accuracy": r(self.grounding_accuracy),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self) -> list[list]:
        rows = [["level", "count", "success", "rate"]]
        for lv in LEVELS:
            rows.append([lv, self.counts.get(lv, 0), self.successes.get(lv, 0), f"{self.rate(lv):.4f}"])
        rows.append(["overall", self.n, sum(self.successes.values()), f"{self.overall:.4f}"])
        return rows


@dataclass(frozen=True)
class RecordResult:
    level: str
    success: bool
    reason: Optional[str]
    grounding_correct: int
    grounding_total: int
    placement: Optional[Vec2] = None


def run_record(record: DatasetRecord, index: int, seed: int, pair: Optional[AdapterPair], provider,
               lex: Lexicon, params: PlacementParams, oracle: bool = False, llm=None) -> RecordResult:
    rng = np.random.default_rng([seed, index])
    n_gt = len(record.gt_labels)
    if oracle:
        pairs = record.gt_pairs
    else:
        try:
            parsed = parse(record.instruction, lex, llm)
        except ParseFailure:
            return RecordResult(record.level, False, "parse_error", 0, n_gt)
        if len(parsed.tuples) != n_gt:
            return RecordResult(record.level, False, "parse_error", 0, n_gt)
        pairs = ground_all(record.scene, parsed, pair, provider, lex)
    correct = sum(int(p.object_index == y and p.relation is r)
                  for p, y, r in zip(pairs, record.gt_labels, record.gt_relations))
    try:
        f = build_field(pairs, record.scene, params)
    except InfeasiblePlacement:
        reason = "grounding_error" if correct < n_gt else "collision"
        return RecordResult(record.level, False, reason, correct, n_gt)
    x = normalize_and_sample(f, rng)
    outcome = evaluate_placement(x, record, params)
    reason = outcome.reason
    if not outcome.success and correct < n_gt:
        reason = "grounding_error"
    return RecordResult(record.level, outcome.success, reason, correct, n_gt, x)


def run_eval(records: Sequence[DatasetRecord], pair: Optional[AdapterPair], provider, lex: Lexicon,
             params: PlacementParams = PlacementParams(), seed: int = 0, oracle: bool = False,
             llm=None, workers: int = 1) -> EvalReport:
    """Run the full pipeline on every record; errors count as failures, never abort."""
    def one(args):
        i, rec = args
        try:
            return run_record(rec, i, seed, pair, provider, lex, params, oracle, llm)
        except Exception as exc:  # noqa: BLE001 - a broken record is a failed record
            log.warning("record %d failed: %s", rec.id, exc)
            return RecordResult(rec.level, False, "grounding_error", 0, len(rec.gt_labels))

    items = list(enumerate(records))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, items))
    else:
        results = [one(it) for it in items]

    counts = {lv: 0 for lv in LEVELS}
    successes = {lv: 0 for lv in LEVELS}
    failures = {k: 0 for k in FAILURE_REASONS}
    report = EvalReport(counts, successes, failures)
    for res in results:
        counts[res.level] += 1
        if res.success:
            successes[res.level] += 1
        else:
            failures[res.reason] += 1
        report.grounding_correct += res.grounding_correct
        report.grounding_total += res.grounding_total
    return report


# -- dataset directory --------------------------------------------------------

def write_dataset(records: Iterable[DatasetRecord], root) -> None:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    with open(root / "instructions.jsonl", "w") as fh:
        for rec in records:
            save_scene(rec.scene, root / "scenes" / f"{rec.id:05d}.json")
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_dataset(root, splits: Optional[Sequence[str]] = None) -> list[DatasetRecord]:
    root = Path(root)
    records = []
    with open(root / "instructions.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            if splits and doc["split"] not in splits:
                continue
            scene = load_scene(root / "scenes" / f"{doc['id']:05d}.json")
            records.append(DatasetRecord(
                doc["id"], scene, doc["instruction"],
                [Tuple(ref, rel) for ref, rel in doc["gt_tuples"]],
                list(doc["gt_labels"]),
                [CanonicalRelation.parse(r) for r in doc["gt_relations"]],
                doc["level"], doc["split"],
            ))
    return records


def tokens_for(records: Sequence[DatasetRecord], provider) -> list:
    return [tokenize_scene(provider, r.scene, r.gt_tuples) for r in records]
