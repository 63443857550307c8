"""Geometry, scene model, relation vocabulary and raster helpers.

Frame convention: the workspace is viewed top-down with its origin at the
table center, +x to the right and +y away from the viewer.  "top"/"behind"
therefore mean +y and "bottom"/"front" mean -y.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def __iter__(self):
        yield self.x
        yield self.y


@dataclass(frozen=True)
class AABB:
    min: Vec2
    max: Vec2

    def __post_init__(self):
        if self.min.x > self.max.x or self.min.y > self.max.y:
            raise GeometryError(f"inverted box {self.min} .. {self.max}")

    @classmethod
    def from_bounds(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "AABB":
        return cls(Vec2(xmin, ymin), Vec2(xmax, ymax))

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.min.x, self.min.y, self.max.x, self.max.y)

    @property
    def center(self) -> Vec2:
        return Vec2((self.min.x + self.max.x) / 2, (self.min.y + self.max.y) / 2)

    @property
    def width(self) -> float:
        return self.max.x - self.min.x

    @property
    def height(self) -> float:
        return self.max.y - self.min.y

    def contains(self, p: Vec2) -> bool:
        return self.min.x <= p.x <= self.max.x and self.min.y <= p.y <= self.max.y

    def overlaps(self, other: "AABB") -> bool:
        """Interior overlap; boxes that only touch do not overlap."""
        return (self.min.x < other.max.x and other.min.x < self.max.x
                and self.min.y < other.max.y and other.min.y < self.max.y)


@dataclass(frozen=True)
class Workspace:
    width: float = 1.0
    height: float = 0.6

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("workspace extent must be positive")

    @property
    def aabb(self) -> AABB:
        return AABB.from_bounds(-self.width / 2, -self.height / 2, self.width / 2, self.height / 2)


class RelationFamily(str, Enum):
    TABLE_REGION = "table_region"
    OBJECT_DIR = "object_dir"


class CanonicalRelation(str, Enum):
    # table regions
    LEFT_PART = "left part"
    RIGHT_PART = "right part"
    TOP_PART = "top part"
    BOTTOM_PART = "bottom part"
    MIDDLE = "middle"
    TOP_LEFT_CORNER = "top left corner"
    TOP_RIGHT_CORNER = "top right corner"
    BOTTOM_LEFT_CORNER = "bottom left corner"
    BOTTOM_RIGHT_CORNER = "bottom right corner"
    # directions relative to an object
    LEFT = "left"
    RIGHT = "right"
    FRONT = "front"
    BEHIND = "behind"
    FRONT_LEFT = "front left"
    FRONT_RIGHT = "front right"
    BEHIND_LEFT = "behind left"
    BEHIND_RIGHT = "behind right"

    @property
    def family(self) -> RelationFamily:
        if self in _REGION_CELLS:
            return RelationFamily.TABLE_REGION
        return RelationFamily.OBJECT_DIR

    @property
    def is_region(self) -> bool:
        return self.family is RelationFamily.TABLE_REGION

    @classmethod
    def parse(cls, name: str) -> "CanonicalRelation":
        return cls(" ".join(name.lower().split()))


# (column, row) in the 3x3 partition; column 0 = left, row 0 = bottom
_REGION_CELLS = {
    CanonicalRelation.LEFT_PART: (0, 1),
    CanonicalRelation.RIGHT_PART: (2, 1),
    CanonicalRelation.TOP_PART: (1, 2),
    CanonicalRelation.BOTTOM_PART: (1, 0),
    CanonicalRelation.MIDDLE: (1, 1),
    CanonicalRelation.TOP_LEFT_CORNER: (0, 2),
    CanonicalRelation.TOP_RIGHT_CORNER: (2, 2),
    CanonicalRelation.BOTTOM_LEFT_CORNER: (0, 0),
    CanonicalRelation.BOTTOM_RIGHT_CORNER: (2, 0),
}

_DIRECTIONS = {
    CanonicalRelation.LEFT: (-1, 0),
    CanonicalRelation.RIGHT: (1, 0),
    CanonicalRelation.FRONT: (0, -1),
    CanonicalRelation.BEHIND: (0, 1),
    CanonicalRelation.FRONT_LEFT: (-1, -1),
    CanonicalRelation.FRONT_RIGHT: (1, -1),
    CanonicalRelation.BEHIND_LEFT: (-1, 1),
    CanonicalRelation.BEHIND_RIGHT: (1, 1),
}

TABLE_REGIONS = tuple(r for r in CanonicalRelation if r in _REGION_CELLS)
OBJECT_DIRS = tuple(r for r in CanonicalRelation if r in _DIRECTIONS)


def relations_of(family: RelationFamily) -> tuple[CanonicalRelation, ...]:
    return TABLE_REGIONS if family is RelationFamily.TABLE_REGION else OBJECT_DIRS


@dataclass(frozen=True)
class Tuple:
    """A raw (reference, relation) pair as produced by a parser.

    ``canonical`` is False when ``rel_expr`` could not be mapped onto the
    relation vocabulary and has to go through similarity fallback.
    """
    ref_expr: str
    rel_expr: str
    canonical: bool = True

    def __post_init__(self):
        if not self.ref_expr.strip() or not self.rel_expr.strip():
            raise ValueError("tuple fields must be non-empty")

    def render(self) -> str:
        return f"{self.rel_expr} {self.ref_expr}"


@dataclass(frozen=True)
class GroundedPair:
    object_index: int
    relation: CanonicalRelation


@dataclass(frozen=True)
class SceneObject:
    id: int
    name: str
    aabb: AABB
    crop_key: str
    raster_bbox: Optional[tuple[int, int, int, int]] = None


@dataclass
class Raster:
    """8-bit RGB image with a pixel <-> meter mapping.

    Pixel (u, v) has u growing rightwards and v growing downwards; the table
    origin sits at pixel ``origin_px``.
    """
    pixels: np.ndarray
    meters_per_pixel: float
    origin_px: tuple[float, float]
    path: Optional[str] = None

    def to_pixel(self, p: Vec2) -> tuple[float, float]:
        u0, v0 = self.origin_px
        return (u0 + p.x / self.meters_per_pixel, v0 - p.y / self.meters_per_pixel)

    def bbox_for(self, box: AABB) -> tuple[int, int, int, int]:
        """Pixel rectangle (u0, v0, u1, v1) covering ``box``, clipped to the image."""
        ua, vb = self.to_pixel(box.min)
        ub, va = self.to_pixel(box.max)
        h, w = self.pixels.shape[:2]
        u0 = max(0, int(math.floor(ua)))
        v0 = max(0, int(math.floor(va)))
        u1 = min(w, int(math.ceil(ub)))
        v1 = min(h, int(math.ceil(vb)))
        return (u0, v0, max(u1, u0 + 1), max(v1, v0 + 1))


@dataclass
class Scene:
    workspace: Workspace
    objects: list[SceneObject] = field(default_factory=list)
    workspace_crop_key: str = "workspace"
    raster: Optional[Raster] = None

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise SceneError(f"duplicate object ids in {ids}")
        ws = self.workspace.aabb
        for o in self.objects:
            if not (ws.contains(o.aabb.min) and ws.contains(o.aabb.max)):
                raise SceneError(f"object {o.id} ({o.name}) leaves the workspace")
        self.objects = sorted(self.objects, key=lambda o: o.id)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_tokens(self) -> int:
        return len(self.objects) + 1

    def crop_key(self, index: int) -> str:
        if index == len(self.objects):
            return self.workspace_crop_key
        return self.objects[index].crop_key

    def to_json(self) -> dict:
        doc = {
            "workspace": {"width": self.workspace.width, "height": self.workspace.height},
            "workspace_crop_key": self.workspace_crop_key,
            "objects": [
                {"id": o.id, "name": o.name, "aabb": list(o.aabb.bounds), "crop_key": o.crop_key}
                for o in self.objects
            ],
        }
        if self.raster is not None:
            doc["raster"] = {
                "path": self.raster.path,
                "meters_per_pixel": self.raster.meters_per_pixel,
                "origin_px": list(self.raster.origin_px),
            }
        return doc

    @classmethod
    def from_json(cls, doc: dict, base_dir: Optional[Path] = None) -> "Scene":
        try:
            ws = Workspace(**doc.get("workspace", {}))
            objects = [
                SceneObject(
                    id=int(o["id"]),
                    name=str(o["name"]),
                    aabb=AABB.from_bounds(*map(float, o["aabb"])),
                    crop_key=str(o.get("crop_key", f"object{o['id']}")),
                )
                for o in doc.get("objects", [])
            ]
        except (KeyError, TypeError) as exc:
            raise SceneError(f"malformed scene document: {exc}") from exc
        raster = None
        if doc.get("raster"):
            r = doc["raster"]
            path = Path(r["path"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            raster = Raster(read_ppm(path), float(r["meters_per_pixel"]),
                            tuple(r["origin_px"]), path=r["path"])
        scene = cls(ws, objects, doc.get("workspace_crop_key", "workspace"), raster)
        if raster is not None:
            scene.objects = [
                SceneObject(o.id, o.name, o.aabb, o.crop_key, raster.bbox_for(o.aabb))
                for o in scene.objects
            ]
        return scene


def load_scene(path) -> Scene:
    path = Path(path)
    return Scene.from_json(json.loads(path.read_text()), base_dir=path.parent)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_json(), indent=2) + "\n")


def aabb_distance(p: Vec2, b: AABB) -> float:
    """Euclidean distance from ``p`` to the closest point of ``b`` (0 inside)."""
    dx = max(b.min.x - p.x, 0.0, p.x - b.max.x)
    dy = max(b.min.y - p.y, 0.0, p.y - b.max.y)
    return math.hypot(dx, dy)


def direction_vector(r: CanonicalRelation) -> Vec2:
    if r not in _DIRECTIONS:
        raise ValueError(f"{r.value!r} is a table region, not a direction")
    dx, dy = _DIRECTIONS[r]
    n = math.hypot(dx, dy)
    return Vec2(dx / n, dy / n)


def region_bounds(r: CanonicalRelation, w: Workspace) -> AABB:
    """Cell of the uniform 3x3 partition of ``w`` named by ``r``."""
    if r not in _REGION_CELLS:
        raise ValueError(f"{r.value!r} is a direction, not a table region")
    col, row = _REGION_CELLS[r]
    x0, y0 = -w.width / 2, -w.height / 2
    cw, ch = w.width / 3, w.height / 3
    # outer edges come straight from the workspace so the cells tile it exactly
    xs = (x0, x0 + cw, x0 + 2 * cw, w.width / 2)
    ys = (y0, y0 + ch, y0 + 2 * ch, w.height / 2)
    return AABB.from_bounds(xs[col], ys[row], xs[col + 1], ys[row + 1])


def crop_raster(img: np.ndarray, bbox: Sequence[int]) -> np.ndarray:
    """Copy of the pixel rectangle ``bbox = (u0, v0, u1, v1)``, end-exclusive."""
    u0, v0, u1, v1 = (int(b) for b in bbox)
    h, w = img.shape[:2]
    if not (0 <= u0 < u1 <= w and 0 <= v0 < v1 <= h):
        raise GeometryError(f"crop {tuple(bbox)} outside {w}x{h} image")
    return img[v0:v1, u0:u1].copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("expected an HxWx3 uint8 array")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pos += 1
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
