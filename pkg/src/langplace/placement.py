"""Placement distributions over a discretized workspace.

Every grounded pair contributes a Gaussian truncated to the cells that lie
*entirely* inside its constraint set, so any point sampled inside a cell with
positive mass satisfies the constraint.  Several pairs are combined by
averaging the densities and intersecting the masks, collisions are masked
out, and a placement is drawn by inverse CDF over cells plus uniform jitter
inside the chosen cell.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from langplace.core import (
    AABB, GroundedPair, Scene, Vec2, Workspace, direction_vector, region_bounds, write_ppm,
)


EDGE_SLACK = 1e-9  # meters


class InfeasiblePlacement(ValueError):
    pass


@dataclass(frozen=True)
class PlacementParams:
    resolution: float = 0.01
    d_min: float = 0.1
    d_max: float = 0.3
    cone_half_angle: float = 45.0
    object_sigma: float = 0.05
    object_offset: float = 0.2
    placed_radius: float = 0.03

    def __post_init__(self):
        if not 0 <= self.d_min < self.d_max:
            raise ValueError("need 0 <= d_min < d_max")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "PlacementParams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass(frozen=True)
class ConstraintPredicate:
    kind: str  # "table_region" | "object_relation"
    box: AABB  # region cell, or the reference object's box
    direction: Optional[Vec2] = None
    d_min: float = 0.1
    d_max: float = 0.3
    cone_half_angle: float = 45.0

    def __post_init__(self):
        if self.kind not in ("table_region", "object_relation"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "object_relation" and (self.direction is None or not self.d_min < self.d_max):
            raise ValueError("object relations need a direction and d_min < d_max")

    def holds(self, xs, ys) -> np.ndarray:
        """Point-wise predicate on arrays of coordinates."""
        xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
        x0, y0, x1, y1 = self.box.bounds
        if self.kind == "table_region":
            return (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
        d = _box_distance(xs, ys, self.box)
        return (d >= self.d_min) & (d <= self.d_max) & self._in_cone(xs, ys)

    def _in_cone(self, xs, ys) -> np.ndarray:
        c = self.box.center
        rx, ry = xs - c.x, ys - c.y
        cos_lim = math.cos(math.radians(self.cone_half_angle))
        return rx * self.direction.x + ry * self.direction.y >= cos_lim * np.hypot(rx, ry)

    def holds_on_cells(self, xl, xr, yb, yt) -> np.ndarray:
        """True where the whole cell rectangle satisfies the predicate."""
        x0, y0, x1, y1 = self.box.bounds
        if self.kind == "table_region":
            # grid edges and region edges are computed separately; absorb the rounding
            e = EDGE_SLACK
            return (xl >= x0 - e) & (xr <= x1 + e) & (yb >= y0 - e) & (yt <= y1 + e)
        near = _rect_distance(xl, xr, yb, yt, self.box)
        ok = near >= self.d_min
        # distance-to-box is convex, so its maximum over a rectangle sits on a corner;
        # the cone is convex as well, so checking the four corners is exact
        for cx, cy in ((xl, yb), (xl, yt), (xr, yb), (xr, yt)):
            ok &= _box_distance(cx, cy, self.box) <= self.d_max
            ok &= self._in_cone(cx, cy)
        return ok

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "box": list(self.box.bounds)}
        if self.kind == "object_relation":
            doc.update(direction=[self.direction.x, self.direction.y], d_min=self.d_min,
                       d_max=self.d_max, cone_half_angle=self.cone_half_angle)
        return doc


def _box_distance(xs, ys, box: AABB):
    dx = np.maximum(np.maximum(box.min.x - xs, 0.0), xs - box.max.x)
    dy = np.maximum(np.maximum(box.min.y - ys, 0.0), ys - box.max.y)
    return np.hypot(dx, dy)


def _rect_distance(xl, xr, yb, yt, box: AABB):
    dx = np.maximum(np.maximum(box.min.x - xr, 0.0), xl - box.max.x)
    dy = np.maximum(np.maximum(box.min.y - yt, 0.0), yb - box.max.y)
    return np.hypot(dx, dy)


@dataclass
class Grid:
    workspace: Workspace
    resolution: float

    def __post_init__(self):
        w, h = self.workspace.width, self.workspace.height
        self.nx = max(1, int(math.ceil(w / self.resolution - 1e-9)))
        self.ny = max(1, int(math.ceil(h / self.resolution - 1e-9)))
        self.x_edges = np.linspace(-w / 2, w / 2, self.nx + 1)
        self.y_edges = np.linspace(-h / 2, h / 2, self.ny + 1)
        self.dx = w / self.nx
        self.dy = h / self.ny
        xc = (self.x_edges[:-1] + self.x_edges[1:]) / 2
        yc = (self.y_edges[:-1] + self.y_edges[1:]) / 2
        # row j is y-index (row 0 at the front edge), column i is x-index
        self.xc, self.yc = np.meshgrid(xc, yc)
        self.xl, self.yb = np.meshgrid(self.x_edges[:-1], self.y_edges[:-1])
        self.xr, self.yt = np.meshgrid(self.x_edges[1:], self.y_edges[1:])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def cell_of(self, p: Vec2) -> tuple[int, int]:
        i = int(np.clip(np.searchsorted(self.x_edges, p.x, side="right") - 1, 0, self.nx - 1))
        j = int(np.clip(np.searchsorted(self.y_edges, p.y, side="right") - 1, 0, self.ny - 1))
        return j, i


_GRIDS: dict = {}


def grid_for(workspace: Workspace, resolution: float) -> Grid:
    key = (workspace.width, workspace.height, resolution)
    if key not in _GRIDS:
        _GRIDS[key] = Grid(workspace, resolution)
    return _GRIDS[key]


@dataclass
class PlacementField:
    workspace: Workspace
    resolution: float
    probs: np.ndarray
    mask: np.ndarray
    constraints: list[ConstraintPredicate] = field(default_factory=list)

    @property
    def grid(self) -> Grid:
        return grid_for(self.workspace, self.resolution)

    def copy(self) -> "PlacementField":
        return PlacementField(self.workspace, self.resolution, self.probs.copy(), self.mask.copy(),
                              list(self.constraints))

    def to_json(self) -> dict:
        ny, nx = self.probs.shape
        return {
            "resolution": self.resolution,
            "width_cells": nx,
            "height_cells": ny,
            "probs": [float(p) for p in self.probs.ravel()],
            "mask": [bool(m) for m in self.mask.ravel()],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def _gaussian_mass(grid: Grid, mean: Vec2, sx: float, sy: float) -> np.ndarray:
    z = ((grid.xc - mean.x) / sx) ** 2 + ((grid.yc - mean.y) / sy) ** 2
    return np.exp(-0.5 * z) * (grid.dx * grid.dy / (2 * math.pi * sx * sy))


def exit_point(box: AABB, d: Vec2) -> Vec2:
    """Where the ray from the box center along ``d`` leaves the box."""
    c = box.center
    hx, hy = box.width / 2, box.height / 2
    t = min(hx / abs(d.x) if d.x else math.inf, hy / abs(d.y) if d.y else math.inf)
    return Vec2(c.x + t * d.x, c.y + t * d.y)


def object_mean(box: AABB, d: Vec2, offset: float) -> Vec2:
    """Gaussian mean for a directional relation: ``offset`` beyond where ``d`` exits the box."""
    edge = exit_point(box, d)
    return Vec2(edge.x + offset * d.x, edge.y + offset * d.y)


def constraint_for(g: GroundedPair, scene: Scene, params: PlacementParams = PlacementParams()) -> ConstraintPredicate:
    if g.relation.is_region:
        return ConstraintPredicate("table_region", region_bounds(g.relation, scene.workspace))
    if not 0 <= g.object_index < scene.n_objects:
        raise IndexError(f"reference {g.object_index} is not an object of this scene "
                         f"({scene.n_objects} objects)")
    return ConstraintPredicate("object_relation", scene.objects[g.object_index].aabb,
                               direction_vector(g.relation), params.d_min, params.d_max,
                               params.cone_half_angle)


def field_for_pair(g: GroundedPair, scene: Scene, params: PlacementParams = PlacementParams()) -> PlacementField:
    """Truncated Gaussian for one grounded pair (before normalization and collision masking)."""
    grid = grid_for(scene.workspace, params.resolution)
    if g.relation.is_region and g.object_index != scene.n_objects:
        raise IndexError(f"table regions must reference the workspace token {scene.n_objects}")
    pred = constraint_for(g, scene, params)
    if pred.kind == "table_region":
        cell = pred.box
        mass = _gaussian_mass(grid, cell.center, cell.width / 4, cell.height / 4)
    else:
        mean = object_mean(pred.box, pred.direction, params.object_offset)
        mass = _gaussian_mass(grid, mean, params.object_sigma, params.object_sigma)
    mask = pred.holds_on_cells(grid.xl, grid.xr, grid.yb, grid.yt)
    return PlacementField(scene.workspace, params.resolution, np.where(mask, mass, 0.0), mask, [pred])


def compose_fields(fields_: Sequence[PlacementField]) -> PlacementField:
    if not fields_:
        raise ValueError("nothing to compose")
    first = fields_[0]
    for f in fields_[1:]:
        if f.workspace != first.workspace or f.resolution != first.resolution:
            raise ValueError("fields live on different grids")
    probs = np.mean([f.probs for f in fields_], axis=0)
    mask = np.logical_and.reduce([f.mask for f in fields_])
    constraints = [c for f in fields_ for c in f.constraints]
    return PlacementField(first.workspace, first.resolution, np.where(mask, probs, 0.0), mask, constraints)


def apply_collision_mask(f: PlacementField, scene: Scene, placed_radius: float = 0.03) -> PlacementField:
    """Mask cells that come within ``placed_radius`` of any object, or leave the workspace."""
    grid = f.grid
    ws = f.workspace.aabb
    mask = f.mask & (grid.xl >= ws.min.x) & (grid.xr <= ws.max.x) & (grid.yb >= ws.min.y) & (grid.yt <= ws.max.y)
    for o in scene.objects:
        mask &= _rect_distance(grid.xl, grid.xr, grid.yb, grid.yt, o.aabb) >= placed_radius
    return PlacementField(f.workspace, f.resolution, np.where(mask, f.probs, 0.0), mask, list(f.constraints))


def normalize(f: PlacementField) -> PlacementField:
    total = float(f.probs.sum())
    if not f.mask.any() or not total > 0:
        raise InfeasiblePlacement("no feasible cell carries probability mass")
    return PlacementField(f.workspace, f.resolution, f.probs / total, f.mask.copy(), list(f.constraints))


def sample_points(f: PlacementField, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` placements as an (n, 2) array; the field must already be normalized."""
    grid = f.grid
    flat = f.probs.ravel()
    cdf = np.cumsum(flat)
    u = rng.random(n) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, len(flat) - 1)
    j, i = np.divmod(idx, grid.nx)
    x = grid.x_edges[i] + rng.random(n) * grid.dx
    y = grid.y_edges[j] + rng.random(n) * grid.dy
    return np.column_stack([x, y])


def normalize_and_sample(f: PlacementField, seed) -> Vec2:
    f = normalize(f)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x, y = sample_points(f, 1, rng)[0]
    return Vec2(float(x), float(y))


def build_field(pairs: Sequence[GroundedPair], scene: Scene,
                params: PlacementParams = PlacementParams()) -> PlacementField:
    """Compose, collision-mask and normalize the fields of all grounded pairs."""
    composed = compose_fields([field_for_pair(g, scene, params) for g in pairs])
    return normalize(apply_collision_mask(composed, scene, params.placed_radius))


# -- rendering ----------------------------------------------------------------

OUTLINE = (200, 30, 30)


def field_gray(f: PlacementField) -> np.ndarray:
    """Gray levels per cell, front row first; darker means more probable, zero mass is white."""
    peak = float(f.probs.max())
    if peak <= 0:
        return np.full(f.probs.shape, 255, dtype=np.uint8)
    gray = 255.0 - 200.0 * (f.probs / peak)
    gray = np.where(f.probs > 0, gray, 255.0)
    return np.rint(gray).astype(np.uint8)


def _outline_boxes(scene: Scene, grid: Grid, scale: int):
    for o in scene.objects:
        j0, i0 = grid.cell_of(o.aabb.min)
        j1, i1 = grid.cell_of(o.aabb.max)
        yield o, i0 * scale, (grid.ny - 1 - j1) * scale, (i1 + 1) * scale - 1, (grid.ny - j0) * scale - 1


def render_pixels(f: PlacementField, scene: Optional[Scene] = None, scale: int = 4) -> np.ndarray:
    gray = field_gray(f)[::-1]  # image rows run top (+y) to bottom
    img = np.repeat(np.repeat(gray, scale, axis=0), scale, axis=1)
    img = np.stack([img] * 3, axis=-1)
    if scene is not None:
        for _, u0, v0, u1, v1 in _outline_boxes(scene, f.grid, scale):
            img[v0, u0:u1 + 1] = OUTLINE
            img[v1, u0:u1 + 1] = OUTLINE
            img[v0:v1 + 1, u0] = OUTLINE
            img[v0:v1 + 1, u1] = OUTLINE
    return img


def render_svg(f: PlacementField, scene: Optional[Scene] = None, scale: int = 4) -> str:
    grid = f.grid
    gray = field_gray(f)
    w, h = grid.nx * scale, grid.ny * scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect x="0" y="0" width="{w}" height="{h}" fill="rgb(255,255,255)"/>']
    for j, i in zip(*np.nonzero(gray < 255)):
        g = int(gray[j, i])
        out.append(f'<rect x="{i * scale}" y="{(grid.ny - 1 - j) * scale}" width="{scale}" '
                   f'height="{scale}" fill="rgb({g},{g},{g})"/>')
    if scene is not None:
        r, g_, b = OUTLINE
        for o, u0, v0, u1, v1 in _outline_boxes(scene, grid, scale):
            out.append(f'<rect x="{u0}" y="{v0}" width="{u1 - u0 + 1}" height="{v1 - v0 + 1}" fill="none" '
                       f'stroke="rgb({r},{g_},{b})" stroke-width="1"><title>{o.name}</title></rect>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_field(f: PlacementField, scene: Optional[Scene], path, format: Optional[str] = None,
                 scale: int = 4) -> None:
    fmt = (format or str(path).rsplit(".", 1)[-1]).lower()
    if fmt == "ppm":
        write_ppm(path, render_pixels(f, scene, scale))
    elif fmt == "svg":
        with open(path, "w") as fh:
            fh.write(render_svg(f, scene, scale))
    else:
        raise ValueError(f"unsupported render format {fmt!r} (use ppm or svg)")
