"""Polygon layers to per-patch geospatial tokens.

Polygons are clipped exactly against each patch rectangle and their variable
values are averaged with the clipped areas as weights. Each category is then
projected to its head width by its own affine map.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensorgrad as tg

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
VALUE_RANGE = (0.0, 100.0)

Point = tuple[float, float]


class GeoFormatError(ValueError):
    """Malformed or invalid geo layer input."""


class ConfigurationError(ValueError):
    """Parameters do not fit the declared category layout."""


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return o1 * o2 < 0 and o3 * o4 < 0


def is_simple(ring: Sequence[Point]) -> bool:
    """True if no two non-adjacent edges properly cross."""
    n = len(ring)
    edges = [(ring[i], ring[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(*edges[i], *edges[j]):
                return False
    return True


@dataclass
class GeoPolygon:
    ring: list[Point]
    values: dict[str, float]

    def __post_init__(self):
        self.ring = [(float(x), float(y)) for x, y in self.ring]
        if len(self.ring) >= 2 and self.ring[0] == self.ring[-1]:
            self.ring = self.ring[:-1]
        if len(self.ring) < 3:
            raise GeoFormatError(f"polygon ring needs at least 3 vertices, got {len(self.ring)}")
        if not is_simple(self.ring):
            raise GeoFormatError("polygon ring is self-intersecting")
        lo, hi = VALUE_RANGE
        for name, v in self.values.items():
            if not lo <= v <= hi:
                raise GeoFormatError(f"variable {name!r} value {v} outside [{lo:g}, {hi:g}]")


@dataclass
class GeoCategory:
    name: str
    variables: list[str]
    polygons: list[GeoPolygon] = field(default_factory=list)

    def __post_init__(self):
        for k, poly in enumerate(self.polygons):
            missing = [v for v in self.variables if v not in poly.values]
            if missing:
                raise GeoFormatError(
                    f"category {self.name!r} polygon {k} missing variables {missing}")


@dataclass
class GeoLayerSet:
    """Ordered categories; category order is head order."""

    categories: list[GeoCategory]
    image_extent: tuple[float, float]

    @property
    def category_names(self) -> list[str]:
        return [c.name for c in self.categories]

    def schema(self) -> list[tuple[str, list[str]]]:
        return [(c.name, list(c.variables)) for c in self.categories]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "image_extent": list(self.image_extent),
            "categories": [
                {
                    "name": c.name,
                    "variables": list(c.variables),
                    "polygons": [
                        {"ring": [list(p) for p in poly.ring],
                         "values": {v: poly.values[v] for v in c.variables}}
                        for poly in c.polygons
                    ],
                }
                for c in self.categories
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> GeoLayerSet:
        try:
            extent = doc["image_extent"]
            if len(extent) != 2:
                raise GeoFormatError(f"image_extent must have 2 entries, got {extent!r}")
            cats = []
            for ci, cdoc in enumerate(doc["categories"]):
                where = f"categories[{ci}]"
                try:
                    polys = [GeoPolygon(ring=[tuple(p) for p in pdoc["ring"]],
                                        values={k: float(v) for k, v in pdoc["values"].items()})
                             for pdoc in cdoc["polygons"]]
                    cats.append(GeoCategory(cdoc["name"], list(cdoc["variables"]), polys))
                except GeoFormatError as exc:
                    raise GeoFormatError(f"{where}: {exc}") from exc
                except KeyError as exc:
                    raise GeoFormatError(f"{where}: missing field {exc}") from exc
        except KeyError as exc:
            raise GeoFormatError(f"missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, GeoFormatError):
                raise
            raise GeoFormatError(f"bad value: {exc}") from exc
        return cls(cats, (float(extent[0]), float(extent[1])))


def load_geo_layers(path: str | Path) -> GeoLayerSet:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GeoFormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return GeoLayerSet.from_dict(doc)
    except GeoFormatError as exc:
        raise GeoFormatError(f"{path}: {exc}") from exc


def save_geo_layers(layers: GeoLayerSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(layers.to_dict(), indent=1))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def clip_polygon_to_rect(ring: Sequence[Point], rect: tuple[float, float, float, float]) -> list[Point]:
    """Sutherland-Hodgman clip of ``ring`` against ``rect = (x0, y0, x1, y1)``.

    Returns the vertices of the intersection, or an empty list when disjoint.
    """
    x0, y0, x1, y1 = rect
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"clip rectangle must have positive size, got {rect}")
    if len(ring) < 3:
        raise GeoFormatError(f"polygon ring needs at least 3 vertices, got {len(ring)}")

    # each boundary: (inside test, intersection of segment with the boundary line)
    def cut_x(xc):
        return lambda p, q: (xc, p[1] + (q[1] - p[1]) * (xc - p[0]) / (q[0] - p[0]))

    def cut_y(yc):
        return lambda p, q: (p[0] + (q[0] - p[0]) * (yc - p[1]) / (q[1] - p[1]), yc)

    boundaries = (
        (lambda p: p[0] >= x0, cut_x(x0)),
        (lambda p: p[0] <= x1, cut_x(x1)),
        (lambda p: p[1] >= y0, cut_y(y0)),
        (lambda p: p[1] <= y1, cut_y(y1)),
    )
    out = [(float(x), float(y)) for x, y in ring]
    for inside, intersect in boundaries:
        if not out:
            break
        src, out = out, []
        prev = src[-1]
        for cur in src:
            if inside(cur):
                if not inside(prev):
                    out.append(intersect(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(intersect(prev, cur))
            prev = cur
    return out if len(out) >= 3 else []


def ring_area(ring: Sequence[Point]) -> float:
    """Absolute shoelace area."""
    n = len(ring)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * abs(acc)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_w: float
    patch_h: float

    @classmethod
    def for_extent(cls, extent: tuple[float, float], patch_size: float) -> PatchGrid:
        w, h = extent
        cols, rows = w / patch_size, h / patch_size
        if cols != int(cols) or rows != int(rows) or cols < 1 or rows < 1:
            raise ValueError(f"patch size {patch_size} does not tile extent {extent}")
        return cls(int(rows), int(cols), float(patch_size), float(patch_size))

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def rect(self, r: int, c: int) -> tuple[float, float, float, float]:
        return (c * self.patch_w, r * self.patch_h, (c + 1) * self.patch_w, (r + 1) * self.patch_h)


@dataclass
class PatchGeoMatrix:
    """Per-patch area-weighted values, one ``[n_patches, n_vars]`` block per category.

    Patch order is raster order (row-major over the grid).
    """

    grid: PatchGrid
    category_names: list[str]
    variables: list[list[str]]
    values: list[np.ndarray]
    coverage: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.grid.n_patches

    def category_means(self) -> list[np.ndarray]:
        return [v.mean(axis=0) for v in self.values]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["patch_row", "patch_col", "coverage"]
        for name, vars_ in zip(self.category_names, self.variables):
            header.extend(f"{name}.{v}" for v in vars_)
        writer.writerow(header)
        for p in range(self.n_patches):
            r, c = divmod(p, self.grid.cols)
            row = [r, c, f"{self.coverage[p]:.6f}"]
            for block in self.values:
                row.extend(f"{x:.6f}" for x in block[p])
            writer.writerow(row)
        return buf.getvalue()


def aggregate(layers: GeoLayerSet, grid: PatchGrid) -> PatchGeoMatrix:
    """Area-weighted average of every variable over each patch.

    Patches with no overlapping polygon area get zeros and coverage 0.
    Coverage is the largest covered fraction over categories (each category is
    expected to partition its area), capped at 1.
    """
    w, h = layers.image_extent
    if not (np.isclose(grid.cols * grid.patch_w, w) and np.isclose(grid.rows * grid.patch_h, h)):
        raise ValueError(f"grid {grid} does not tile extent {layers.image_extent}")
    n = grid.n_patches
    patch_area = grid.patch_w * grid.patch_h
    coverage = np.zeros(n)
    blocks = []
    for cat in layers.categories:
        vals = np.array([[poly.values[v] for v in cat.variables] for poly in cat.polygons],
                        dtype=np.float64).reshape(len(cat.polygons), len(cat.variables))
        bboxes = [(min(x for x, _ in p.ring), min(y for _, y in p.ring),
                   max(x for x, _ in p.ring), max(y for _, y in p.ring)) for p in cat.polygons]
        block = np.zeros((n, len(cat.variables)))
        for p in range(n):
            rect = grid.rect(*divmod(p, grid.cols))
            weights = np.zeros(len(cat.polygons))
            for k, poly in enumerate(cat.polygons):
                bx0, by0, bx1, by1 = bboxes[k]
                if bx1 <= rect[0] or bx0 >= rect[2] or by1 <= rect[1] or by0 >= rect[3]:
                    continue
                weights[k] = ring_area(clip_polygon_to_rect(poly.ring, rect))
            # fsum is correctly rounded, so the result does not depend on polygon order
            total = math.fsum(weights)
            if total > 0:
                block[p] = [math.fsum(weights * vals[:, j]) / total for j in range(vals.shape[1])]
                coverage[p] = max(coverage[p], min(total / patch_area, 1.0))
        blocks.append(block)
    low = coverage < 0.5
    if n and low.mean() > 0.1:
        logger.warning("%d of %d patches have geo coverage below 0.5", int(low.sum()), n)
    return PatchGeoMatrix(grid, layers.category_names, [list(c.variables) for c in layers.categories],
                          blocks, coverage)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def embed_geo(blocks: Sequence[tg.Tensor], weights: Sequence[tg.Tensor],
              biases: Sequence[tg.Tensor], d_model: int | None = None) -> tg.Tensor:
    """Project each category block ``[..., n_patches, n_vars_i]`` to its head width and concatenate.

    ``weights[i]`` is ``[n_vars_i, d_head]``; outputs are stacked in category order.
    """
    if not (len(blocks) == len(weights) == len(biases)):
        raise ConfigurationError(
            f"{len(blocks)} category blocks but {len(weights)} weights / {len(biases)} biases")
    parts = []
    for i, (x, w, b) in enumerate(zip(blocks, weights, biases)):
        if x.shape[-1] != w.shape[0]:
            raise ConfigurationError(
                f"category {i}: {x.shape[-1]} variables but projection expects {w.shape[0]}")
        parts.append(tg.linear(x, w, b))
    out = tg.concat_last_axis(parts)
    if d_model is not None and out.shape[-1] != d_model:
        raise ConfigurationError(f"head widths sum to {out.shape[-1]}, expected d_model={d_model}")
    return out
