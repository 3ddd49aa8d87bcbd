"""Datasets: manifest ingestion, 8:1:1 splitting, bicubic resampling, and a
synthetic generator with planted image-only, geo-only and area-context signal.

Synthetic generative formula (per sample, all terms documented in ``OUTCOMES``)::

    y_j = intercept_j
          + image_coef_j * green_fraction(local_image)
          + sum_k local_coef_jk * local_mean[cat_k, var_k]
          + sum_k area_coef_jk  * area_mean[cat_k, var_k]
          + N(0, noise_sigma^2)

clamped to [0, 100]. ``green_fraction`` is the share of local-image pixels whose
green channel exceeds both red and blue by more than ``GREEN_MARGIN``.
``local_mean`` is the area-weighted mean of a variable over the local extent;
``area_mean`` is the same over the whole area extent, whose outer ring carries
polygons (and values) that never appear in the local layers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .geoembed import (FORMAT_VERSION, GeoCategory, GeoFormatError, GeoLayerSet, GeoPolygon,
                       PatchGrid, aggregate, load_geo_layers, ring_area, save_geo_layers)
from .model import Sample

logger = logging.getLogger(__name__)

GREEN_MARGIN = 0.05
SPLIT_RATIOS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "val", "test")


class IngestError(ValueError):
    """A manifest record is missing, malformed or out of range."""


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list[Sample]
    outcome_names: list[str]
    categories: list[tuple[str, list[str]]]
    image_size: int
    patch_size: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, ids: Sequence[str]) -> list[Sample]:
        index = {s.id: s for s in self.samples}
        return [index[i] for i in ids]

    @property
    def category_spec(self) -> list[tuple[str, int]]:
        return [(name, len(vars_)) for name, vars_ in self.categories]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom weights for taps at offsets -1, 0, 1, 2 from ``floor(src)``."""
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def _resize_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src)
    w = _cubic_weights(src - base, a)
    mat = np.zeros((n_out, n_in))
    for k in range(4):
        idx = np.clip(base.astype(int) - 1 + k, 0, n_in - 1)
        np.add.at(mat, (np.arange(n_out), idx), w[:, k])
    return mat


def bicubic_resize(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Separable Catmull-Rom (a=-0.5) resampling with edge clamping, per channel."""
    out_h, out_w = (size, size) if isinstance(size, int) else size
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ry, rx = _resize_matrix(h, out_h), _resize_matrix(w, out_w)
    rows = np.tensordot(ry, img, axes=(1, 0))  # [out_h, w, ...]
    return np.moveaxis(np.tensordot(rx, rows, axes=(1, 1)), 0, 1)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_png(image: np.ndarray, path: str | Path) -> None:
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so a PNG round trip is exact."""
    return np.clip(np.rint(image * 255.0), 0, 255) / 255.0


def green_fraction(image: np.ndarray) -> float:
    img = np.asarray(image)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return float(((g - r > GREEN_MARGIN) & (g - b > GREEN_MARGIN)).mean())


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def largest_remainder(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> list[int]:
    quotas = [n * r / math.fsum(ratios) for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


@dataclass
class SplitSpec:
    seed: int
    assignment: dict[str, str]
    ratios: tuple[float, float, float] = SPLIT_RATIOS

    def ids(self, bucket: str) -> list[str]:
        return [i for i, b in self.assignment.items() if b == bucket]

    def sizes(self) -> dict[str, int]:
        return {b: len(self.ids(b)) for b in SPLIT_NAMES}

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "seed": self.seed, "ratios": list(self.ratios),
                "assignment": self.assignment}


def split(ids: Sequence[str], seed: int) -> SplitSpec:
    """Deterministic shuffled 8:1:1 partition; independent of input order."""
    if len(ids) < 10:
        raise ValueError(f"split needs at least 10 ids, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("split ids must be unique")
    ordered = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    sizes = largest_remainder(len(ordered))
    assignment: dict[str, str] = {}
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for k in perm[start:start + size]:
            assignment[ordered[k]] = name
        start += size
    return SplitSpec(seed, {i: assignment[i] for i in ordered})


# ---------------------------------------------------------------------------
# manifest ingestion
# ---------------------------------------------------------------------------

def _check_layers(layers: GeoLayerSet, categories, rid: str, field_name: str, size: int) -> None:
    if [(c.name, c.variables) for c in layers.categories] != [(n, list(v)) for n, v in categories]:
        raise IngestError(f"record {rid}: {field_name} categories do not match the manifest schema")
    if tuple(layers.image_extent) != (size, size):
        raise IngestError(f"record {rid}: {field_name} extent {layers.image_extent} != image size {size}")


def load_dataset(manifest_path: str | Path, patch_size: int | None = None) -> Dataset:
    """Read and validate every record; geo layers are aggregated onto the patch grid."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise IngestError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise IngestError(f"{manifest_path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise IngestError(f"{manifest_path}: unsupported format_version {doc.get('format_version')!r}")
    try:
        outcomes = list(doc["outcomes"])
        categories = [(c["name"], list(c["variables"])) for c in doc["categories"]]
        size = int(doc["image_size"])
        patch = int(patch_size or doc["patch_size"])
        records = doc["records"]
    except (KeyError, TypeError) as exc:
        raise IngestError(f"{manifest_path}: missing or malformed field {exc}") from exc
    grid = PatchGrid.for_extent((size, size), patch)

    samples = []
    for rec in records:
        rid = str(rec.get("id", "?"))
        try:
            targets = np.asarray(rec["targets"], dtype=np.float64)
            if targets.shape != (len(outcomes),):
                raise IngestError(f"record {rid}: expected {len(outcomes)} targets, got {targets.shape}")
            if not np.all((targets >= 0) & (targets <= 100)):
                raise IngestError(f"record {rid}: targets {targets.tolist()} outside [0, 100]")
            images, geos = {}, {}
            for key in ("local", "area"):
                img_path, geo_path = rec.get(f"{key}_image"), rec.get(f"{key}_geo")
                if img_path is None:
                    continue
                img = load_png(root / img_path)
                if img.shape != (size, size, 3):
                    raise IngestError(f"record {rid}: {key} image shape {img.shape} != {(size, size, 3)}")
                images[key] = img
                if geo_path is None:
                    raise IngestError(f"record {rid}: {key}_image given without {key}_geo")
                layers = load_geo_layers(root / geo_path)
                _check_layers(layers, categories, rid, f"{key}_geo", size)
                geos[key] = aggregate(layers, grid)
            if "local" not in images:
                raise IngestError(f"record {rid}: local_image is required")
        except KeyError as exc:
            raise IngestError(f"record {rid}: missing field {exc}") from exc
        except (FileNotFoundError, OSError) as exc:
            raise IngestError(f"record {rid}: cannot read file ({exc})") from exc
        except GeoFormatError as exc:
            raise IngestError(f"record {rid}: {exc}") from exc
        samples.append(Sample(rid, images["local"], geos["local"], targets,
                              images.get("area"), geos.get("area")))
    return Dataset(samples, outcomes, categories, size, patch)


def write_manifest(dataset_records: list[dict], outcomes: Sequence[str], categories, image_size: int,
                   patch_size: int, path: Path, extra: Mapping | None = None) -> None:
    doc = {"format_version": FORMAT_VERSION, "image_size": image_size, "patch_size": patch_size,
           "outcomes": list(outcomes),
           "categories": [{"name": n, "variables": list(v)} for n, v in categories],
           "records": dataset_records}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class OutcomeSpec:
    name: str
    intercept: float
    image_coef: float = 0.0
    # (category index, variable index) -> coefficient
    local_coefs: dict[tuple[int, int], float] = field(default_factory=dict)
    area_coefs: dict[tuple[int, int], float] = field(default_factory=dict)


OUTCOMES = [
    OutcomeSpec("image_only", 15.0, image_coef=70.0),
    OutcomeSpec("geo_only", 10.0, local_coefs={(0, 0): 0.5, (1, 1): 0.4}),
    OutcomeSpec("area_context", 10.0, image_coef=25.0, area_coefs={(2, 0): 0.6}),
]

DESK_CATEGORIES = [(name, [f"v{k}" for k in range(5)])
                   for name in ("income", "housing", "education", "household")]


@dataclass
class GeneratorConfig:
    image_size: int = 64
    patch_size: int = 8
    categories: list[tuple[str, list[str]]] = field(default_factory=lambda: [
        (n, list(v)) for n, v in DESK_CATEGORIES])
    outcomes: list[OutcomeSpec] = field(default_factory=lambda: list(OUTCOMES))
    noise_sigma: float = 1.0
    # multipliers applied to every outcome's image / geo coefficients
    image_weight: float = 1.0
    geo_weight: float = 1.0
    local_cells: int = 6
    level_range: tuple[float, float] = (10.0, 90.0)
    polygon_jitter: float = 6.0


def _clip_halfplane(poly: list[tuple[float, float]], nx: float, ny: float, c: float):
    """Keep the part of convex ``poly`` with ``nx*x + ny*y <= c``."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp, sq = nx * p[0] + ny * p[1] - c, nx * q[0] + ny * q[1] - c
        if sp <= 0:
            out.append(p)
        if sp * sq < 0:
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _convex_partition(rect, n_cells: int, rng: np.random.Generator) -> list[list[tuple[float, float]]]:
    x0, y0, x1, y1 = rect
    cells = [[(x0, y0), (x1, y0), (x1, y1), (x0, y1)]]
    while len(cells) < n_cells:
        k = max(range(len(cells)), key=lambda i: ring_area(cells[i]))
        cell = cells.pop(k)
        cx = sum(p[0] for p in cell) / len(cell)
        cy = sum(p[1] for p in cell) / len(cell)
        theta = rng.uniform(0, math.pi)
        nx, ny = math.cos(theta), math.sin(theta)
        c = nx * cx + ny * cy
        a, b = _clip_halfplane(cell, nx, ny, c), _clip_halfplane(cell, -nx, -ny, -c)
        cells.extend(p for p in (a, b) if len(p) >= 3 and ring_area(p) > 1e-6)
    return [[(round(x, 6), round(y, 6)) for x, y in cell] for cell in cells]


def _weighted_means(polys: Sequence[GeoPolygon], variables: Sequence[str]) -> np.ndarray:
    areas = np.array([ring_area(p.ring) for p in polys])
    vals = np.array([[p.values[v] for v in variables] for p in polys])
    return areas @ vals / areas.sum()


def _draw_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """Soil background, vegetation blobs, then building rectangles on top."""
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.empty((size, size, 3))
    soil = np.array([0.55, 0.46, 0.36]) + rng.uniform(-0.05, 0.05, 3)
    img[:] = soil + rng.normal(0, 0.02, (size, size, 1))
    veg = np.zeros((size, size), dtype=bool)
    target = rng.uniform(0.02, 0.8)
    while veg.mean() < target:
        cx, cy = rng.uniform(0, size, 2)
        rx, ry = rng.uniform(0.05, 0.25, 2) * size
        veg |= ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
    shade = rng.uniform(0.35, 0.6)
    texture = rng.normal(0, 0.03, (size, size))
    img[veg] = np.stack([0.22 + texture[veg], shade + texture[veg], 0.2 + texture[veg]], axis=-1)
    for _ in range(rng.integers(2, 9)):
        w, h = rng.integers(size // 16, size // 5, 2)
        x, y = rng.integers(0, size - w), rng.integers(0, size - h)
        gray = rng.uniform(0.45, 0.85)
        tint = np.array([gray, gray, gray]) if rng.random() < 0.7 else np.array([gray, 0.6 * gray, 0.55 * gray])
        img[y:y + h, x:x + w] = tint + rng.normal(0, 0.02, (h, w, 1))
    return quantize(np.clip(img, 0, 1))


def _make_layers(polys_by_cat, categories, extent) -> GeoLayerSet:
    cats = [GeoCategory(name, list(vars_), polys) for (name, vars_), polys in zip(categories, polys_by_cat)]
    return GeoLayerSet(cats, (float(extent), float(extent)))


def _synth_one(rid: str, cfg: GeneratorConfig, rng: np.random.Generator):
    size = cfg.image_size
    big = 2 * size
    lo, hi = cfg.level_range
    area_canvas = _draw_scene(big, rng)
    local = area_canvas[size // 2: size // 2 + size, size // 2: size // 2 + size].copy()
    area = quantize(np.clip(bicubic_resize(area_canvas, size), 0, 1))

    window = (size / 2, size / 2, size / 2 + size, size / 2 + size)
    ring_rects = [(0, 0, big, size / 2), (0, size / 2 + size, big, big),
                  (0, size / 2, size / 2, size / 2 + size), (size / 2 + size, size / 2, big, size / 2 + size)]
    local_polys, area_polys = [], []
    for name, variables in cfg.categories:
        inner_level = rng.uniform(lo, hi, len(variables))
        outer_level = rng.uniform(lo, hi, len(variables))

        def values(level):
            v = np.clip(level + rng.normal(0, cfg.polygon_jitter, len(variables)), 0, 100)
            return {var: round(float(x), 2) for var, x in zip(variables, v)}

        inner = [(cell, values(inner_level)) for cell in _convex_partition(window, cfg.local_cells, rng)]
        outer = [(cell, values(outer_level)) for r in ring_rects for cell in _convex_partition(r, 2, rng)]
        off = size / 2
        local_polys.append([GeoPolygon([(x - off, y - off) for x, y in cell], vals) for cell, vals in inner])
        area_polys.append([GeoPolygon([(x / 2, y / 2) for x, y in cell], vals) for cell, vals in inner + outer])

    local_layers = _make_layers(local_polys, cfg.categories, size)
    area_layers = _make_layers(area_polys, cfg.categories, size)
    features = {
        "green_fraction": green_fraction(local),
        "local_means": [_weighted_means(p, v).tolist() for p, (_, v) in zip(local_polys, cfg.categories)],
        "area_means": [_weighted_means(p, v).tolist() for p, (_, v) in zip(area_polys, cfg.categories)],
    }
    return local, area, local_layers, area_layers, features


def outcome_value(spec: OutcomeSpec, features: Mapping, image_weight: float = 1.0,
                  geo_weight: float = 1.0) -> float:
    """Noise-free generative value of one outcome (before clamping)."""
    y = spec.intercept + image_weight * spec.image_coef * features["green_fraction"]
    for (c, v), coef in spec.local_coefs.items():
        y += geo_weight * coef * features["local_means"][c][v]
    for (c, v), coef in spec.area_coefs.items():
        y += geo_weight * coef * features["area_means"][c][v]
    return y


def generate_synthetic(n_samples: int, config: GeneratorConfig | None = None, seed: int = 0,
                       out_dir: str | Path | None = None) -> tuple[Dataset, list[dict]]:
    """Build ``n_samples`` synthetic records; optionally write them as a manifest dataset.

    Returns the in-memory dataset and per-sample generative features (the
    ground-truth regressors of the formula in the module docstring).
    """
    cfg = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    grid = PatchGrid.for_extent((cfg.image_size, cfg.image_size), cfg.patch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "geo").mkdir(parents=True, exist_ok=True)

    samples, features_all, records = [], [], []
    clamped = 0
    for k in range(n_samples):
        rid = f"s{k:05d}"
        local, area, local_layers, area_layers, feats = _synth_one(rid, cfg, rng)
        noise = rng.normal(0, cfg.noise_sigma, len(cfg.outcomes)) if cfg.noise_sigma > 0 else np.zeros(len(cfg.outcomes))
        raw = np.array([outcome_value(s, feats, cfg.image_weight, cfg.geo_weight) for s in cfg.outcomes]) + noise
        targets = np.clip(raw, 0.0, 100.0)
        clamped += int(np.any(targets != raw))
        samples.append(Sample(rid, local, aggregate(local_layers, grid), targets,
                              area, aggregate(area_layers, grid)))
        features_all.append(feats)
        if out is not None:
            rec = {"id": rid,
                   "local_image": f"images/{rid}_local.png", "area_image": f"images/{rid}_area.png",
                   "local_geo": f"geo/{rid}_local.json", "area_geo": f"geo/{rid}_area.json",
                   "targets": targets.tolist()}
            save_png(local, out / rec["local_image"])
            save_png(area, out / rec["area_image"])
            save_geo_layers(local_layers, out / rec["local_geo"])
            save_geo_layers(area_layers, out / rec["area_geo"])
            records.append(rec)
    if n_samples and clamped / n_samples >= 0.01:
        logger.warning("%.1f%% of synthetic samples had clamped targets", 100 * clamped / n_samples)

    names = [s.name for s in cfg.outcomes]
    if out is not None:
        gen = asdict(cfg)
        for spec in gen["outcomes"]:
            spec["local_coefs"] = [[c, v, w] for (c, v), w in spec["local_coefs"].items()]
            spec["area_coefs"] = [[c, v, w] for (c, v), w in spec["area_coefs"].items()]
        write_manifest(records, names, cfg.categories, cfg.image_size, cfg.patch_size,
                       out / "manifest.json", extra={"generator": {"seed": seed, "config": gen}})
    return Dataset(samples, names, [(n, list(v)) for n, v in cfg.categories],
                   cfg.image_size, cfg.patch_size), features_all
