"""Explanation artifacts: head rankings from gate values, token rankings from
attention column sums, and heatmap overlays.

Heads are ranked by their gate value averaged over layers. Token scores are the
column sums of the last layer's pre-gating attention, i.e. how strongly each
input patch is attended to by the guidance tokens. Ties are broken by category
name for heads and by raster index for tokens, so every ranking is total.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensorgrad as tg
from .data import save_png
from .model import ModelConfig, Sample, forward

OVERLAY_ALPHA = 0.5

# approximate viridis colours at t = 0, 1/8, ..., 1
_VIRIDIS_ANCHORS = np.array([
    [0.267004, 0.004874, 0.329415],
    [0.282623, 0.140926, 0.457517],
    [0.229739, 0.322361, 0.545706],
    [0.172719, 0.448791, 0.557885],
    [0.127568, 0.566949, 0.550556],
    [0.134692, 0.658636, 0.517649],
    [0.369214, 0.788888, 0.382914],
    [0.678489, 0.863742, 0.189503],
    [0.993248, 0.906157, 0.143936],
])


def _build_colormap(n: int = 256) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    grid = np.linspace(0.0, 1.0, len(_VIRIDIS_ANCHORS))
    return np.stack([np.interp(t, grid, _VIRIDIS_ANCHORS[:, c]) for c in range(3)], axis=1)


COLORMAP = _build_colormap()


class UnsupportedVariantError(ValueError):
    """Explanations need learned head weights (variants A and G)."""


# ---------------------------------------------------------------------------
# rankings
# ---------------------------------------------------------------------------

def rank_heads(weights: Sequence[float], names: Sequence[str]) -> list[int]:
    """Head indices by descending weight, ties by category name."""
    return sorted(range(len(names)), key=lambda i: (-float(weights[i]), names[i]))


def rank_tokens(scores: Sequence[float]) -> list[int]:
    """Token indices by descending score, ties by raster index."""
    s = np.asarray(scores, dtype=np.float64)
    return [int(i) for i in np.lexsort((np.arange(s.size), -s))]


def token_scores(attention: np.ndarray) -> np.ndarray:
    """``[H, n_G, n_I] -> [H, n_I]`` column sums of the attention maps."""
    return np.asarray(attention).sum(axis=-2)


def format_weight(name: str, weight: float) -> str:
    return f"{name} ({weight:.2f})"


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    return np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)


def _linear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # token centres sit at (i + 0.5) * n_out / n_in in pixel units; edges clamp
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def upsample_bilinear(grid_map: np.ndarray, size: int) -> np.ndarray:
    g = np.asarray(grid_map, dtype=np.float64)
    return _linear_matrix(g.shape[0], size) @ g @ _linear_matrix(g.shape[1], size).T


def colorize(heat: np.ndarray) -> np.ndarray:
    idx = np.clip(np.rint(heat * (len(COLORMAP) - 1)), 0, len(COLORMAP) - 1).astype(int)
    return COLORMAP[idx]


def overlay(image: np.ndarray, token_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (blended RGB image, upsampled normalised heat)."""
    size = image.shape[0]
    heat = upsample_bilinear(normalize_map(token_map), size)
    return (1 - OVERLAY_ALPHA) * image + OVERLAY_ALPHA * colorize(heat), heat


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class HeadPanel:
    category: str
    weight: float
    role: str  # "top", "second", "lowest"
    top_tokens: list[int]
    token_scores: list[float]


@dataclass
class ExplainReport:
    sample_id: str
    variant: str
    category_names: list[str]
    layer_head_weights: list[list[float]]
    mean_head_weights: list[float]
    head_ranking: list[str]
    panels: list[HeadPanel]
    head_averaged_top_token: int
    head_averaged_scores: list[float]
    # per-head attention row of the top head-averaged token, by category
    top_token_rows: dict[str, list[float]]
    top_token_heads: list[str]
    # last-layer pre-gating attention [H, n_G, n_I], kept for independent checks
    attention: list

    def summary(self) -> str:
        parts = [format_weight(self.category_names[i], self.mean_head_weights[i])
                 for i in [self.category_names.index(c) for c in self.head_ranking]]
        return f"{self.sample_id}: " + ", ".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ExplainReport:
        d = dict(d)
        d["panels"] = [HeadPanel(**p) for p in d["panels"]]
        return cls(**d)


def explain_sample(sample: Sample, config: ModelConfig, params: Mapping[str, tg.Tensor],
                   top_m: int = 2, force_gates=None) -> ExplainReport:
    if config.variant not in ("A", "G") or not config.head_weights_enabled:
        raise UnsupportedVariantError(
            f"variant {config.variant!r} has no learned head weights; explain needs A or G")
    _, diags = forward(sample, config, params, force_gates=force_gates)
    names = config.category_names
    layer_h = [d.gates[0].tolist() for d in diags]
    mean_h = np.mean(np.array(layer_h), axis=0)
    order = rank_heads(mean_h, names)

    attn = diags[-1].attention[0]
    scores = token_scores(attn)
    panels = []
    roles = [("top", order[0]), ("second", order[1] if len(order) > 1 else None), ("lowest", order[-1])]
    for role, h in roles:
        if h is None:
            continue
        top = rank_tokens(scores[h])[:top_m]
        panels.append(HeadPanel(names[h], float(mean_h[h]), role, top, [float(scores[h, t]) for t in top]))

    averaged = scores.mean(axis=0)
    t_star = rank_tokens(averaged)[0]
    # heads that attend most to t_star, ties by name
    heads_for_token = rank_heads(scores[:, t_star], names)[:2]
    return ExplainReport(
        sample_id=sample.id, variant=config.variant, category_names=list(names),
        layer_head_weights=layer_h, mean_head_weights=mean_h.tolist(),
        head_ranking=[names[i] for i in order], panels=panels,
        head_averaged_top_token=t_star, head_averaged_scores=averaged.tolist(),
        top_token_rows={names[h]: attn[h, t_star].tolist() for h in range(len(names))},
        top_token_heads=[names[i] for i in heads_for_token],
        attention=attn.tolist())


def _panel_images(report: ExplainReport, image: np.ndarray, grid: int) -> dict[str, np.ndarray]:
    attn = np.asarray(report.attention)
    scores = token_scores(attn)
    out = {}
    for panel in report.panels:
        h = report.category_names.index(panel.category)
        out[f"head_{panel.role}_{panel.category}"] = scores[h].reshape(grid, grid)
    out["head_averaged"] = np.asarray(report.head_averaged_scores).reshape(grid, grid)
    for cat in report.top_token_heads:
        out[f"token{report.head_averaged_top_token}_{cat}"] = np.asarray(report.top_token_rows[cat]).reshape(grid, grid)
    return {name: overlay(image, m)[0] for name, m in out.items()}


def write_report(report: ExplainReport, sample: Sample, grid: int, out_dir: str | Path) -> list[Path]:
    """JSON report, per-panel heatmap CSVs and PNG overlays for one sample."""
    out = Path(out_dir) / report.sample_id
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=1))
    for name, img in _panel_images(report, sample.local_image, grid).items():
        p = out / f"{name}.png"
        save_png(np.clip(img, 0, 1), p)
        paths.append(p)
    csv_path = out / "token_scores.csv"
    scores = token_scores(np.asarray(report.attention))
    header = "token," + ",".join(report.category_names) + ",head_averaged"
    rows = [f"{t}," + ",".join(f"{scores[h, t]:.6f}" for h in range(scores.shape[0]))
            + f",{report.head_averaged_scores[t]:.6f}" for t in range(scores.shape[1])]
    csv_path.write_text(header + "\n" + "\n".join(rows) + "\n")
    paths.append(csv_path)
    return paths


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GCGVT_THREADS", "1")))
    except ValueError:
        return 1


def explain_samples(samples: Sequence[Sample], config: ModelConfig, params: Mapping[str, tg.Tensor],
                    out_dir: str | Path, top_m: int = 2, force_gates=None) -> list[ExplainReport]:
    reports = [explain_sample(s, config, params, top_m, force_gates) for s in samples]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        list(pool.map(lambda rs: write_report(rs[0], rs[1], config.grid_size, out_dir),
                      zip(reports, samples)))
    return reports
