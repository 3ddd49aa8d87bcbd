"""GCGVT-A / GCGVT-G / GCGVT-L and a plain ViT baseline.

All variants share the same block stack; they differ only in what feeds the
input stream, what feeds the guidance stream, and whether gates are active.

Parameter names (stable, used by checkpoints)::

    patch_embed.{weight,bias}             local image tokenizer  [p*p*3, D]
    area_patch_embed.{weight,bias}        area image tokenizer (A)
    geo.{i}.{weight,bias}                 category i projection  [n_vars_i, D/C]
    area_geo.{i}.{weight,bias}            area-side category projection (A)
    pos_embed                             [n_patches, D] (only if learned_pos)
    blocks.{l}.norm1.{gain,bias}
    blocks.{l}.norm_guidance.{gain,bias}  (A, G, L)
    blocks.{l}.attn.{wq,wk,wv,wo}.{weight,bias}
    blocks.{l}.attn.score.{i}.{fc1,fc2}.{weight,bias}   (A, G with gates)
    blocks.{l}.norm2.{gain,bias}
    blocks.{l}.mlp.{fc1,fc2}.{weight,bias}
    norm_final.{gain,bias}
    head.{weight,bias}                    [D, n_outcomes]
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensorgrad as tg
from .attention import (LN_EPS, SCORE_HIDDEN, AttentionDiagnostics, GuidancePacket,
                        guided_block, subtree)
from .geoembed import ConfigurationError, PatchGeoMatrix, embed_geo

VARIANTS = ("A", "G", "L", "vit")
CHECKPOINT_VERSION = 1


class InputError(ValueError):
    """A sample lacks data the configured variant needs."""


class CheckpointError(ValueError):
    """Checkpoint is unreadable or incompatible."""


@dataclass
class ModelConfig:
    variant: str = "G"
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 80
    mlp_dim: int = 128
    n_blocks: int = 4
    categories: list[tuple[str, int]] = field(default_factory=lambda: [
        ("income", 5), ("housing", 5), ("education", 5), ("household", 5)])
    n_outcomes: int = 3
    head_weights_enabled: bool = True
    learned_pos: bool = False
    seed: int = 0
    # geo percentages are multiplied by this before projection and scoring
    geo_scale: float = 0.01
    # ablation switches
    zero_image: bool = False
    active_categories: list[str] | None = None
    # predictions = target_shift + target_scale * head(pooled); set from training targets
    target_shift: list[float] | None = None
    target_scale: list[float] | None = None

    def __post_init__(self):
        self.categories = [(str(n), int(k)) for n, k in self.categories]
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.categories:
            raise ConfigurationError("at least one category is required")
        if self.d_model % self.n_categories:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by {self.n_categories} categories")
        if self.learned_pos is False and self.d_model % 4:
            raise ConfigurationError("sinusoidal positions need d_model divisible by 4")
        if self.active_categories is not None:
            unknown = set(self.active_categories) - set(self.category_names)
            if unknown:
                raise ConfigurationError(f"unknown categories {sorted(unknown)}")

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_heads(self) -> int:
        return len(self.categories)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def category_names(self) -> list[str]:
        return [n for n, _ in self.categories]

    @property
    def gated(self) -> bool:
        return self.variant in ("A", "G") and self.head_weights_enabled

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = [list(c) for c in self.categories]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def desk_preset(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def paper_preset(**overrides) -> ModelConfig:
    cats = [("age_sex", 23), ("ancestry", 23), ("education", 23), ("employment", 23),
            ("household", 23), ("housing", 23), ("income", 23), ("origin", 22),
            ("race", 22), ("residency", 23)]
    base = ModelConfig(variant="A", image_size=640, patch_size=16, d_model=1280, mlp_dim=128,
                       n_blocks=4, categories=cats, n_outcomes=9)
    return replace(base, **overrides)


PRESETS = {"desk": desk_preset, "paper": paper_preset}


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    id: str
    local_image: np.ndarray  # [H, W, 3] in [0, 1]
    local_geo: PatchGeoMatrix
    targets: np.ndarray  # [n_outcomes] in [0, 100]
    area_image: np.ndarray | None = None
    area_geo: PatchGeoMatrix | None = None


@dataclass
class Batch:
    local_image: np.ndarray  # [B, H, W, 3]
    local_geo: list[np.ndarray]  # per category [B, n_patches, n_vars]
    area_image: np.ndarray | None = None
    area_geo: list[np.ndarray] | None = None
    targets: np.ndarray | None = None  # [B, n_outcomes]

    @property
    def size(self) -> int:
        return self.local_image.shape[0]


def collate(samples: Sequence[Sample]) -> Batch:
    if not samples:
        raise InputError("cannot collate an empty sample list")
    has_area = all(s.area_image is not None and s.area_geo is not None for s in samples)
    n_cat = len(samples[0].local_geo.values)
    return Batch(
        local_image=np.stack([s.local_image for s in samples]),
        local_geo=[np.stack([s.local_geo.values[i] for s in samples]) for i in range(n_cat)],
        area_image=np.stack([s.area_image for s in samples]) if has_area else None,
        area_geo=([np.stack([s.area_geo.values[i] for s in samples]) for i in range(n_cat)]
                  if has_area else None),
        targets=np.stack([np.asarray(s.targets, dtype=np.float64) for s in samples]),
    )


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, C] -> [..., n_patches, p*p*C]``; patches in raster order,
    pixels within a patch row-major with channels innermost."""
    *lead, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigurationError(f"image {h}x{w} not divisible into {patch_size}px patches")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(*lead, gh, patch_size, gw, patch_size, c)
    x = np.moveaxis(x, -4, -3)  # [..., gh, gw, p, p, c]
    return x.reshape(*lead, gh * gw, patch_size * patch_size * c)


def patch_embed(images: np.ndarray, weight: tg.Tensor, bias: tg.Tensor, patch_size: int) -> tg.Tensor:
    if weight.shape[0] != patch_size * patch_size * images.shape[-1]:
        raise ConfigurationError(
            f"patch embedding expects {weight.shape[0]} inputs, patches have "
            f"{patch_size * patch_size * images.shape[-1]}")
    return tg.linear(tg.Tensor(patchify(images, patch_size)), weight, bias)


def sinusoidal_positions(grid: int, d_model: int) -> np.ndarray:
    """2-D sin/cos table ``[grid*grid, d_model]``: rows encoded in the first half
    of the features, columns in the second half."""
    half = d_model // 2
    freqs = 1.0 / (10000.0 ** (np.arange(0, half, 2) / half))
    pos = np.arange(grid, dtype=np.float64)[:, None] * freqs[None, :]
    enc = np.zeros((grid, half))
    enc[:, 0::2] = np.sin(pos)
    enc[:, 1::2] = np.cos(pos)
    rows = np.repeat(enc, grid, axis=0)
    cols = np.tile(enc, (grid, 1))
    return np.concatenate([rows, cols], axis=1)


def _positions(config: ModelConfig, params: Mapping[str, tg.Tensor]) -> tg.Tensor:
    if config.learned_pos:
        return params["pos_embed"]
    return tg.Tensor(sinusoidal_positions(config.grid_size, config.d_model))


def _add_pos(x: tg.Tensor, pos: tg.Tensor) -> tg.Tensor:
    return tg.add(x, pos)


def _geo_blocks(blocks: Sequence[np.ndarray], config: ModelConfig) -> list[np.ndarray]:
    out = []
    for name, block in zip(config.category_names, blocks):
        scaled = np.asarray(block, dtype=np.float64) * config.geo_scale
        if config.active_categories is not None and name not in config.active_categories:
            scaled = np.zeros_like(scaled)
        out.append(scaled)
    return out


def _embed(blocks: Sequence[np.ndarray], params: Mapping[str, tg.Tensor], prefix: str,
           config: ModelConfig) -> tg.Tensor:
    n = config.n_categories
    return embed_geo([tg.Tensor(b) for b in blocks],
                     [params[f"{prefix}.{i}.weight"] for i in range(n)],
                     [params[f"{prefix}.{i}.bias"] for i in range(n)], config.d_model)


def _raw(blocks: Sequence[np.ndarray]) -> list[tg.Tensor]:
    return [tg.Tensor(b.mean(axis=-2)) for b in blocks]


def build_input_and_guidance(batch: Batch, config: ModelConfig,
                             params: Mapping[str, tg.Tensor]) -> tuple[tg.Tensor, GuidancePacket | None]:
    """Input tokens and guidance packet for the configured variant (``None`` for vit)."""
    p = config.patch_size
    local = batch.local_image
    if local.shape[-3:-1] != (config.image_size, config.image_size):
        raise ConfigurationError(f"image {local.shape[-3:-1]} does not match image_size {config.image_size}")
    if config.zero_image:
        local = np.zeros_like(local)
    pos = _positions(config, params)
    img = patch_embed(local, params["patch_embed.weight"], params["patch_embed.bias"], p)

    if config.variant == "vit":
        return _add_pos(img, pos), None
    if config.variant == "L":
        x = _add_pos(img, pos)
        zeros = [tg.Tensor(np.zeros(local.shape[:-3] + (k,))) for _, k in config.categories]
        return x, GuidancePacket(x, zeros)

    local_geo = _geo_blocks(batch.local_geo, config)
    if config.variant == "G":
        x = _add_pos(img, pos)
        guidance = _add_pos(_embed(local_geo, params, "geo", config), pos)
        return x, GuidancePacket(guidance, _raw(local_geo))

    # variant A
    if batch.area_image is None or batch.area_geo is None:
        raise InputError("variant A needs area_image and area_geo for every sample")
    area = np.zeros_like(batch.area_image) if config.zero_image else batch.area_image
    area_geo = _geo_blocks(batch.area_geo, config)
    x = _add_pos(tg.add(img, _embed(local_geo, params, "geo", config)), pos)
    area_img = patch_embed(area, params["area_patch_embed.weight"], params["area_patch_embed.bias"], p)
    guidance = _add_pos(tg.add(area_img, _embed(area_geo, params, "area_geo", config)), pos)
    return x, GuidancePacket(guidance, _raw(area_geo))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the order fixes the init stream."""
    d, dh = config.d_model, config.d_head
    patch_in = config.patch_size ** 2 * 3
    shapes: dict[str, tuple[int, ...]] = {}

    def affine(name, fan_in, fan_out):
        shapes[f"{name}.weight"] = (fan_in, fan_out)
        shapes[f"{name}.bias"] = (fan_out,)

    def norm(name):
        shapes[f"{name}.gain"] = (d,)
        shapes[f"{name}.bias"] = (d,)

    affine("patch_embed", patch_in, d)
    if config.variant == "A":
        affine("area_patch_embed", patch_in, d)
    if config.variant in ("A", "G"):
        for i, (_, k) in enumerate(config.categories):
            affine(f"geo.{i}", k, dh)
    if config.variant == "A":
        for i, (_, k) in enumerate(config.categories):
            affine(f"area_geo.{i}", k, dh)
    if config.learned_pos:
        shapes["pos_embed"] = (config.n_patches, d)
    for layer in range(config.n_blocks):
        pre = f"blocks.{layer}"
        norm(f"{pre}.norm1")
        if config.variant != "vit":
            norm(f"{pre}.norm_guidance")
        for role in ("wq", "wk", "wv", "wo"):
            affine(f"{pre}.attn.{role}", d, d)
        if config.gated:
            for i, (_, k) in enumerate(config.categories):
                affine(f"{pre}.attn.score.{i}.fc1", k, SCORE_HIDDEN)
                affine(f"{pre}.attn.score.{i}.fc2", SCORE_HIDDEN, 1)
        norm(f"{pre}.norm2")
        affine(f"{pre}.mlp.fc1", d, config.mlp_dim)
        affine(f"{pre}.mlp.fc2", config.mlp_dim, d)
    norm("norm_final")
    affine("head", d, config.n_outcomes)
    return shapes


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, tg.Tensor]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; norm gains 1."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif name == "pos_embed":
            data = sinusoidal_positions(config.grid_size, config.d_model)
        else:
            data = np.zeros(shape)
        params[name] = tg.Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def encode(batch: Batch, config: ModelConfig, params: Mapping[str, tg.Tensor],
           force_gates=None) -> tuple[tg.Tensor, list[AttentionDiagnostics]]:
    """Run the block stack; returns final tokens and per-layer diagnostics."""
    x, packet = build_input_and_guidance(batch, config, params)
    diags = []
    for layer in range(config.n_blocks):
        x, diag = guided_block(x, packet, subtree(params, f"blocks.{layer}"), config.n_heads,
                               head_weights_enabled=config.gated, gates=force_gates)
        diags.append(diag)
    return x, diags


def forward(batch: Batch | Sample, config: ModelConfig, params: Mapping[str, tg.Tensor],
            force_gates=None) -> tuple[tg.Tensor, list[AttentionDiagnostics]]:
    """Predictions ``[B, n_outcomes]`` plus per-layer attention/gate diagnostics."""
    if isinstance(batch, Sample):
        batch = collate([batch])
    tokens, diags = encode(batch, config, params, force_gates)
    pooled = tg.mean_pool_rows(tg.layer_norm(tokens, params["norm_final.gain"],
                                             params["norm_final.bias"], LN_EPS))
    pred = tg.linear(pooled, params["head.weight"], params["head.bias"])
    if config.target_scale is not None:
        pred = tg.mul(pred, tg.Tensor(np.broadcast_to(config.target_scale, pred.shape).copy()))
    if config.target_shift is not None:
        pred = tg.add(pred, tg.Tensor(np.asarray(config.target_shift, dtype=np.float64)))
    return pred, diags


def predict(batch: Batch | Sample, config: ModelConfig, params: Mapping[str, tg.Tensor]) -> np.ndarray:
    return forward(batch, config, params)[0].data


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, config: ModelConfig, params: Mapping[str, tg.Tensor],
                    extra: Mapping | None = None) -> None:
    """npz container: one array per parameter plus a JSON ``__meta__`` record."""
    meta = {"format_version": CHECKPOINT_VERSION, "config": config.to_dict(),
            "param_names": list(params), "extra": dict(extra or {})}
    arrays = {"__meta__": np.array(json.dumps(meta))}
    arrays.update({f"param:{k}": v.data for k, v in params.items()})
    # fixed entry timestamps keep the file byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, tg.Tensor], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[f"param:{k}"] for k in meta["param_names"]}
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('format_version')!r}, "
                              f"expected {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(meta["config"])
    expected = param_shapes(config)
    if {k: tuple(a.shape) for k, a in arrays.items()} != expected:
        raise CheckpointError(f"{path}: parameter set does not match its config")
    params = {k: tg.Tensor(arrays[k], requires_grad=True) for k in expected}
    return config, params, meta.get("extra", {})
