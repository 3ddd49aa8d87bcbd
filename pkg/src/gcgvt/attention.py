"""Guided attention: queries from a guidance stream, keys and values from the input,
and one sigmoid gate per head computed from that head's geospatial category.

Parameters are plain ``{name: Tensor}`` mappings. Per-head query/key/value maps
are stored as column blocks of one ``[d_model, d_model]`` matrix per role; head
``i`` owns columns ``i*d_head:(i+1)*d_head``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensorgrad as tg
from .geoembed import ConfigurationError

Params = Mapping[str, tg.Tensor]

SCORE_HIDDEN = 32
LN_EPS = 1e-5


@dataclass
class GuidancePacket:
    """Guidance tokens plus the raw pooled category vectors that drive the gates."""

    tokens: tg.Tensor
    raw_categories: Sequence[tg.Tensor]


@dataclass
class AttentionDiagnostics:
    attention: np.ndarray  # [..., H, n_G, n_I], pre-gating
    gates: np.ndarray  # [..., H]


def subtree(params: Params, prefix: str) -> dict[str, tg.Tensor]:
    prefix = prefix if prefix.endswith(".") else prefix + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def head_weights(raw_categories: Sequence[tg.Tensor], params: Params) -> tg.Tensor:
    """Gate vector ``H = sigmoid(score(raw))``; entry ``i`` sees category ``i`` only.

    ``params`` holds ``score.{i}.fc1.*`` and ``score.{i}.fc2.*`` for each category.
    """
    scores = []
    for i, raw in enumerate(raw_categories):
        try:
            w1, b1 = params[f"score.{i}.fc1.weight"], params[f"score.{i}.fc1.bias"]
            w2, b2 = params[f"score.{i}.fc2.weight"], params[f"score.{i}.fc2.bias"]
        except KeyError as exc:
            raise ConfigurationError(f"no score network for category {i}") from exc
        if raw.shape[-1] != w1.shape[0]:
            raise ConfigurationError(
                f"category {i}: {raw.shape[-1]} variables, score network expects {w1.shape[0]}")
        hidden = tg.gelu(tg.linear(raw, w1, b1))
        scores.append(tg.linear(hidden, w2, b2))
    if f"score.{len(raw_categories)}.fc1.weight" in params:
        raise ConfigurationError("more score networks than guidance categories")
    return tg.sigmoid(tg.concat_last_axis(scores))


def _split_heads(x: tg.Tensor, n_heads: int) -> tg.Tensor:
    d = x.shape[-1]
    return tg.swapaxes(tg.reshape(x, x.shape[:-1] + (n_heads, d // n_heads)), -3, -2)


def _merge_heads(x: tg.Tensor) -> tg.Tensor:
    x = tg.swapaxes(x, -3, -2)
    return tg.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _constant_gates(values, lead: tuple[int, ...], n_heads: int) -> tg.Tensor:
    g = np.asarray(values, dtype=np.float64)
    if g.shape[-1] != n_heads:
        raise ConfigurationError(f"{g.shape[-1]} forced gates for {n_heads} heads")
    return tg.Tensor(np.broadcast_to(g, lead + (n_heads,)).copy())


def guided_attention(x_input: tg.Tensor, guidance: tg.Tensor, params: Params, n_heads: int,
                     raw_categories: Sequence[tg.Tensor] | None = None,
                     gates=None) -> tuple[tg.Tensor, AttentionDiagnostics]:
    """Gated multi-head cross-attention.

    Per head ``i``: ``h_i * softmax(Q_i K_i^T / sqrt(d_head)) V_i`` with ``Q`` from
    ``guidance`` and ``K, V`` from ``x_input``; heads are concatenated and passed
    through the output map. Gates come from ``gates`` if given, else from the score
    networks on ``raw_categories``, else are all one.
    """
    if x_input.shape != guidance.shape:
        raise tg.ShapeError(f"guided_attention: input {x_input.shape} and guidance "
                            f"{guidance.shape} must have equal token counts and width")
    d_model = x_input.shape[-1]
    if d_model % n_heads:
        raise ConfigurationError(f"d_model={d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    lead = x_input.shape[:-2]

    q = _split_heads(tg.linear(guidance, params["wq.weight"], params["wq.bias"]), n_heads)
    k = _split_heads(tg.linear(x_input, params["wk.weight"], params["wk.bias"]), n_heads)
    v = _split_heads(tg.linear(x_input, params["wv.weight"], params["wv.bias"]), n_heads)
    logits = tg.mul_scalar(tg.matmul(q, tg.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_head))
    attn = tg.softmax_rows(logits)
    heads = tg.matmul(attn, v)

    if gates is not None:
        h = _constant_gates(gates, lead, n_heads)
    elif raw_categories is not None:
        if len(raw_categories) != n_heads:
            raise ConfigurationError(f"{len(raw_categories)} categories for {n_heads} heads")
        h = head_weights(raw_categories, params)
    else:
        h = _constant_gates(np.ones(n_heads), lead, n_heads)

    out = tg.linear(_merge_heads(tg.gate_heads(heads, h)), params["wo.weight"], params["wo.bias"])
    return out, AttentionDiagnostics(attn.data, h.data)


def mlp(x: tg.Tensor, params: Params) -> tg.Tensor:
    hidden = tg.gelu(tg.linear(x, params["fc1.weight"], params["fc1.bias"]))
    return tg.linear(hidden, params["fc2.weight"], params["fc2.bias"])


def _norm(x: tg.Tensor, params: Params, name: str) -> tg.Tensor:
    return tg.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"], LN_EPS)


def guided_block(x: tg.Tensor, packet: GuidancePacket | None, params: Params, n_heads: int,
                 head_weights_enabled: bool = True,
                 gates=None) -> tuple[tg.Tensor, AttentionDiagnostics]:
    """Pre-norm residual block with guided attention followed by an MLP.

    ``packet=None`` turns the block into plain self-attention (queries from the
    normalised input, gates fixed to one). Guidance tokens get their own norm.
    """
    normed = _norm(x, params, "norm1")
    attn_params = subtree(params, "attn")
    if packet is None:
        attn_out, diag = guided_attention(normed, normed, attn_params, n_heads, gates=gates)
    else:
        guidance = _norm(packet.tokens, params, "norm_guidance")
        raw = packet.raw_categories if head_weights_enabled else None
        attn_out, diag = guided_attention(normed, guidance, attn_params, n_heads,
                                          raw_categories=raw, gates=gates)
    x = tg.add(x, attn_out)
    x = tg.add(x, mlp(_norm(x, params, "norm2"), subtree(params, "mlp")))
    return x, diag
