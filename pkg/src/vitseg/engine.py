"""Instrumented vision-transformer forward pass.

Layers are numbered 1..L in every public argument and result (layer_index 0
is the embedding output). The canonical strategy pipeline is::

    tokenize → layers 1..L-1 (standard or residual-upweighted) →
    abnormal-token replacement on the penultimate output (and on captured
    head features) → pseudo-mask refinement → final-layer variant → project

with each stage a no-op when its config block is disabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import LayerWeights, VitWeights
from .errors import ConfigError, ShapeError
from .imaging import resize_bicubic
from .kernels import as_f32, gelu, layer_norm, matmul, row_softmax
from .measures import detect_abnormal, detect_abnormal_rows
from .strategies import StrategyConfig, apply_she, atr, atr_rows, she_mask
from .types import AtrStats, HeadFeature, LayerTap, TokenSequence


@dataclass(frozen=True)
class TapRequest:
    """What forward() should capture: layer outputs by 1-based index (0 = the
    embedding output); head features / attention by 1-based (layer, head)."""

    layers: frozenset[int] = frozenset()
    heads: frozenset[tuple[int, int]] = frozenset()
    attention: frozenset[tuple[int, int]] = frozenset()

    @classmethod
    def of(cls, layers=(), heads=(), attention=()) -> "TapRequest":
        return cls(frozenset(layers), frozenset(tuple(h) for h in heads),
                   frozenset(tuple(h) for h in attention))


# ---------------------------------------------------------------------------
# tokenization


def interpolate_positions(pos_embed: np.ndarray, native: tuple[int, int],
                          grid: tuple[int, int]) -> np.ndarray:
    """Resample the patch-position table to a new grid; the [CLS] row is kept
    verbatim. Bicubic, matching mainstream checkpoint adaptation."""
    if grid == native:
        return pos_embed
    g_h, g_w = native
    spatial = pos_embed[1:].reshape(g_h, g_w, pos_embed.shape[1]).astype(np.float64)
    resized = resize_bicubic(spatial, grid[0], grid[1])
    flat = resized.reshape(grid[0] * grid[1], pos_embed.shape[1])
    return np.concatenate([pos_embed[:1].astype(np.float64), flat]).astype(np.float32)


def tokenize(image: np.ndarray, weights: VitWeights) -> TokenSequence:
    """Patchify + project an (H, W, 3) unit-range image, prepend [CLS], add
    positional terms, and apply the embedding-stage norm when present."""
    cfg = weights.config
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected H×W×3 image, got {image.shape}")
    h_pix, w_pix = image.shape[:2]
    p = cfg.patch_size
    if h_pix % p or w_pix % p:
        raise ShapeError(f"image {h_pix}×{w_pix} not divisible by patch size {p}")
    h, w = h_pix // p, w_pix // p
    # each patch flattens channel-major: (3, P, P) in C order
    blocks = (image.reshape(h, p, w, p, 3)
              .transpose(0, 2, 4, 1, 3)
              .reshape(h * w, 3 * p * p))
    embeds = matmul(blocks, weights.patch_proj.T) + weights.patch_bias
    tokens = np.concatenate([weights.class_token[None, :], embeds], axis=0)
    pos = interpolate_positions(weights.pos_embed, cfg.native_grid, (h, w))
    tokens = as_f32(tokens.astype(np.float64) + pos.astype(np.float64))
    if weights.pre_norm is not None:
        gain, bias = weights.pre_norm
        tokens = layer_norm(tokens, gain, bias, cfg.ln_eps)
    return TokenSequence.from_stacked(tokens, (h, w), layer_index=0)


# ---------------------------------------------------------------------------
# attention


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)  # (H, n, hd)


def _attention_rows(q: np.ndarray, k: np.ndarray, scale: float,
                    mode: str) -> np.ndarray:
    if mode == "qk":
        return row_softmax(as_f32(matmul(q, k.T).astype(np.float64) * scale))
    if mode == "qq+kk":
        a_q = row_softmax(as_f32(matmul(q, q.T).astype(np.float64) * scale))
        a_k = row_softmax(as_f32(matmul(k, k.T).astype(np.float64) * scale))
        return as_f32(a_q.astype(np.float64) + a_k.astype(np.float64))
    if mode == "identity":
        return np.eye(q.shape[0], dtype=np.float32)
    raise ConfigError(f"unknown attention mode {mode!r}")


def msa_forward(x, lw: LayerWeights, num_heads: int,
                capture_heads: frozenset[int] | set[int] = frozenset(),
                capture_attention: frozenset[int] | set[int] = frozenset(),
                attention_mode: str = "qk", layer_index: int = 0,
                ) -> tuple[np.ndarray, list[HeadFeature], dict[int, np.ndarray]]:
    """Multi-head self-attention on an already-normalized token matrix.

    Returns the full output (head sum plus output bias), the captured
    per-head features (each already carrying the output projection, bias
    excluded), and any captured attention matrices. ``capture_heads`` and
    ``capture_attention`` take 1-based head indices.
    """
    mat = x.stacked() if isinstance(x, TokenSequence) else np.asarray(x, dtype=np.float32)
    grid = x.grid if isinstance(x, TokenSequence) else None
    n, d = mat.shape
    if d % num_heads:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    head_dim = d // num_heads
    for h in set(capture_heads) | set(capture_attention):
        if not 1 <= h <= num_heads:
            raise ConfigError(f"head index {h} outside 1..{num_heads}")
    scale = 1.0 / np.sqrt(head_dim)
    q = _split_heads(matmul(mat, lw.w_q) + lw.b_q, num_heads)
    k = _split_heads(matmul(mat, lw.w_k) + lw.b_k, num_heads)
    v = _split_heads(matmul(mat, lw.w_v) + lw.b_v, num_heads)
    contexts = np.empty((num_heads, n, head_dim), dtype=np.float32)
    captured: list[HeadFeature] = []
    attn_out: dict[int, np.ndarray] = {}
    for h in range(num_heads):
        a = _attention_rows(q[h], k[h], scale, attention_mode)
        contexts[h] = matmul(a, v[h])
        if (h + 1) in capture_attention:
            attn_out[h + 1] = a
        if (h + 1) in capture_heads:
            w_o_slice = lw.w_o[h * head_dim:(h + 1) * head_dim, :]
            captured.append(HeadFeature(layer=layer_index, head=h + 1,
                                        features=matmul(contexts[h], w_o_slice)))
    merged = contexts.transpose(1, 0, 2).reshape(n, d)
    out = matmul(merged, lw.w_o) + lw.b_o
    return as_f32(out), captured, attn_out


# ---------------------------------------------------------------------------
# encoder layers


def _layer_step(mat: np.ndarray, lw: LayerWeights, cfg, *, alpha: float | None,
                capture_heads=frozenset(), capture_attention=frozenset(),
                layer_index: int = 0):
    """One encoder layer on the stacked token matrix. ``alpha=None`` is the
    plain update x + sub(x); otherwise residuals scale by (1+a) and the
    submodule outputs by (1-a)."""
    normed = layer_norm(mat, lw.norm1_gain, lw.norm1_bias, cfg.ln_eps)
    msa_out, captured, attn = msa_forward(
        normed, lw, cfg.heads, capture_heads=capture_heads,
        capture_attention=capture_attention, layer_index=layer_index)
    if alpha is None:
        mid = mat.astype(np.float64) + msa_out.astype(np.float64)
    else:
        mid = (1.0 + alpha) * mat.astype(np.float64) + (1.0 - alpha) * msa_out.astype(np.float64)
    mid32 = as_f32(mid)
    normed2 = layer_norm(mid32, lw.norm2_gain, lw.norm2_bias, cfg.ln_eps)
    hidden = gelu(matmul(normed2, lw.ffn_w1) + lw.ffn_b1)
    ffn_out = matmul(hidden, lw.ffn_w2) + lw.ffn_b2
    if alpha is None:
        out = mid32.astype(np.float64) + ffn_out.astype(np.float64)
    else:
        out = (1.0 + alpha) * mid32.astype(np.float64) + (1.0 - alpha) * ffn_out.astype(np.float64)
    return as_f32(out), captured, attn


def layer_forward(x: TokenSequence, lw: LayerWeights, *, alpha: float | None = None,
                  layer_index: int | None = None, cfg=None,
                  weights: VitWeights | None = None) -> TokenSequence:
    """Public single-layer step. ``cfg`` (or ``weights``) supplies head count
    and norm epsilon; ``alpha`` switches the residual-upweighted form."""
    if cfg is None:
        if weights is None:
            raise ConfigError("layer_forward needs cfg or weights")
        cfg = weights.config
    if alpha is not None and not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0,1], got {alpha}")
    idx = layer_index if layer_index is not None else x.layer_index + 1
    out, _, _ = _layer_step(x.stacked(), lw, cfg, alpha=alpha, layer_index=idx)
    return TokenSequence.from_stacked(out, x.grid, layer_index=idx)


_VARIANT_MODES = {
    "identity_no_ffn_no_residual": "identity",
    "sclip_qqkk": "qq+kk",
    "clearclip": "qk",
}


def final_layer_features(x: TokenSequence, lw: LayerWeights, variant: str,
                         cfg) -> np.ndarray:
    """Run the final layer under the chosen variant and return the patch rows
    (the [CLS] row attends everywhere but is dropped from the output)."""
    if variant == "vanilla":
        out = layer_forward(x, lw, cfg=cfg, layer_index=x.layer_index + 1)
        return out.patches
    if variant not in _VARIANT_MODES:
        raise ConfigError(f"unknown final-layer variant {variant!r}")
    normed = layer_norm(x.stacked(), lw.norm1_gain, lw.norm1_bias, cfg.ln_eps)
    out, _, _ = msa_forward(normed, lw, cfg.heads,
                            attention_mode=_VARIANT_MODES[variant],
                            layer_index=x.layer_index + 1)
    return out[1:]


def project(features: np.ndarray, weights: VitWeights) -> np.ndarray:
    """Final layer-norm then the visual projection, row by row."""
    cfg = weights.config
    normed = layer_norm(as_f32(features), weights.final_norm_gain,
                        weights.final_norm_bias, cfg.ln_eps)
    return matmul(normed, weights.visual_proj)


# ---------------------------------------------------------------------------
# full pipeline


def forward(image: np.ndarray, weights: VitWeights, strategy: StrategyConfig,
            taps: TapRequest | None = None,
            ) -> tuple[np.ndarray, LayerTap, AtrStats]:
    """Image → patch features in the text-aligned space, plus instrumentation.

    Pure function of its arguments: repeated calls are bit-identical.
    """
    cfg = weights.config
    strategy.validate_for_model(cfg.layers)
    taps = taps or TapRequest()
    tap = LayerTap()
    atr_stats = AtrStats()

    she_heads = strategy.she_heads()
    want_heads: dict[int, set[int]] = {}
    for layer, head in she_heads:
        want_heads.setdefault(layer, set()).add(head)
    for layer, head in taps.heads:
        want_heads.setdefault(layer, set()).add(head)
    want_attn: dict[int, set[int]] = {}
    for layer, head in taps.attention:
        want_attn.setdefault(layer, set()).add(head)

    x = tokenize(image, weights)
    if 0 in taps.layers:
        tap.tokens[0] = x

    she_feats: dict[tuple[int, int], HeadFeature] = {}
    mat = x.stacked()
    for layer in range(1, cfg.layers):
        if strategy.skip.enabled and strategy.skip.skip_from <= layer < strategy.skip.resume_at:
            continue
        alpha = (strategy.ssr.alpha
                 if strategy.ssr.enabled
                 and strategy.ssr.start_layer <= layer <= strategy.ssr.end_layer
                 else None)
        mat, captured, attn = _layer_step(
            mat, weights.layers[layer - 1], cfg, alpha=alpha,
            capture_heads=want_heads.get(layer, frozenset()),
            capture_attention=want_attn.get(layer, frozenset()),
            layer_index=layer)
        for feat in captured:
            key = (feat.layer, feat.head)
            if key in she_heads:
                she_feats[key] = feat
            if key in taps.heads:
                tap.heads[key] = feat
        for head, a in attn.items():
            tap.attention[(layer, head)] = a
        if layer in taps.layers:
            tap.tokens[layer] = TokenSequence.from_stacked(mat, x.grid, layer_index=layer)

    penult = TokenSequence.from_stacked(mat, x.grid, layer_index=cfg.layers - 1)

    if strategy.atr.enabled:
        criterion = strategy.atr.to_criterion()
        positions = detect_abnormal(penult, criterion)
        penult = atr(penult, positions, atr_stats)
        if strategy.atr.apply_to_heads and she_feats:
            for key, feat in list(she_feats.items()):
                rows = feat.patch_rows()
                if strategy.atr.head_detection == "self":
                    head_positions = detect_abnormal_rows(rows, criterion)
                else:
                    head_positions = positions
                cleaned = atr_rows(rows, penult.grid, head_positions, atr_stats)
                features = np.concatenate([feat.features[:1], cleaned], axis=0)
                she_feats[key] = HeadFeature(layer=feat.layer, head=feat.head,
                                             features=features)

    if strategy.she.enabled and she_heads:
        missing = [h for h in she_heads if h not in she_feats]
        if missing:
            raise ConfigError(
                f"she heads {missing} were never computed (layer skipped?)")
        ordered = [she_feats[h] for h in she_heads]
        mask = she_mask(ordered, strategy.she.beta, strategy.she.normalize_axis)
        penult = apply_she(penult, mask)

    feats = final_layer_features(penult, weights.layers[cfg.layers - 1],
                                 strategy.variant, cfg)
    projected = project(feats, weights)
    return projected, tap, atr_stats


class Engine:
    """Read-only weight holder; forward calls are independent and thread-safe."""

    def __init__(self, weights: VitWeights):
        self.weights = weights

    @property
    def config(self):
        return self.weights.config

    def tokenize(self, image: np.ndarray) -> TokenSequence:
        return tokenize(image, self.weights)

    def forward(self, image: np.ndarray, strategy: StrategyConfig,
                taps: TapRequest | None = None):
        return forward(image, self.weights, strategy, taps)
