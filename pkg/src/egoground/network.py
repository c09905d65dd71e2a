"""Grounding network: query selection, text modulation and a shared decoder.

Detection and grounding run the same decoder weights and the same box head;
only the scoring heads, the task heads and the two language modules differ.
The language modules are built to be exact identities at initialization:

* query modulation computes per-channel ``beta`` and ``gamma`` from the
  sentence embedding and applies ``beta * Q + gamma * sentence`` per query;
  the two MLPs start as constant 1 and constant 0, so step 0 equals the
  unmodulated path bit for bit.
* region attention attends the voxel features over the text tokens and adds
  the result residually; its output projection starts at zero, so step 0
  leaves the features untouched.  A small MLP on the residual output yields
  one spatial relevance logit per voxel.

The decoder is pre-norm: each layer applies query self-attention, cross
attention to text (skipped entirely for detection), cross attention to the
voxel features, then a feed-forward block, each behind its own layer norm
with a residual add.  There is no final layer norm, so a zero-layer decoder
feeds the initial queries straight to the heads.

Box regression predicts, per query, a center offset from the query's voxel
center, log extents, and sine/cosine pairs per angle; angles are recovered
with atan2, extents with exp, so decoded extents are always positive.
Query selection is not differentiated through; the scoring heads learn from
an auxiliary objective instead (see train).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    attention,
    concat,
    constant,
    gather_rows,
    init_attention,
    init_layer_norm,
    init_linear,
    init_mlp,
    layer_norm,
    linear,
    load_checkpoint,
    make_rng,
    mlp_apply,
    save_checkpoint,
)
from .boxes import Box9DoF
from .geometry import VoxelFeatureSet, init_fusion_params, positional_encoding

Array = np.ndarray

TASKS = ("detection", "grounding")


@dataclass
class ModelConfig:
    dim: int = 32
    layers: int = 2
    heads: int = 2
    num_classes: int = 6
    k_det: int = 32
    k_grd: int = 16
    text_dim: int = 16
    feat2d_dim: int = 16
    ffn_mult: int = 2

    def __post_init__(self):
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ValueError("dim must be positive and divisible by heads")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if min(self.k_det, self.k_grd, self.num_classes, self.text_dim,
               self.feat2d_dim, self.ffn_mult) < 1:
            raise ValueError("all size fields must be >= 1")

    @property
    def ffn_dim(self) -> int:
        return self.dim * self.ffn_mult


@dataclass
class TextEmbedding:
    tokens: Tensor    # (T, C) projected token features
    sentence: Tensor  # (1, C) mean of token rows


@dataclass
class QuerySet:
    embeddings: Tensor  # (K, C)
    positions: Array    # (K, 3) voxel centers
    scores: Array       # (K,) selection scores, non-increasing
    indices: Array      # (K,) source voxel indices


@dataclass
class DecoderOutput:
    boxes: list[Box9DoF]
    det_logits: Tensor | None   # (K, num_classes), detection only
    grd_logits: Tensor | None   # (K, 1), grounding only
    relevance: Tensor | None    # (N,) spatial relevance logits, grounding only
    centers: Tensor             # (K, 3)
    log_extents: Tensor         # (K, 3)
    sin_angles: Tensor          # (K, 3) normalized
    cos_angles: Tensor          # (K, 3) normalized
    positions: Array            # (K, 3) query voxel centers
    attention_map: Array | None = None  # (K, N) last-layer visual attention


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _mlp_sizes(cfg: ModelConfig, out: int) -> list[int]:
    return [cfg.dim, cfg.dim, out]


def init_model_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Create every learnable tensor; creation order is fixed for determinism."""
    store = ParamStore()
    rng = make_rng(seed, 100)
    init_fusion_params(store, cfg.feat2d_dim, cfg.feat2d_dim, cfg.dim, rng)
    init_linear(store, "text_proj", cfg.text_dim, cfg.dim, rng)

    init_mlp(store, "score_det", _mlp_sizes(cfg, cfg.num_classes), rng)
    init_mlp(store, "score_grd", _mlp_sizes(cfg, 1), rng)

    # identity at init: beta outputs exactly 1, gamma exactly 0
    init_mlp(store, "qim_beta", [cfg.dim, cfg.dim, cfg.dim], rng,
             zero_last=True, last_bias=1.0)
    init_mlp(store, "qim_gamma", [cfg.dim, cfg.dim, cfg.dim], rng,
             zero_last=True, last_bias=0.0)

    # identity at init: zeroed output projection kills the residual branch
    init_attention(store, "rag_att", cfg.dim, rng, zero_out=True)
    init_mlp(store, "relevance", _mlp_sizes(cfg, 1), rng)

    for i in range(cfg.layers):
        for ln in ("ln1", "ln2", "ln3", "ln4"):
            init_layer_norm(store, f"dec{i}.{ln}", cfg.dim)
        init_attention(store, f"dec{i}.self", cfg.dim, rng)
        init_attention(store, f"dec{i}.text", cfg.dim, rng)
        init_attention(store, f"dec{i}.vis", cfg.dim, rng)
        init_linear(store, f"dec{i}.ffn1", cfg.dim, cfg.ffn_dim, rng)
        init_linear(store, f"dec{i}.ffn2", cfg.ffn_dim, cfg.dim, rng)

    init_mlp(store, "head_box", _mlp_sizes(cfg, 12), rng)
    init_mlp(store, "head_det", _mlp_sizes(cfg, cfg.num_classes), rng)
    init_mlp(store, "head_grd", _mlp_sizes(cfg, 1), rng)
    return store


def save_model(store: ParamStore, cfg: ModelConfig, path: str | Path,
               extra: dict | None = None) -> None:
    payload = {"model_config": asdict(cfg)}
    if extra:
        payload.update(extra)
    save_checkpoint(store, path, extra=payload)


def load_model(path: str | Path) -> tuple[ParamStore, ModelConfig, dict]:
    store, extra = load_checkpoint(path)
    if "model_config" not in extra:
        raise ValueError(f"checkpoint {path} has no model_config entry")
    cfg = ModelConfig(**extra.pop("model_config"))
    return store, cfg, extra


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------


def sentence_embed(tokens: Tensor) -> Tensor:
    """Mean over token rows; (T, C) -> (1, C)."""
    if tokens.shape[0] < 1:
        raise ValueError("sentence embedding needs at least one token")
    return tokens.mean(axis=0, keepdims=True)


def embed_text(token_vectors: Array, store: ParamStore) -> TextEmbedding:
    """Project raw token vectors into model width and pool the sentence."""
    raw = np.asarray(token_vectors, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 1:
        raise ValueError(f"token vectors must be (T, text_dim) with T >= 1, got {raw.shape}")
    tokens = linear(constant(raw), store, "text_proj")
    return TextEmbedding(tokens=tokens, sentence=sentence_embed(tokens))


# ---------------------------------------------------------------------------
# Query selection
# ---------------------------------------------------------------------------


def scoring_logits(fused: VoxelFeatureSet, store: ParamStore, cfg: ModelConfig,
                   task: str) -> Tensor:
    """Per-voxel confidence logits: (N, num_classes) for detection, (N, 1) for grounding."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    name = "score_det" if task == "detection" else "score_grd"
    out = cfg.num_classes if task == "detection" else 1
    return mlp_apply(fused.features, store, name, _mlp_sizes(cfg, out))


def select_queries(fused: VoxelFeatureSet, k: int, task: str, store: ParamStore,
                   cfg: ModelConfig, logits: Tensor | None = None) -> QuerySet:
    """Top-k voxels by score; ties keep ascending voxel index.

    Selection indices are treated as constants; gradients flow into the
    selected voxel features and into the scoring head only through the
    logits tensor (pass it to the auxiliary objective).
    """
    n = len(fused)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} voxels")
    if logits is None:
        logits = scoring_logits(fused, store, cfg, task)
    scores = logits.data.max(axis=1)
    order = np.argsort(-scores, kind="stable")[:k]
    embeddings = gather_rows(fused.features, order) + constant(
        positional_encoding(fused.coords[order], cfg.dim))
    return QuerySet(embeddings=embeddings, positions=fused.coords[order],
                    scores=scores[order], indices=order)


# ---------------------------------------------------------------------------
# Language modules
# ---------------------------------------------------------------------------


def qim_modulate(queries: Tensor, sentence: Tensor, store: ParamStore,
                 cfg: ModelConfig) -> Tensor:
    """Channel-wise affine on queries, parameters predicted from the sentence."""
    if queries.shape[-1] != sentence.shape[-1]:
        raise ValueError(f"query width {queries.shape[-1]} != sentence width "
                         f"{sentence.shape[-1]}")
    beta = mlp_apply(sentence, store, "qim_beta", [cfg.dim] * 3)
    gamma = mlp_apply(sentence, store, "qim_gamma", [cfg.dim] * 3)
    return beta * queries + gamma * sentence


def rag_apply(fused: VoxelFeatureSet, text: TextEmbedding, store: ParamStore,
              cfg: ModelConfig) -> tuple[VoxelFeatureSet, Tensor]:
    """Text-conditioned residual refinement plus per-voxel relevance logits."""
    region = attention(fused.features, text.tokens, text.tokens, store, "rag_att",
                       heads=cfg.heads)
    refined = fused.features + region
    logits = mlp_apply(refined, store, "relevance", _mlp_sizes(cfg, 1))
    out = VoxelFeatureSet(coords=fused.coords, features=refined,
                          voxel_size=fused.voxel_size)
    return out, logits.reshape((len(fused),))


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


def _decode_boxes(raw: Tensor, positions: Array):
    offsets = raw[:, 0:3]
    centers = constant(positions) + offsets
    log_extents = raw[:, 3:6]
    sin_raw = raw[:, 6:9]
    cos_raw = raw[:, 9:12]
    norm = (sin_raw * sin_raw + cos_raw * cos_raw + 1e-12) ** 0.5
    sin_n = sin_raw / norm
    cos_n = cos_raw / norm
    angles = np.arctan2(sin_raw.data, cos_raw.data)
    extents = np.exp(log_extents.data)
    boxes = [Box9DoF(*centers.data[i], *extents[i], *angles[i])
             for i in range(raw.shape[0])]
    return boxes, centers, log_extents, sin_n, cos_n


def decoder_forward(features: VoxelFeatureSet, text: TextEmbedding | None,
                    queries: QuerySet, store: ParamStore, cfg: ModelConfig,
                    task: str) -> DecoderOutput:
    """Run the shared decoder and the task heads.

    Detection skips the text cross-attention sublayer; grounding requires
    ``text`` and should receive region-refined features and modulated
    queries from the caller.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if queries.embeddings.shape[-1] != cfg.dim:
        raise ValueError(f"query width {queries.embeddings.shape[-1]} != model dim {cfg.dim}")
    if features.features.shape[-1] != cfg.dim:
        raise ValueError(f"feature width {features.features.shape[-1]} != model dim {cfg.dim}")
    if task == "grounding" and text is None:
        raise ValueError("grounding requires text")

    q = queries.embeddings
    attn_map = None
    for i in range(cfg.layers):
        h = layer_norm(q, store, f"dec{i}.ln1")
        q = q + attention(h, h, h, store, f"dec{i}.self", heads=cfg.heads)
        if task == "grounding":
            h = layer_norm(q, store, f"dec{i}.ln2")
            q = q + attention(h, text.tokens, text.tokens, store, f"dec{i}.text",
                              heads=cfg.heads)
        h = layer_norm(q, store, f"dec{i}.ln3")
        vis, w = attention(h, features.features, features.features, store,
                           f"dec{i}.vis", heads=cfg.heads, return_weights=True)
        q = q + vis
        if i == cfg.layers - 1:
            attn_map = w.mean(axis=0)
        h = layer_norm(q, store, f"dec{i}.ln4")
        q = q + linear(linear(h, store, f"dec{i}.ffn1").relu(), store, f"dec{i}.ffn2")

    raw = mlp_apply(q, store, "head_box", _mlp_sizes(cfg, 12))
    boxes, centers, log_extents, sin_n, cos_n = _decode_boxes(raw, queries.positions)
    det_logits = grd_logits = None
    if task == "detection":
        det_logits = mlp_apply(q, store, "head_det", _mlp_sizes(cfg, cfg.num_classes))
    else:
        grd_logits = mlp_apply(q, store, "head_grd", _mlp_sizes(cfg, 1))
    return DecoderOutput(boxes=boxes, det_logits=det_logits, grd_logits=grd_logits,
                         relevance=None, centers=centers, log_extents=log_extents,
                         sin_angles=sin_n, cos_angles=cos_n,
                         positions=queries.positions, attention_map=attn_map)


def decoder_parameter_names(cfg: ModelConfig) -> set[str]:
    """Names of the parameters both tasks must share (decoder + box head)."""
    names = set()
    for i in range(cfg.layers):
        for ln in ("ln1", "ln2", "ln3", "ln4"):
            names.update({f"dec{i}.{ln}.g", f"dec{i}.{ln}.b"})
        for sub in ("self", "text", "vis"):
            for part in ("q", "k", "v", "o"):
                names.update({f"dec{i}.{sub}.{part}.w", f"dec{i}.{sub}.{part}.b"})
        names.update({f"dec{i}.ffn1.w", f"dec{i}.ffn1.b", f"dec{i}.ffn2.w", f"dec{i}.ffn2.b"})
    for j in (0, 1):
        names.update({f"head_box.{j}.w", f"head_box.{j}.b"})
    return names
