"""Knowledge enhancement: dual-bank neighbors to enhanced representations.

Per patch the pipeline finds its nearest normal and abnormal bank rows,
forms signed residuals, optionally adds scaled dot-product cross-attention
(neighbor rows as queries; keys/values embedded from the patch features),
projects feature and knowledge through one shared affine layer, and
concatenates the blocks channelwise.

Forward/backward pairs live here because the projection and attention
embeddings are trainable; the backward path treats patches, neighbor rows
and bank contents as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmad.banks import MemoryBank, nearest_batch
from dmad.errors import NumericError, ValidationError
from dmad.features import FeatureGrid


@dataclass
class KnowledgeMode:
    """Selects which knowledge terms feed the representation.

    ``use_attention`` is the mode-dependent toggle (on for unsupervised, off
    for semi-supervised by default); ``use_dist`` exists for the ablation grid
    and stays on in both standard modes.
    """

    use_attention: bool
    use_dist: bool = True

    def __post_init__(self) -> None:
        if not (self.use_attention or self.use_dist):
            raise ValidationError("at least one of use_dist/use_attention must be enabled")


@dataclass
class AttentionParams:
    """Key/value embedding maps for cross-attention. ``shared`` ties value to key."""

    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    shared: bool = False

    def __post_init__(self) -> None:
        for name in ("w_k", "b_k", "w_v", "b_v"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValidationError(f"attention parameter {name} contains non-finite values")
            setattr(self, name, arr)
        c = self.w_k.shape[0]
        if self.w_k.shape != (c, c) or self.w_v.shape != (c, c):
            raise ValidationError("attention weight matrices must be square and equal-sized")
        if self.b_k.shape != (c,) or self.b_v.shape != (c,):
            raise ValidationError("attention bias shapes must match the channel count")


@dataclass
class ProjectionParams:
    """Single shared affine layer applied to feature and knowledge blocks."""

    w_p: np.ndarray
    b_p: np.ndarray

    def __post_init__(self) -> None:
        self.w_p = np.ascontiguousarray(self.w_p, dtype=np.float64)
        self.b_p = np.ascontiguousarray(self.b_p, dtype=np.float64)
        c = self.w_p.shape[0]
        if self.w_p.shape != (c, c) or self.b_p.shape != (c,):
            raise ValidationError("projection shapes must be (c, c) and (c,)")
        if not (np.isfinite(self.w_p).all() and np.isfinite(self.b_p).all()):
            raise ValidationError("projection parameters contain non-finite values")


@dataclass
class EnhancedRepresentation:
    """Channelwise concatenation of projected feature and knowledge blocks.

    Block order is (feature, normal knowledge[, abnormal knowledge]); width is
    ``blocks * c``.
    """

    c: int
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValidationError(f"representation must be 2-D, got shape {self.data.shape}")
        if self.c < 1 or self.data.shape[1] % self.c != 0:
            raise ValidationError(
                f"width {self.data.shape[1]} is not a multiple of channel count {self.c}"
            )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def blocks(self) -> int:
        return self.data.shape[1] // self.c


# -- elementary operations ------------------------------------------------------


def knowledge_distance(patches: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Signed residual patches - neighbors, one row per patch."""
    patches = np.asarray(patches, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if patches.shape != neighbors.shape:
        raise ValidationError(f"shape mismatch: {patches.shape} vs {neighbors.shape}")
    return patches - neighbors


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_attention(neighbors: np.ndarray, patches: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Scaled dot-product attention with neighbor rows as queries.

    Keys and values are affine embeddings of the patch features; logits are
    ``neighbors @ K.T / sqrt(c)`` with a max-subtracted row softmax.
    """
    out, _ = _attention_forward(neighbors, patches, params)
    return out


def _attention_forward(
    neighbors: np.ndarray, patches: np.ndarray, params: AttentionParams
) -> tuple[np.ndarray, dict]:
    neighbors = np.asarray(neighbors, dtype=np.float64)
    patches = np.asarray(patches, dtype=np.float64)
    if neighbors.shape != patches.shape:
        raise ValidationError(f"shape mismatch: {neighbors.shape} vs {patches.shape}")
    if neighbors.ndim != 2 or neighbors.shape[0] < 1:
        raise ValidationError("attention requires at least one patch row")
    c = patches.shape[1]
    w_k = params.w_k.astype(np.float64)
    b_k = params.b_k.astype(np.float64)
    if params.shared:
        w_v, b_v = w_k, b_k
    else:
        w_v = params.w_v.astype(np.float64)
        b_v = params.b_v.astype(np.float64)
    keys = patches @ w_k.T + b_k
    values = patches @ w_v.T + b_v
    logits = (neighbors @ keys.T) / np.sqrt(c)
    if not np.isfinite(logits).all():
        bad = int(np.argwhere(~np.isfinite(logits).all(axis=1))[0, 0])
        raise NumericError(f"non-finite attention logits at row {bad}")
    weights = _softmax_rows(logits)
    out = weights @ values
    if not np.isfinite(out).all():
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0, 0])
        raise NumericError(f"non-finite attention output at row {bad}")
    cache = {
        "neighbors": neighbors,
        "patches": patches,
        "keys": keys,
        "values": values,
        "weights": weights,
        "scale": 1.0 / np.sqrt(c),
    }
    return out, cache


def _attention_backward(d_out: np.ndarray, cache: dict, params: AttentionParams) -> dict[str, np.ndarray]:
    """Gradients of the attention output w.r.t. the embedding parameters."""
    weights = cache["weights"]
    values = cache["values"]
    patches = cache["patches"]
    neighbors = cache["neighbors"]

    d_values = weights.T @ d_out
    d_weights = d_out @ values.T
    d_logits = weights * (d_weights - np.sum(d_weights * weights, axis=1, keepdims=True))
    d_keys = cache["scale"] * (d_logits.T @ neighbors)

    grads = {
        "w_k": d_keys.T @ patches,
        "b_k": d_keys.sum(axis=0),
    }
    d_wv = d_values.T @ patches
    d_bv = d_values.sum(axis=0)
    if params.shared:
        grads["w_k"] += d_wv
        grads["b_k"] += d_bv
    else:
        grads["w_v"] = d_wv
        grads["b_v"] = d_bv
    return grads


def knowledge(
    dist: np.ndarray | None, attn: np.ndarray | None, mode: KnowledgeMode
) -> np.ndarray:
    """Combine the enabled knowledge terms (sum when both are on)."""
    if mode.use_attention != (attn is not None):
        raise ValidationError("attention term presence must match mode.use_attention")
    if mode.use_dist != (dist is not None):
        raise ValidationError("distance term presence must match mode.use_dist")
    if dist is not None and attn is not None:
        if dist.shape != attn.shape:
            raise ValidationError(f"shape mismatch: {dist.shape} vs {attn.shape}")
        return dist + attn
    return dist if dist is not None else attn


def _project_forward(x: np.ndarray, proj: ProjectionParams) -> np.ndarray:
    return x @ proj.w_p.T.astype(np.float64) + proj.b_p.astype(np.float64)


def enhance(
    patches: np.ndarray,
    k_n: np.ndarray,
    k_a: np.ndarray | None,
    proj: ProjectionParams,
) -> EnhancedRepresentation:
    """Project feature and knowledge blocks with shared weights and concatenate."""
    patches = np.asarray(patches, dtype=np.float64)
    blocks = [patches, np.asarray(k_n, dtype=np.float64)]
    if k_a is not None:
        blocks.append(np.asarray(k_a, dtype=np.float64))
    shape = blocks[0].shape
    for b in blocks[1:]:
        if b.shape != shape:
            raise ValidationError(f"block shape mismatch: {b.shape} vs {shape}")
    if shape[1] != proj.w_p.shape[0]:
        raise ValidationError(
            f"channel count {shape[1]} does not match projection size {proj.w_p.shape[0]}"
        )
    projected = [_project_forward(b, proj) for b in blocks]
    return EnhancedRepresentation(c=shape[1], data=np.concatenate(projected, axis=1))


# -- training-graph forward/backward --------------------------------------------


def enhance_forward(
    patches: np.ndarray,
    neighbors_normal: np.ndarray,
    neighbors_abnormal: np.ndarray | None,
    proj: ProjectionParams,
    attn: AttentionParams | None,
    mode: KnowledgeMode,
) -> tuple[EnhancedRepresentation, dict]:
    """Enhancement forward pass that records caches for the backward pass."""
    patches = np.asarray(patches, dtype=np.float64)
    attn_cache = None
    a_n = a_a = None
    if mode.use_attention:
        if attn is None:
            raise ValidationError("mode.use_attention requires attention parameters")
        a_n, attn_cache = _attention_forward(neighbors_normal, patches, attn)
        if neighbors_abnormal is not None:
            logits_a = (np.asarray(neighbors_abnormal, dtype=np.float64) @ attn_cache["keys"].T) * attn_cache["scale"]
            weights_a = _softmax_rows(logits_a)
            a_a = weights_a @ attn_cache["values"]
            attn_cache["neighbors_abnormal"] = np.asarray(neighbors_abnormal, dtype=np.float64)
            attn_cache["weights_abnormal"] = weights_a

    d_n = knowledge_distance(patches, neighbors_normal) if mode.use_dist else None
    k_n = knowledge(d_n, a_n, mode)
    k_a = None
    if neighbors_abnormal is not None:
        d_a = knowledge_distance(patches, neighbors_abnormal) if mode.use_dist else None
        k_a = knowledge(d_a, a_a, mode)

    rep = enhance(patches, k_n, k_a, proj)
    cache = {
        "proj_inputs": [patches, k_n] + ([k_a] if k_a is not None else []),
        "attn_cache": attn_cache,
        "mode": mode,
        "attn": attn,
        "proj": proj,
    }
    return rep, cache


def enhance_backward(d_rep: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
    """Accumulate projection and attention gradients from a representation grad."""
    proj: ProjectionParams = cache["proj"]
    mode: KnowledgeMode = cache["mode"]
    inputs = cache["proj_inputs"]
    c = proj.w_p.shape[0]
    w_p = proj.w_p.astype(np.float64)

    grads: dict[str, np.ndarray] = {
        "proj.w": np.zeros((c, c)),
        "proj.b": np.zeros(c),
    }
    d_blocks = []
    for j, x in enumerate(inputs):
        d_y = d_rep[:, j * c : (j + 1) * c]
        grads["proj.w"] += d_y.T @ x
        grads["proj.b"] += d_y.sum(axis=0)
        d_blocks.append(d_y @ w_p)

    if mode.use_attention:
        attn: AttentionParams = cache["attn"]
        attn_cache = cache["attn_cache"]
        # Knowledge blocks pass gradients to the attention term unchanged
        # (k = d + a or k = a; the residual d is constant w.r.t. parameters).
        d_a_n = d_blocks[1]
        agrads = _attention_backward(d_a_n, attn_cache, attn)
        if len(inputs) == 3 and "weights_abnormal" in attn_cache:
            weights_a = attn_cache["weights_abnormal"]
            values = attn_cache["values"]
            patches = attn_cache["patches"]
            d_a_a = d_blocks[2]
            d_values = weights_a.T @ d_a_a
            d_weights = d_a_a @ values.T
            d_logits = weights_a * (d_weights - np.sum(d_weights * weights_a, axis=1, keepdims=True))
            d_keys = attn_cache["scale"] * (d_logits.T @ attn_cache["neighbors_abnormal"])
            agrads["w_k"] += d_keys.T @ patches
            agrads["b_k"] += d_keys.sum(axis=0)
            d_wv = d_values.T @ patches
            d_bv = d_values.sum(axis=0)
            if attn.shared:
                agrads["w_k"] += d_wv
                agrads["b_k"] += d_bv
            else:
                agrads["w_v"] += d_wv
                agrads["b_v"] += d_bv
        for name, g in agrads.items():
            grads[f"attn.{name}"] = g
    return grads


# -- full pipeline ----------------------------------------------------------------


def enhance_pipeline(
    source: FeatureGrid | np.ndarray,
    normal_bank: MemoryBank,
    abnormal_bank: MemoryBank | None,
    proj: ProjectionParams,
    attn: AttentionParams | None,
    mode: KnowledgeMode,
) -> EnhancedRepresentation:
    """Run nearest-neighbor lookup, knowledge and enhancement for one patch set."""
    rep, _ = enhance_pipeline_forward(source, normal_bank, abnormal_bank, proj, attn, mode)
    return rep


def enhance_pipeline_forward(
    source: FeatureGrid | np.ndarray,
    normal_bank: MemoryBank,
    abnormal_bank: MemoryBank | None,
    proj: ProjectionParams,
    attn: AttentionParams | None,
    mode: KnowledgeMode,
) -> tuple[EnhancedRepresentation, dict | None]:
    patches = source.patches if isinstance(source, FeatureGrid) else np.asarray(source)
    patches = patches.astype(np.float64)
    if patches.ndim != 2:
        raise ValidationError(f"patch matrix must be 2-D, got shape {patches.shape}")
    if patches.shape[1] != normal_bank.c:
        raise ValidationError(
            f"patch channels {patches.shape[1]} do not match bank channels {normal_bank.c}"
        )
    blocks = 2 if abnormal_bank is None else 3
    if patches.shape[0] == 0:
        return EnhancedRepresentation(c=normal_bank.c, data=np.zeros((0, blocks * normal_bank.c))), None
    _, rows_n = nearest_batch(normal_bank, patches)
    rows_a = None
    if abnormal_bank is not None:
        _, rows_a = nearest_batch(abnormal_bank, patches)
    return enhance_forward(patches, rows_n.astype(np.float64), None if rows_a is None else rows_a.astype(np.float64), proj, attn, mode)
