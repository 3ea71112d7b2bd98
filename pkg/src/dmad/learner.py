"""Trainable anomaly scorer: hinge loss, feature augmentation, AdamW, training.

A training step concatenates the batch's normal enhanced rows, their
noise-augmented pseudo negatives and (semi-supervised) the filtered abnormal
rows into one MLP batch, evaluates the three-part hinge loss, backpropagates
through the MLP, projection and attention embeddings, and applies one
decoupled-weight-decay adaptive-moment update. Nearest-neighbor selections and
bank contents are constants; no gradient flows into the banks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from dmad import features as fs
from dmad.banks import DualMemoryBank, MemoryBank, Mode, nearest_batch
from dmad.enhance import (
    AttentionParams,
    EnhancedRepresentation,
    KnowledgeMode,
    ProjectionParams,
    enhance_backward,
    enhance_forward,
)
from dmad.errors import NumericError, ValidationError
from dmad.mlp import MlpParams, apply_running_stats, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger("dmad.learner")


@dataclass
class LossConfig:
    lambda1: float
    lambda2: float
    margin: float = 0.5

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass
class AugmentConfig:
    noise_std: float = 0.015
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 48
    batch_size: int = 32
    seed: int = 0
    mode: Mode = "unsupervised"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.mode not in ("unsupervised", "semi_supervised"):
            raise ValidationError(f"unknown mode {self.mode!r}")


@dataclass
class ModelParams:
    """All trainable tensors plus the knowledge-mode switches."""

    proj: ProjectionParams
    attn: AttentionParams
    mlp: MlpParams
    knowledge: KnowledgeMode

    def named_params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "proj.w": self.proj.w_p,
            "proj.b": self.proj.b_p,
            "attn.w_k": self.attn.w_k,
            "attn.b_k": self.attn.b_k,
        }
        if not self.attn.shared:
            out["attn.w_v"] = self.attn.w_v
            out["attn.b_v"] = self.attn.b_v
        for i, blk in enumerate(self.mlp.blocks):
            out[f"mlp.block{i}.w"] = blk.w
            out[f"mlp.block{i}.b"] = blk.b
            out[f"mlp.block{i}.gamma"] = blk.gamma
            out[f"mlp.block{i}.beta"] = blk.beta
        out["mlp.head.w"] = self.mlp.head_w
        out["mlp.head.b"] = self.mlp.head_b
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        value32 = np.ascontiguousarray(value, dtype=np.float64)
        if name == "proj.w":
            self.proj.w_p = value32
        elif name == "proj.b":
            self.proj.b_p = value32
        elif name == "attn.w_k":
            self.attn.w_k = value32
        elif name == "attn.b_k":
            self.attn.b_k = value32
        elif name == "attn.w_v":
            self.attn.w_v = value32
        elif name == "attn.b_v":
            self.attn.b_v = value32
        elif name == "mlp.head.w":
            self.mlp.head_w = value32
        elif name == "mlp.head.b":
            self.mlp.head_b = value32.reshape(())
        elif name.startswith("mlp.block"):
            idx, attr = name[len("mlp.block") :].split(".")
            setattr(self.mlp.blocks[int(idx)], attr, value32)
        else:
            raise ValidationError(f"unknown parameter name {name!r}")


def init_model(
    c: int,
    knowledge: KnowledgeMode,
    seed: int,
    *,
    n_blocks: int = 4,
    blocks_per_rep: int = 3,
    shared_attention: bool = False,
) -> ModelParams:
    """Fresh trainable parameters for channel count ``c``.

    The projection starts at identity so the raw residual signal passes
    through unchanged before training; attention embeddings use Xavier-scaled
    noise; the MLP width equals ``blocks_per_rep * c``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
    scale = 1.0 / np.sqrt(c)
    proj = ProjectionParams(w_p=np.eye(c), b_p=np.zeros(c))
    attn = AttentionParams(
        w_k=rng.normal(0.0, scale, size=(c, c)),
        b_k=np.zeros(c),
        w_v=rng.normal(0.0, scale, size=(c, c)),
        b_v=np.zeros(c),
        shared=shared_attention,
    )
    mlp = init_mlp(blocks_per_rep * c, n_blocks, rng)
    return ModelParams(proj=proj, attn=attn, mlp=mlp, knowledge=knowledge)


# -- hinge loss -----------------------------------------------------------------


def hinge_loss(
    psi_normal: np.ndarray,
    psi_pseudo: np.ndarray | None,
    psi_abnormal: np.ndarray | None,
    cfg: LossConfig,
) -> float:
    """Three-part margin loss; each term is mean-reduced over its own set."""
    loss, _, _ = _hinge_forward(psi_normal, psi_pseudo, psi_abnormal, cfg)
    return float(loss)


def _hinge_forward(
    psi_normal: np.ndarray,
    psi_pseudo: np.ndarray | None,
    psi_abnormal: np.ndarray | None,
    cfg: LossConfig,
) -> tuple[float, tuple[float, float, float], dict]:
    psi_normal = np.asarray(psi_normal, dtype=np.float64)
    if psi_normal.size == 0:
        raise ValidationError("normal score set must be nonempty")
    if cfg.lambda2 > 0 and psi_abnormal is None:
        raise ValidationError("lambda2 > 0 requires abnormal scores")
    if cfg.lambda2 == 0 and psi_abnormal is not None:
        raise ValidationError("abnormal scores supplied but lambda2 == 0")

    margin = cfg.margin

    def term(values: np.ndarray | None, sign: float) -> tuple[float, np.ndarray | None]:
        if values is None or values.size == 0:
            return 0.0, None
        values = np.asarray(values, dtype=np.float64)
        active = (margin + sign * values) > 0
        return float(np.maximum(0.0, margin + sign * values).mean()), active

    term_n, active_n = term(psi_normal, -1.0)
    term_p, active_p = term(psi_pseudo, +1.0)
    term_a, active_a = term(psi_abnormal, +1.0)
    loss = term_n + cfg.lambda1 * term_p + cfg.lambda2 * term_a
    cache = {
        "active_n": active_n,
        "active_p": active_p,
        "active_a": active_a,
        "n_n": psi_normal.size,
        "n_p": 0 if psi_pseudo is None else np.asarray(psi_pseudo).size,
        "n_a": 0 if psi_abnormal is None else np.asarray(psi_abnormal).size,
        "cfg": cfg,
    }
    return loss, (term_n, term_p, term_a), cache


def _hinge_backward(cache: dict) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    cfg: LossConfig = cache["cfg"]
    d_n = -(cache["active_n"].astype(np.float64)) / cache["n_n"]
    d_p = None
    if cache["n_p"]:
        d_p = cfg.lambda1 * cache["active_p"].astype(np.float64) / cache["n_p"]
    d_a = None
    if cache["n_a"]:
        d_a = cfg.lambda2 * cache["active_a"].astype(np.float64) / cache["n_a"]
    return d_n, d_p, d_a


# -- feature augmentation ---------------------------------------------------------


def gaussian_augment(rep: EnhancedRepresentation, cfg: AugmentConfig) -> EnhancedRepresentation:
    """Pseudo negatives: the representation plus i.i.d. Gaussian noise."""
    rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, cfg.noise_std, size=rep.data.shape)
    return EnhancedRepresentation(c=rep.c, data=rep.data + noise)


# -- optimizer ---------------------------------------------------------------------


def _group_of(name: str) -> str:
    return "mlp" if name.startswith("mlp.") else "attn_proj"


@dataclass
class OptimizerState:
    """Adaptive-moment state with decoupled per-group weight decay."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: dict[str, float] = field(default_factory=lambda: {"mlp": 2e-4, "attn_proj": 1e-4})
    weight_decay: dict[str, float] = field(default_factory=lambda: {"mlp": 1e-5, "attn_proj": 0.0})
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    apply: Callable[[str, np.ndarray], None] | None = None,
) -> None:
    """One AdamW update; parameters lacking a gradient this step are skipped.

    Decay is decoupled: each parameter shrinks by lr*wd*param before the
    bias-corrected moment term is subtracted. Updated float32 values are
    written back through ``apply(name, value)``.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        if name not in grads:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        if name not in state.moments:
            state.moments[name] = (
                np.zeros(p.shape, dtype=np.float32),
                np.zeros(p.shape, dtype=np.float32),
            )
        m32, v32 = state.moments[name]
        m = state.beta1 * m32.astype(np.float64) + (1 - state.beta1) * g
        v = state.beta2 * v32.astype(np.float64) + (1 - state.beta2) * g * g
        group = _group_of(name)
        lr = state.lr[group]
        wd = state.weight_decay[group]
        p64 = p.astype(np.float64)
        if wd:
            p64 = p64 - lr * wd * p64
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p64 = p64 - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.moments[name] = (
            np.asarray(m, dtype=np.float32).reshape(p.shape),
            np.asarray(v, dtype=np.float32).reshape(p.shape),
        )
        if apply is not None:
            apply(name, p64)
        else:
            p[...] = p64


# -- training step -------------------------------------------------------------------


@dataclass
class StepInputs:
    """Constant per-step tensors: patches and their nearest bank rows."""

    normal: list[tuple[np.ndarray, np.ndarray, np.ndarray | None]]
    abnormal: list[tuple[np.ndarray, np.ndarray, np.ndarray | None]] = field(default_factory=list)


def step_loss_and_grads(
    model: ModelParams,
    inputs: StepInputs,
    loss_cfg: LossConfig,
    noise: np.ndarray | None,
) -> tuple[float, tuple[float, float, float], dict[str, np.ndarray], list]:
    """Forward + backward for one optimizer step over precomputed inputs.

    ``noise`` must match the stacked normal-representation shape; None skips
    the pseudo-negative branch entirely. Returns the loss, the unweighted
    per-set means, gradients keyed by parameter name, and fresh BN running
    statistics (not yet applied to the model).
    """
    if not inputs.normal:
        raise ValidationError("a training step needs at least one normal image")
    rep_caches = []
    normal_parts = []
    for patches, rows_n, rows_a in inputs.normal:
        rep, cache = enhance_forward(patches, rows_n, rows_a, model.proj, model.attn if model.knowledge.use_attention else None, model.knowledge)
        rep_caches.append(cache)
        normal_parts.append(rep.data)
    o_n = np.concatenate(normal_parts, axis=0)
    m_n = o_n.shape[0]

    abnormal_caches = []
    abnormal_parts = []
    for patches, rows_n, rows_a in inputs.abnormal:
        if patches.shape[0] == 0:
            continue
        rep, cache = enhance_forward(patches, rows_n, rows_a, model.proj, model.attn if model.knowledge.use_attention else None, model.knowledge)
        abnormal_caches.append((cache, rep.n))
        abnormal_parts.append(rep.data)
    o_a = np.concatenate(abnormal_parts, axis=0) if abnormal_parts else np.zeros((0, o_n.shape[1]))

    stack = [o_n]
    if noise is not None:
        if noise.shape != o_n.shape:
            raise ValidationError(f"noise shape {noise.shape} does not match {o_n.shape}")
        stack.append(o_n + noise)
    if o_a.shape[0]:
        stack.append(o_a)
    x = np.concatenate(stack, axis=0)

    scores, mlp_cache, new_running = mlp_forward(x, model.mlp, "train")
    psi_n = scores[:m_n]
    if noise is not None:
        psi_p = scores[m_n : 2 * m_n]
        offset = 2 * m_n
    else:
        psi_p = None
        offset = m_n
    psi_a: np.ndarray | None
    if loss_cfg.lambda2 > 0:
        psi_a = scores[offset:]
    else:
        psi_a = None

    loss, terms, hinge_cache = _hinge_forward(psi_n, psi_p, psi_a, loss_cfg)
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    d_n, d_p, d_a = _hinge_backward(hinge_cache)

    d_scores = np.zeros_like(scores)
    d_scores[:m_n] = d_n
    if d_p is not None:
        d_scores[m_n : 2 * m_n] = d_p
    if d_a is not None and d_a.size:
        d_scores[offset:] = d_a
    d_x, grads = mlp_backward(d_scores, mlp_cache, model.mlp)

    # The pseudo negatives are o_n + noise, so their gradient flows back into
    # the same enhancement graph as the normals.
    d_on = d_x[:m_n].copy()
    if noise is not None:
        d_on += d_x[m_n : 2 * m_n]
    pos = 0
    for (patches, _, _), cache in zip(inputs.normal, rep_caches):
        n_rows = patches.shape[0]
        _merge_grads(grads, enhance_backward(d_on[pos : pos + n_rows], cache))
        pos += n_rows
    if o_a.shape[0]:
        d_oa = d_x[offset:]
        pos = 0
        for cache, n_rows in abnormal_caches:
            _merge_grads(grads, enhance_backward(d_oa[pos : pos + n_rows], cache))
            pos += n_rows
    return loss, terms, grads, new_running


def _merge_grads(into: dict[str, np.ndarray], extra: dict[str, np.ndarray]) -> None:
    for name, g in extra.items():
        if name in into:
            into[name] = into[name] + g
        else:
            into[name] = g


# -- training loop ----------------------------------------------------------------


@dataclass
class LossRow:
    epoch: int
    step: int
    loss: float
    term_n: float
    term_p: float
    term_a: float


@dataclass
class TrainResult:
    model: ModelParams
    optimizer: OptimizerState
    loss_rows: list[LossRow]
    epoch_mean_loss: list[float]


def _image_inputs(
    grid_patches: np.ndarray, normal_bank: MemoryBank, abnormal_bank: MemoryBank | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    patches = grid_patches.astype(np.float64)
    _, rows_n = nearest_batch(normal_bank, patches)
    rows_a = None
    if abnormal_bank is not None:
        _, rows_a = nearest_batch(abnormal_bank, patches)
    return patches, rows_n.astype(np.float64), None if rows_a is None else rows_a.astype(np.float64)


def train(
    manifest: fs.DatasetManifest,
    dual: DualMemoryBank,
    model: ModelParams,
    loss_cfg: LossConfig,
    aug_cfg: AugmentConfig,
    train_cfg: TrainConfig,
    *,
    use_filter: bool = True,
    optimizer: OptimizerState | None = None,
) -> TrainResult:
    """Train the scorer over shuffled image batches.

    Each step concatenates one batch's normal rows, their augmented pseudo
    negatives and (semi-supervised) the filtered abnormal rows, runs a single
    MLP train-phase forward, and applies one optimizer update. In
    semi-supervised mode anomalous images are spread round-robin over the
    epoch's batches so the abnormal hinge term stays populated.
    """
    normal_entries = manifest.select(label="normal")
    if not normal_entries:
        raise ValidationError("training manifest has no normal entries")
    anomalous_entries = manifest.select(label="anomalous")
    if train_cfg.mode == "semi_supervised" and not anomalous_entries:
        raise ValidationError("semi-supervised training requires anomalous entries with masks")

    abnormal_bank = dual.abnormal
    normal_bank = dual.normal

    normal_inputs = []
    for entry in normal_entries:
        grid = fs.read_feature_file(entry.feature_path)
        normal_inputs.append(_image_inputs(grid.patches, normal_bank, abnormal_bank))

    abnormal_inputs = []
    if train_cfg.mode == "semi_supervised":
        for entry in anomalous_entries:
            if entry.mask_path is None:
                raise ValidationError(f"anomalous entry {entry.feature_path} lacks a mask")
            grid = fs.read_feature_file(entry.feature_path)
            if use_filter:
                mask = fs.read_mask_file(entry.mask_path)
                pmask = fs.downscale_mask(mask, grid.h0, grid.w0)
                patches = fs.filter_anomalous(grid, pmask)
            else:
                patches = grid.patches
            if patches.shape[0] == 0:
                log.warning("no flagged patches in %s; image skipped", entry.feature_path)
                continue
            abnormal_inputs.append(_image_inputs(patches, normal_bank, abnormal_bank))
        if not abnormal_inputs:
            log.warning("no abnormal patches anywhere; the abnormal hinge term will be empty")

    optimizer = optimizer if optimizer is not None else OptimizerState()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x5F]))
    named = model.named_params()
    loss_rows: list[LossRow] = []
    epoch_means: list[float] = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(normal_inputs))
        batches = [
            order[lo : lo + train_cfg.batch_size]
            for lo in range(0, len(order), train_cfg.batch_size)
        ]
        abnormal_order = (
            shuffle_rng.permutation(len(abnormal_inputs)) if abnormal_inputs else np.array([], dtype=int)
        )
        epoch_losses = []
        for b, batch_idx in enumerate(batches):
            step += 1
            inputs = StepInputs(
                normal=[normal_inputs[i] for i in batch_idx],
                abnormal=[
                    abnormal_inputs[j]
                    for pos, j in enumerate(abnormal_order)
                    if pos % len(batches) == b
                ],
            )
            m_n = sum(p.shape[0] for p, _, _ in inputs.normal)
            width = model.mlp.width
            noise_rng = np.random.default_rng(np.random.SeedSequence([aug_cfg.seed, step]))
            noise = noise_rng.normal(0.0, aug_cfg.noise_std, size=(m_n, width))
            loss, terms, grads, new_running = step_loss_and_grads(model, inputs, loss_cfg, noise)
            apply_running_stats(model.mlp, new_running)
            optimizer_step(named, grads, optimizer, apply=model.set_param)
            named = model.named_params()
            loss_rows.append(LossRow(epoch, step, loss, *terms))
            epoch_losses.append(loss)
        epoch_means.append(float(np.mean(epoch_losses)))
        log.info("epoch %d/%d mean loss %.6f", epoch, train_cfg.epochs, epoch_means[-1])
    return TrainResult(model=model, optimizer=optimizer, loss_rows=loss_rows, epoch_mean_loss=epoch_means)
