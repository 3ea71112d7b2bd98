"""Anomaly score MLP: skip-connected affine+BN+LeakyReLU blocks, scalar head.

Each block computes ``x + LeakyReLU(BN(W x + b))``; the head is a separate
affine map to one score per row. Training-phase forward normalizes with batch
statistics and reports updated running statistics (the caller applies them);
eval-phase forward uses running statistics only. All arithmetic runs in
float64; parameters are stored float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmad.errors import NumericError, StateError, ValidationError


@dataclass
class BlockParams:
    w: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def __post_init__(self) -> None:
        d = self.w.shape[0]
        for name in ("w", "b", "gamma", "beta", "running_mean", "running_var"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
        if self.w.shape != (d, d):
            raise ValidationError(f"block weight must be square, got {self.w.shape}")
        for name in ("b", "gamma", "beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (d,):
                raise ValidationError(f"block vector {name} must have shape ({d},)")
        if (self.running_var < 0).any():
            raise ValidationError("running_var must be non-negative")


@dataclass
class MlpParams:
    blocks: list[BlockParams]
    head_w: np.ndarray
    head_b: np.ndarray
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if not self.blocks:
            raise ValidationError("MLP needs at least one block")
        self.head_w = np.ascontiguousarray(self.head_w, dtype=np.float64)
        self.head_b = np.ascontiguousarray(self.head_b, dtype=np.float64).reshape(())
        d = self.blocks[0].w.shape[0]
        if self.head_w.shape != (d,):
            raise ValidationError(f"head weight must have shape ({d},), got {self.head_w.shape}")

    @property
    def width(self) -> int:
        return self.blocks[0].w.shape[0]


def init_mlp(width: int, n_blocks: int, rng: np.random.Generator) -> MlpParams:
    """He-scaled block weights, unit BN, zero-initialized head.

    The zero head keeps initial scores identically zero so early score
    rankings come entirely from training rather than from random projections.
    """
    blocks = []
    for _ in range(n_blocks):
        blocks.append(
            BlockParams(
                w=rng.normal(0.0, np.sqrt(2.0 / width), size=(width, width)),
                b=np.zeros(width),
                gamma=np.ones(width),
                beta=np.zeros(width),
                running_mean=np.zeros(width),
                running_var=np.ones(width),
            )
        )
    return MlpParams(blocks=blocks, head_w=np.zeros(width), head_b=np.zeros(()))


def mlp_forward(
    x: np.ndarray, params: MlpParams, phase: str
) -> tuple[np.ndarray, dict | None, list[tuple[np.ndarray, np.ndarray]] | None]:
    """Score each row; returns (scores, cache, updated running stats).

    Cache and running stats are populated only in the train phase. Train phase
    requires at least two rows for batch statistics. Running variance updates
    use the unbiased batch variance; normalization uses the biased one.
    """
    if phase not in ("train", "eval"):
        raise ValidationError(f"unknown phase {phase!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError(f"input must be a nonempty 2-D matrix, got shape {x.shape}")
    if x.shape[1] != params.width:
        raise ValidationError(f"input width {x.shape[1]} does not match MLP width {params.width}")
    m = x.shape[0]
    if phase == "train" and m < 2:
        raise ValidationError("train phase needs at least 2 rows for batch statistics")

    eps = params.bn_eps
    momentum = params.bn_momentum
    slope = params.leaky_slope
    block_caches = []
    new_running = []
    for blk in params.blocks:
        w = blk.w.astype(np.float64)
        h = x @ w.T + blk.b.astype(np.float64)
        if phase == "train":
            mu = h.mean(axis=0)
            var = h.var(axis=0)
            unbiased = var * m / (m - 1)
            new_running.append(
                (
                    (1.0 - momentum) * blk.running_mean.astype(np.float64) + momentum * mu,
                    (1.0 - momentum) * blk.running_var.astype(np.float64) + momentum * unbiased,
                )
            )
        else:
            mu = blk.running_mean.astype(np.float64)
            var = blk.running_var.astype(np.float64)
        ivstd = 1.0 / np.sqrt(var + eps)
        xhat = (h - mu) * ivstd
        y = blk.gamma.astype(np.float64) * xhat + blk.beta.astype(np.float64)
        act = np.where(y > 0, y, slope * y)
        out = x + act
        if phase == "train":
            block_caches.append({"x_in": x, "h": h, "mu": mu, "ivstd": ivstd, "xhat": xhat, "y": y})
        x = out
    scores = x @ params.head_w.astype(np.float64) + float(params.head_b)
    if not np.isfinite(scores).all():
        raise NumericError("non-finite scores in MLP forward")
    if phase == "eval":
        return scores, None, None
    cache = {"blocks": block_caches, "final_x": x, "m": m, "params": params}
    return scores, cache, new_running


def mlp_backward(
    d_scores: np.ndarray, cache: dict | None, params: MlpParams
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backpropagate score gradients through head and blocks (train cache only)."""
    if cache is None:
        raise StateError("mlp_backward requires the cache from a train-phase forward")
    d_scores = np.asarray(d_scores, dtype=np.float64)
    m = cache["m"]
    slope = params.leaky_slope
    grads: dict[str, np.ndarray] = {
        "mlp.head.w": cache["final_x"].T @ d_scores,
        "mlp.head.b": np.asarray(d_scores.sum()),
    }
    dx = np.outer(d_scores, params.head_w.astype(np.float64))
    for i in reversed(range(len(params.blocks))):
        blk = params.blocks[i]
        c = cache["blocks"][i]
        d_act = dx
        d_y = d_act * np.where(c["y"] > 0, 1.0, slope)
        grads[f"mlp.block{i}.gamma"] = (d_y * c["xhat"]).sum(axis=0)
        grads[f"mlp.block{i}.beta"] = d_y.sum(axis=0)
        d_xhat = d_y * blk.gamma.astype(np.float64)
        xc = c["h"] - c["mu"]
        ivstd = c["ivstd"]
        d_var = np.sum(d_xhat * xc, axis=0) * (-0.5) * ivstd**3
        d_mu = -np.sum(d_xhat, axis=0) * ivstd + d_var * (-2.0 / m) * xc.sum(axis=0)
        d_h = d_xhat * ivstd + d_var * (2.0 / m) * xc + d_mu / m
        grads[f"mlp.block{i}.w"] = d_h.T @ c["x_in"]
        grads[f"mlp.block{i}.b"] = d_h.sum(axis=0)
        dx = dx + d_h @ blk.w.astype(np.float64)
    return dx, grads


def apply_running_stats(params: MlpParams, new_running: list[tuple[np.ndarray, np.ndarray]]) -> None:
    """Store the running statistics produced by a train-phase forward."""
    if len(new_running) != len(params.blocks):
        raise ValidationError("running stats list does not match block count")
    for blk, (mean, var) in zip(params.blocks, new_running):
        blk.running_mean = np.asarray(mean, dtype=np.float64)
        blk.running_var = np.asarray(var, dtype=np.float64)
