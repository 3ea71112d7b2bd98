"""Checkpoint persistence (``.dmckpt``): length-prefixed named f32 tensors.

Layout: magic ``DMCK``, version u16=1, C u32, then records of
(name u16 length + UTF-8 bytes, rank u8, dims u32 each, f32 payload).
Records cover projection, attention, MLP blocks, head, BN running statistics,
optimizer moments, the step counter and the scalar mode switches, so a loaded
checkpoint is self-describing.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dmad import features as fs
from dmad.banks import Mode
from dmad.enhance import AttentionParams, KnowledgeMode, ProjectionParams
from dmad.errors import FormatError, StorageError
from dmad.learner import ModelParams, OptimizerState
from dmad.mlp import BlockParams, MlpParams

CHECKPOINT_MAGIC = b"DMCK"
CHECKPOINT_VERSION = 1
_MAX_RANK = 8


def _collect_tensors(model: ModelParams, optimizer: OptimizerState, mode: Mode) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    tensors["proj.w"] = model.proj.w_p
    tensors["proj.b"] = model.proj.b_p
    tensors["attn.w_k"] = model.attn.w_k
    tensors["attn.b_k"] = model.attn.b_k
    tensors["attn.w_v"] = model.attn.w_v
    tensors["attn.b_v"] = model.attn.b_v
    for i, blk in enumerate(model.mlp.blocks):
        for attr in ("w", "b", "gamma", "beta", "running_mean", "running_var"):
            tensors[f"mlp.block{i}.{attr}"] = getattr(blk, attr)
    tensors["mlp.head.w"] = model.mlp.head_w
    tensors["mlp.head.b"] = model.mlp.head_b
    for name, (m, v) in optimizer.moments.items():
        tensors[f"opt.{name}.m"] = m
        tensors[f"opt.{name}.v"] = v
    tensors["opt.step"] = np.asarray(float(optimizer.step), dtype=np.float32)
    tensors["cfg.n_blocks"] = np.asarray(float(len(model.mlp.blocks)), dtype=np.float32)
    tensors["cfg.use_attention"] = np.asarray(float(model.knowledge.use_attention), dtype=np.float32)
    tensors["cfg.use_dist"] = np.asarray(float(model.knowledge.use_dist), dtype=np.float32)
    tensors["cfg.attn_shared"] = np.asarray(float(model.attn.shared), dtype=np.float32)
    tensors["cfg.mode"] = np.asarray(0.0 if mode == "unsupervised" else 1.0, dtype=np.float32)
    tensors["cfg.leaky_slope"] = np.asarray(model.mlp.leaky_slope, dtype=np.float32)
    tensors["cfg.bn_momentum"] = np.asarray(model.mlp.bn_momentum, dtype=np.float32)
    tensors["cfg.bn_eps"] = np.asarray(model.mlp.bn_eps, dtype=np.float32)
    return tensors


def save_checkpoint(path: str | Path, model: ModelParams, optimizer: OptimizerState, mode: Mode) -> None:
    tensors = _collect_tensors(model, optimizer, mode)
    c = model.proj.w_p.shape[0]
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC + fs._u16(CHECKPOINT_VERSION) + fs._u32(c))
            for name in sorted(tensors):
                # asarray, not ascontiguousarray: the latter promotes rank-0 to rank-1
                arr = np.asarray(tensors[name], dtype=np.float32)
                f.write(fs._encode_str(name, "tensor name"))
                f.write(bytes([arr.ndim]))
                for dim in arr.shape:
                    f.write(fs._u32(dim))
                f.write(arr.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def _read_tensors(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise StorageError(f"cannot open checkpoint {path}: {exc}") from exc
    with f:
        magic = fs._read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}, expected {CHECKPOINT_MAGIC!r}")
        version = fs._read_u16(f, "version")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        c = fs._read_u32(f, "C")
        if c < 1:
            raise FormatError(f"non-positive channel count in {path}")
        tensors: dict[str, np.ndarray] = {}
        while fs._remaining_bytes(f) > 0:
            name = fs._read_str(f, "tensor name")
            rank = fs._read_exact(f, 1, "rank")[0]
            if rank > _MAX_RANK:
                raise FormatError(f"implausible tensor rank {rank} in {path}")
            dims = tuple(fs._read_u32(f, "dim") for _ in range(rank))
            count = 1
            for dim in dims:
                count *= dim
            expected = count * 4
            if fs._remaining_bytes(f) < expected:
                raise FormatError(f"truncated tensor payload for {name!r} in {path}")
            data = np.frombuffer(fs._read_exact(f, expected, name), dtype="<f4").reshape(dims)
            if not np.isfinite(data).all():
                raise FormatError(f"non-finite values in tensor {name!r} of {path}")
            tensors[name] = data
    return c, tensors


def load_checkpoint(path: str | Path) -> tuple[ModelParams, OptimizerState, Mode]:
    """Reconstruct model, optimizer state and operating mode from disk."""
    c, tensors = _read_tensors(path)

    def need(name: str) -> np.ndarray:
        if name not in tensors:
            raise FormatError(f"checkpoint {path} is missing tensor {name!r}")
        return tensors[name]

    n_blocks = int(round(float(need("cfg.n_blocks"))))
    if n_blocks < 1 or n_blocks > 64:
        raise FormatError(f"implausible block count {n_blocks} in {path}")
    knowledge = KnowledgeMode(
        use_attention=bool(float(need("cfg.use_attention"))),
        use_dist=bool(float(need("cfg.use_dist"))),
    )
    proj = ProjectionParams(w_p=need("proj.w"), b_p=need("proj.b"))
    attn = AttentionParams(
        w_k=need("attn.w_k"),
        b_k=need("attn.b_k"),
        w_v=need("attn.w_v"),
        b_v=need("attn.b_v"),
        shared=bool(float(need("cfg.attn_shared"))),
    )
    blocks = []
    for i in range(n_blocks):
        blocks.append(
            BlockParams(
                w=need(f"mlp.block{i}.w"),
                b=need(f"mlp.block{i}.b"),
                gamma=need(f"mlp.block{i}.gamma"),
                beta=need(f"mlp.block{i}.beta"),
                running_mean=need(f"mlp.block{i}.running_mean"),
                running_var=need(f"mlp.block{i}.running_var"),
            )
        )
    mlp = MlpParams(
        blocks=blocks,
        head_w=need("mlp.head.w"),
        head_b=need("mlp.head.b"),
        leaky_slope=float(need("cfg.leaky_slope")),
        bn_momentum=float(need("cfg.bn_momentum")),
        bn_eps=float(need("cfg.bn_eps")),
    )
    model = ModelParams(proj=proj, attn=attn, mlp=mlp, knowledge=knowledge)

    optimizer = OptimizerState(step=int(round(float(need("opt.step")))))
    for name in tensors:
        if name.startswith("opt.") and name.endswith(".m"):
            base = name[len("opt.") : -len(".m")]
            optimizer.moments[base] = (tensors[name].copy(), need(f"opt.{base}.v").copy())
    mode: Mode = "unsupervised" if float(need("cfg.mode")) == 0.0 else "semi_supervised"
    if proj.w_p.shape[0] != c:
        raise FormatError(f"projection size {proj.w_p.shape[0]} disagrees with header C={c}")
    return model, optimizer, mode
