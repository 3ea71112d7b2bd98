"""Dual memory bank: construction, coreset subsampling, persistence, queries.

Bank file layout (``.dmbk``, little-endian): magic ``DMBK``, version u16=1,
kind u8 (0=normal, 1=pseudo_outlier, 2=seen_anomaly, 3=center_sampled,
4=composed_abnormal), c u32, K u64, five u64 provenance counts in kind order,
then ``K*c`` raw f32 values row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from dmad.errors import EmptyBankError, FormatError, StorageError, ValidationError
from dmad import features as fs

BANK_MAGIC = b"DMBK"
BANK_VERSION = 1
BANK_KINDS = ("normal", "pseudo_outlier", "seen_anomaly", "center_sampled", "composed_abnormal")

BankKind = Literal["normal", "pseudo_outlier", "seen_anomaly", "center_sampled", "composed_abnormal"]
Mode = Literal["unsupervised", "semi_supervised"]


@dataclass
class MemoryBank:
    """Immutable matrix of reference feature rows with per-kind provenance."""

    kind: BankKind
    rows: np.ndarray
    provenance: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in BANK_KINDS:
            raise ValidationError(f"unknown bank kind {self.kind!r}")
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ValidationError(f"bank rows must be 2-D, got shape {self.rows.shape}")
        if self.rows.shape[0] == 0 and self.kind != "center_sampled":
            raise ValidationError(f"bank of kind {self.kind!r} must hold at least one row")
        if self.rows.shape[1] < 1:
            raise ValidationError("bank channel count must be positive")
        if self.rows.size and not np.isfinite(self.rows).all():
            raise ValidationError("bank rows contain non-finite values")
        if not self.provenance:
            self.provenance = {self.kind: self.k}
        unknown = set(self.provenance) - set(BANK_KINDS)
        if unknown:
            raise ValidationError(f"unknown provenance kinds {sorted(unknown)}")
        if sum(self.provenance.values()) != self.k:
            raise ValidationError(
                f"provenance counts {self.provenance} do not sum to row count {self.k}"
            )
        self.rows.flags.writeable = False

    @property
    def k(self) -> int:
        return self.rows.shape[0]

    @property
    def c(self) -> int:
        return self.rows.shape[1]


@dataclass
class DualMemoryBank:
    """Normal bank plus composed abnormal bank for one operating mode.

    ``abnormal`` may be None only for the bank-ablated pipeline variant that
    drops the abnormal knowledge block entirely; both standard modes carry a
    composed abnormal bank.
    """

    normal: MemoryBank
    abnormal: MemoryBank | None
    mode: Mode

    def __post_init__(self) -> None:
        if self.mode not in ("unsupervised", "semi_supervised"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.normal.kind != "normal":
            raise ValidationError(f"normal bank has kind {self.normal.kind!r}")
        if self.abnormal is None:
            return
        if self.abnormal.kind != "composed_abnormal":
            raise ValidationError(f"abnormal bank has kind {self.abnormal.kind!r}")
        if self.normal.c != self.abnormal.c:
            raise ValidationError(
                f"channel mismatch: normal c={self.normal.c}, abnormal c={self.abnormal.c}"
            )
        if self.mode == "unsupervised":
            extra = {k for k, v in self.abnormal.provenance.items() if v and k != "pseudo_outlier"}
            if extra:
                raise ValidationError(
                    f"unsupervised abnormal bank may only hold pseudo_outlier rows, found {sorted(extra)}"
                )


@dataclass
class CoresetConfig:
    retention: float = 0.02
    seed: int = 0
    projection_dim: int | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.retention <= 1.0):
            raise ValidationError(f"retention must lie in (0, 1], got {self.retention}")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ValidationError("projection_dim must be positive when set")


@dataclass
class FusionConfig:
    beta: float = 0.6
    pair_seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta <= 1.0):
            raise ValidationError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass
class CenterSamplingConfig:
    count: int = 1024
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValidationError(f"count must be non-negative, got {self.count}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be non-negative, got {self.noise_std}")


# -- coreset ------------------------------------------------------------------


def greedy_coreset(points: np.ndarray, config: CoresetConfig) -> list[int]:
    """Select max(1, round(retention*K)) row indices by k-center greedy iteration.

    The first index is drawn uniformly from the seeded generator; each further
    index maximizes the minimum Euclidean distance to the rows already chosen,
    with ties broken by the smallest index. When ``projection_dim`` is set the
    distances are computed on a seeded Gaussian random projection instead of
    the raw features (selection still returns original row indices).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValidationError(f"coreset input must be a nonempty 2-D matrix, got shape {points.shape}")
    k = points.shape[0]
    m = max(1, int(np.floor(config.retention * k + 0.5)))
    m = min(m, k)

    rng = np.random.default_rng(config.seed)
    if config.projection_dim is not None and config.projection_dim < points.shape[1]:
        proj = rng.standard_normal((points.shape[1], config.projection_dim))
        work = points @ (proj / np.sqrt(config.projection_dim))
    else:
        work = points

    first = int(rng.integers(k))
    selected = [first]
    min_d2 = np.sum((work - work[first]) ** 2, axis=1)
    min_d2[first] = -np.inf
    for _ in range(m - 1):
        nxt = int(np.argmax(min_d2))
        selected.append(nxt)
        d2 = np.sum((work - work[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -np.inf
    return selected


# -- bank builders ------------------------------------------------------------


def _pool_patches(grids: Iterable[fs.FeatureGrid]) -> np.ndarray:
    mats = []
    c = None
    for grid in grids:
        if c is None:
            c = grid.c
        elif grid.c != c:
            raise ValidationError(
                f"mixed channel counts while pooling patches: {c} vs {grid.c} "
                f"({grid.object_id}/{grid.image_id})"
            )
        mats.append(grid.patches)
    if not mats:
        raise ValidationError("no grids to pool")
    return np.concatenate(mats, axis=0)


def build_normal_bank(manifest: fs.DatasetManifest, coreset: CoresetConfig) -> MemoryBank:
    """Pool every normal patch across all objects and retain a greedy coreset."""
    entries = manifest.select(label="normal")
    if not entries:
        raise ValidationError("manifest has no normal entries")
    pooled = _pool_patches(fs.read_feature_file(e.feature_path) for e in entries)
    keep = greedy_coreset(pooled, coreset)
    return MemoryBank(kind="normal", rows=pooled[keep])


def fuse_outlier(q_o: np.ndarray, q_n: np.ndarray, beta: float) -> np.ndarray:
    """Elementwise convex combination beta*q_o + (1-beta)*q_n."""
    q_o = np.asarray(q_o, dtype=np.float32)
    q_n = np.asarray(q_n, dtype=np.float32)
    if q_o.shape != q_n.shape:
        raise ValidationError(f"fusion operands disagree: {q_o.shape} vs {q_n.shape}")
    if not (0.0 <= beta <= 1.0):
        raise ValidationError(f"beta must lie in [0, 1], got {beta}")
    return (np.float32(beta) * q_o + np.float32(1.0 - beta) * q_n).astype(np.float32)


def build_pseudo_outlier_bank(
    outlier_grids: list[fs.FeatureGrid],
    normal_manifest: fs.DatasetManifest,
    fusion: FusionConfig,
    coreset: CoresetConfig,
) -> MemoryBank:
    """Fuse each outlier grid with a randomly paired normal grid, then coreset.

    Pairing is uniform with replacement, driven by ``fusion.pair_seed``. Fusion
    is patchwise in row-major order; when the paired grids hold different patch
    counts the normal patch index wraps modulo its count.
    """
    if not outlier_grids:
        raise ValidationError("no outlier grids supplied")
    normal_entries = normal_manifest.select(label="normal")
    if not normal_entries:
        raise ValidationError("normal manifest has no normal entries")
    rng = np.random.default_rng(fusion.pair_seed)
    cache: dict[Path, fs.FeatureGrid] = {}
    fused = []
    for outlier in outlier_grids:
        pick = normal_entries[int(rng.integers(len(normal_entries)))]
        if pick.feature_path not in cache:
            cache[pick.feature_path] = fs.read_feature_file(pick.feature_path)
        normal = cache[pick.feature_path]
        if normal.c != outlier.c:
            raise ValidationError(
                f"channel mismatch between outlier ({outlier.c}) and normal ({normal.c}) grids"
            )
        o_rows = outlier.patches
        n_rows = normal.patches
        aligned = n_rows[np.arange(o_rows.shape[0]) % n_rows.shape[0]]
        fused.append(fuse_outlier(o_rows, aligned, fusion.beta))
    pooled = np.concatenate(fused, axis=0)
    keep = greedy_coreset(pooled, coreset)
    return MemoryBank(kind="pseudo_outlier", rows=pooled[keep])


def build_seen_bank(
    anomalous_entries: list[fs.ManifestEntry], *, apply_filter: bool = True
) -> MemoryBank:
    """Pool the (filtered) patch vectors of annotated anomalous images.

    No coreset is applied. ``apply_filter=False`` keeps every patch of each
    anomalous image instead of only the mask-flagged ones; this exists solely
    for the ablation grid and is off the default path.
    """
    if not anomalous_entries:
        raise ValidationError("no anomalous entries supplied")
    parts = []
    c = None
    for entry in anomalous_entries:
        if entry.label != "anomalous":
            raise ValidationError(f"entry {entry.feature_path} is not anomalous")
        if entry.mask_path is None:
            raise ValidationError(f"anomalous entry {entry.feature_path} lacks a mask")
        grid = fs.read_feature_file(entry.feature_path)
        if c is None:
            c = grid.c
        elif grid.c != c:
            raise ValidationError("mixed channel counts across anomalous entries")
        if apply_filter:
            mask = fs.read_mask_file(entry.mask_path)
            pmask = fs.downscale_mask(mask, grid.h0, grid.w0)
            selected = fs.filter_anomalous(grid, pmask)
        else:
            selected = grid.patches
        if selected.shape[0]:
            parts.append(selected)
    if not parts:
        raise EmptyBankError("no anomalous patches survived filtering")
    return MemoryBank(kind="seen_anomaly", rows=np.concatenate(parts, axis=0))


def anomaly_center_sampling(seen: MemoryBank, config: CenterSamplingConfig) -> MemoryBank:
    """Perturb the mean seen-anomaly vector with Gaussian noise to balance classes.

    Emits ``config.count`` rows of mean + N(0, noise_std^2) per coordinate,
    deterministic given the seed.
    """
    if seen.kind != "seen_anomaly":
        raise ValidationError(f"center sampling expects a seen_anomaly bank, got {seen.kind!r}")
    if seen.k == 0:
        raise ValidationError("cannot center-sample an empty bank")
    center = seen.rows.astype(np.float64).mean(axis=0)
    rng = np.random.default_rng(config.seed)
    rows = center[None, :] + rng.normal(0.0, config.noise_std, size=(config.count, seen.c))
    return MemoryBank(kind="center_sampled", rows=rows.astype(np.float32))


def compose_abnormal_bank(
    mode: Mode,
    m_o: MemoryBank,
    m_as: MemoryBank | None = None,
    m_p: MemoryBank | None = None,
) -> MemoryBank:
    """Concatenate abnormal bank components in (m_o, m_as, m_p) order."""
    if m_o.kind != "pseudo_outlier":
        raise ValidationError(f"m_o must be a pseudo_outlier bank, got {m_o.kind!r}")
    if mode == "unsupervised":
        if m_as is not None or m_p is not None:
            raise ValidationError("unsupervised composition accepts only the pseudo-outlier bank")
        return MemoryBank(
            kind="composed_abnormal", rows=m_o.rows, provenance={"pseudo_outlier": m_o.k}
        )
    if mode != "semi_supervised":
        raise ValidationError(f"unknown mode {mode!r}")
    if m_as is None or m_as.k == 0:
        raise ValidationError("semi-supervised composition requires a nonempty seen-anomaly bank")
    if m_as.kind != "seen_anomaly":
        raise ValidationError(f"m_as must be a seen_anomaly bank, got {m_as.kind!r}")
    parts = [m_o.rows, m_as.rows]
    provenance = {"pseudo_outlier": m_o.k, "seen_anomaly": m_as.k}
    if m_p is not None:
        if m_p.kind != "center_sampled":
            raise ValidationError(f"m_p must be a center_sampled bank, got {m_p.kind!r}")
        if m_p.k:
            parts.append(m_p.rows)
            provenance["center_sampled"] = m_p.k
    cs = {b.c for b in (m_o, m_as, m_p) if b is not None and b.k}
    if len(cs) > 1:
        raise ValidationError(f"channel counts disagree across components: {sorted(cs)}")
    return MemoryBank(
        kind="composed_abnormal", rows=np.concatenate(parts, axis=0), provenance=provenance
    )


# -- queries ------------------------------------------------------------------

_QUERY_CHUNK = 4096
_BANK_CHUNK = 16384


def nearest_batch(bank: MemoryBank, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest bank row per query under Euclidean distance.

    Returns (indices, rows) with ties broken by the smallest bank index.
    Distances are accumulated in float64; bank and query chunks keep memory
    bounded without changing the selected indices.
    """
    if bank.k == 0:
        raise ValidationError("cannot query an empty bank")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != bank.c:
        raise ValidationError(
            f"queries must be 2-D with {bank.c} channels, got shape {queries.shape}"
        )
    n = queries.shape[0]
    best_d = np.full(n, np.inf)
    best_i = np.zeros(n, dtype=np.int64)
    q_sq = np.sum(queries * queries, axis=1)
    for q_lo in range(0, n, _QUERY_CHUNK):
        q_hi = min(q_lo + _QUERY_CHUNK, n)
        q_chunk = queries[q_lo:q_hi]
        for b_lo in range(0, bank.k, _BANK_CHUNK):
            b_hi = min(b_lo + _BANK_CHUNK, bank.k)
            rows = bank.rows[b_lo:b_hi].astype(np.float64)
            d2 = (
                q_sq[q_lo:q_hi, None]
                - 2.0 * (q_chunk @ rows.T)
                + np.sum(rows * rows, axis=1)[None, :]
            )
            local = np.argmin(d2, axis=1)
            local_d = d2[np.arange(q_hi - q_lo), local]
            better = local_d < best_d[q_lo:q_hi]
            best_d[q_lo:q_hi][better] = local_d[better]
            best_i[q_lo:q_hi][better] = local[better] + b_lo
    return best_i, bank.rows[best_i].copy()


def nearest(bank: MemoryBank, query: np.ndarray) -> tuple[int, np.ndarray]:
    """Single-query form of :func:`nearest_batch`."""
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise ValidationError(f"query must be 1-D, got shape {query.shape}")
    idx, rows = nearest_batch(bank, query[None, :])
    return int(idx[0]), rows[0]


# -- persistence ---------------------------------------------------------------


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    header = (
        BANK_MAGIC
        + fs._u16(BANK_VERSION)
        + bytes([BANK_KINDS.index(bank.kind)])
        + fs._u32(bank.c)
        + fs._u64(bank.k)
        + b"".join(fs._u64(bank.provenance.get(k, 0)) for k in BANK_KINDS)
    )
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header)
            f.write(bank.rows.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write bank file {path}: {exc}") from exc


def load_bank(path: str | Path) -> MemoryBank:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise StorageError(f"cannot open bank file {path}: {exc}") from exc
    with f:
        magic = fs._read_exact(f, 4, "magic")
        if magic != BANK_MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}, expected {BANK_MAGIC!r}")
        version = fs._read_u16(f, "version")
        if version != BANK_VERSION:
            raise FormatError(f"unsupported bank file version {version}")
        kind_byte = fs._read_exact(f, 1, "kind")[0]
        if kind_byte >= len(BANK_KINDS):
            raise FormatError(f"unknown bank kind byte {kind_byte} in {path}")
        kind = BANK_KINDS[kind_byte]
        c = fs._read_u32(f, "c")
        k = fs._read_u64(f, "K")
        counts = [fs._read_u64(f, f"provenance[{name}]") for name in BANK_KINDS]
        if c < 1:
            raise FormatError(f"non-positive channel count in {path}")
        if sum(counts) != k:
            raise FormatError(f"provenance counts {counts} do not sum to K={k} in {path}")
        expected = k * c * 4
        remaining = fs._remaining_bytes(f)
        if remaining != expected:
            raise FormatError(
                f"bank payload mismatch in {path}: expected {expected} bytes, file holds {remaining}"
            )
        rows = np.frombuffer(fs._read_exact(f, expected, "rows"), dtype="<f4").reshape(k, c)
    if rows.size and not np.isfinite(rows).all():
        raise FormatError(f"non-finite rows in bank file {path}")
    provenance = {name: count for name, count in zip(BANK_KINDS, counts) if count}
    if not provenance:
        provenance = {kind: 0}
    try:
        return MemoryBank(kind=kind, rows=rows, provenance=provenance)
    except ValidationError as exc:
        raise FormatError(f"invalid bank file {path}: {exc}") from exc
