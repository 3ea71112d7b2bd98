"""Synthetic multi-object feature datasets with controllable defect structure.

Each object owns a Gaussian cluster center in feature space; normal patches
scatter tightly around it. Anomalous images carry one contiguous rectangular
patch block shifted along a defect direction drawn from a small pool shared
across objects (so cross-object defect similarity is reproducible at desk
scale), with pixel masks expanding each patch to a block. Outlier grids come
from a broad distribution unrelated to any cluster. Generation is one
deterministic pass over a single seeded generator, so equal seeds produce
byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dmad import features as fs
from dmad.errors import StorageError, ValidationError


@dataclass
class SynthSpec:
    num_objects: int = 3
    train_normal: int = 40
    test_normal: int = 10
    test_anomalous: int = 10
    seen_anomalies: int = 0
    h0: int = 8
    w0: int = 8
    c: int = 16
    cluster_spread: float = 0.1
    anomaly_shift: float = 1.5
    defect_patch_fraction: float = 0.05
    outlier_images: int = 8
    pixel_scale: int = 4
    num_defect_directions: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        counts = (
            self.num_objects,
            self.train_normal,
            self.test_normal,
            self.test_anomalous,
            self.seen_anomalies,
            self.outlier_images,
        )
        if any(v < 0 for v in counts):
            raise ValidationError("counts must be non-negative")
        if self.num_objects < 1 or self.train_normal < 1:
            raise ValidationError("need at least one object with one training image")
        if self.c < 2:
            raise ValidationError("channel count must be at least 2")
        if not (0.0 < self.defect_patch_fraction < 1.0):
            raise ValidationError("defect_patch_fraction must lie in (0, 1)")
        if self.h0 < 1 or self.w0 < 1 or self.pixel_scale < 1:
            raise ValidationError("grid dims and pixel_scale must be positive")
        if self.num_defect_directions < 1:
            raise ValidationError("need at least one defect direction")


@dataclass
class SynthResult:
    train_manifest_path: Path
    test_manifest_path: Path
    outlier_dir: Path


def _defect_block(spec: SynthSpec, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Rectangle (y0, x0, bh, bw) covering about defect_patch_fraction of the grid."""
    target = max(1, int(np.floor(spec.defect_patch_fraction * spec.h0 * spec.w0 + 0.5)))
    bh = max(1, int(np.sqrt(target)))
    bw = int(np.ceil(target / bh))
    bh = min(bh, spec.h0)
    bw = min(bw, spec.w0)
    y0 = int(rng.integers(spec.h0 - bh + 1))
    x0 = int(rng.integers(spec.w0 - bw + 1))
    return y0, x0, bh, bw


def generate(spec: SynthSpec, out_dir: str | Path) -> SynthResult:
    """Write a full synthetic dataset (features, masks, manifests, outliers)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, 1.0, size=(spec.num_objects, spec.c))
    directions = rng.normal(0.0, 1.0, size=(spec.num_defect_directions, spec.c))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    source_h = spec.h0 * spec.pixel_scale
    source_w = spec.w0 * spec.pixel_scale
    train_entries: list[fs.ManifestEntry] = []
    test_entries: list[fs.ManifestEntry] = []

    def normal_field(center: np.ndarray) -> np.ndarray:
        return center + rng.normal(0.0, spec.cluster_spread, size=(spec.h0, spec.w0, spec.c))

    def emit(
        object_id: str, image_id: str, data: np.ndarray, mask: np.ndarray | None
    ) -> tuple[Path, Path | None]:
        grid = fs.FeatureGrid(
            object_id=object_id,
            image_id=image_id,
            data=data.astype(np.float32),
            source_h=source_h,
            source_w=source_w,
        )
        fpath = out / "features" / object_id / f"{image_id}.dmft"
        fs.write_feature_file(grid, fpath)
        mpath = None
        if mask is not None:
            mpath = out / "masks" / object_id / f"{image_id}.dmmk"
            fs.write_mask_file(fs.AnnotationMask(data=mask), mpath)
        return fpath, mpath

    def anomalous_image(center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        data = normal_field(center)
        y0, x0, bh, bw = _defect_block(spec, rng)
        direction = directions[int(rng.integers(spec.num_defect_directions))]
        data[y0 : y0 + bh, x0 : x0 + bw, :] += spec.anomaly_shift * direction
        mask = np.zeros((source_h, source_w), dtype=np.uint8)
        s = spec.pixel_scale
        mask[y0 * s : (y0 + bh) * s, x0 * s : (x0 + bw) * s] = 1
        return data, mask

    for i in range(spec.num_objects):
        object_id = f"object{i:02d}"
        center = centers[i]
        for j in range(spec.train_normal):
            image_id = f"{object_id}_train_normal_{j:03d}"
            fpath, _ = emit(object_id, image_id, normal_field(center), None)
            train_entries.append(fs.ManifestEntry(fpath, object_id, "normal"))
        for j in range(spec.seen_anomalies):
            image_id = f"{object_id}_train_anom_{j:03d}"
            data, mask = anomalous_image(center)
            fpath, mpath = emit(object_id, image_id, data, mask)
            train_entries.append(fs.ManifestEntry(fpath, object_id, "anomalous", mpath))
        for j in range(spec.test_normal):
            image_id = f"{object_id}_test_normal_{j:03d}"
            fpath, _ = emit(object_id, image_id, normal_field(center), None)
            test_entries.append(fs.ManifestEntry(fpath, object_id, "normal"))
        for j in range(spec.test_anomalous):
            image_id = f"{object_id}_test_anom_{j:03d}"
            data, mask = anomalous_image(center)
            fpath, mpath = emit(object_id, image_id, data, mask)
            test_entries.append(fs.ManifestEntry(fpath, object_id, "anomalous", mpath))

    outlier_dir = out / "outliers"
    for j in range(spec.outlier_images):
        data = rng.normal(0.0, 2.0, size=(spec.h0, spec.w0, spec.c))
        grid = fs.FeatureGrid(
            object_id="outlier",
            image_id=f"outlier_{j:03d}",
            data=data.astype(np.float32),
            source_h=source_h,
            source_w=source_w,
        )
        fs.write_feature_file(grid, outlier_dir / f"outlier_{j:03d}.dmft")
    if spec.outlier_images == 0:
        outlier_dir.mkdir(parents=True, exist_ok=True)

    train_path = out / "train_manifest.json"
    test_path = out / "test_manifest.json"
    fs.save_manifest(fs.DatasetManifest(train_entries, "train"), train_path)
    fs.save_manifest(fs.DatasetManifest(test_entries, "test"), test_path)
    return SynthResult(
        train_manifest_path=train_path, test_manifest_path=test_path, outlier_dir=outlier_dir
    )


def load_outlier_grids(outlier_dir: str | Path) -> list[fs.FeatureGrid]:
    """Read every ``.dmft`` under a directory in sorted order."""
    paths = sorted(Path(outlier_dir).glob("*.dmft"))
    if not paths:
        raise ValidationError(f"no .dmft files found in {outlier_dir}")
    return [fs.read_feature_file(p) for p in paths]
