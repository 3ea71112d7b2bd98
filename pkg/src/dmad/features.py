"""On-disk feature/mask/manifest formats and the anomalous-patch filter.

Binary layouts (little-endian throughout):

* ``.dmft`` feature file: magic ``DMFT``, version u16=1, reserved u16=0,
  h0 u32, w0 u32, c u32, source_h u32, source_w u32, object_id (u16 length +
  UTF-8 bytes), image_id (u16 length + UTF-8 bytes), then ``h0*w0*c`` raw f32
  values row-major (row, col, channel fastest).
* ``.dmmk`` mask file: magic ``DMMK``, version u16=1, h u32, w u32, then
  ``h*w`` bytes each 0 or 1.
* Manifest: JSON array of objects with keys ``feature_path``, ``object_id``,
  ``label`` and optional ``mask_path``; paths are resolved relative to the
  manifest's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Literal

import numpy as np

from dmad.errors import FormatError, StorageError, ValidationError
from dmad.interp import bilinear_resize

FEATURE_MAGIC = b"DMFT"
MASK_MAGIC = b"DMMK"
FORMAT_VERSION = 1

Label = Literal["normal", "anomalous"]
Role = Literal["train", "test"]


@dataclass
class FeatureGrid:
    """One image's patch features as an (h0, w0, c) float32 array."""

    object_id: str
    image_id: str
    data: np.ndarray
    source_h: int
    source_w: int

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"feature data must be 3-D, got shape {self.data.shape}")
        h0, w0, c = self.data.shape
        if h0 < 1 or w0 < 1 or c < 1:
            raise ValidationError(f"feature dims must be positive, got {self.data.shape}")
        if not self.object_id or not self.image_id:
            raise ValidationError("object_id and image_id must be nonempty")
        if self.source_h < h0 or self.source_w < w0:
            raise ValidationError(
                f"patch grid {h0}x{w0} exceeds source image {self.source_h}x{self.source_w}"
            )
        if not np.isfinite(self.data).all():
            raise ValidationError("feature data contains non-finite values")

    @property
    def h0(self) -> int:
        return self.data.shape[0]

    @property
    def w0(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    @property
    def patches(self) -> np.ndarray:
        """(h0*w0, c) row-major view of the patch vectors."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass
class AnnotationMask:
    """Full-resolution binary defect annotation, (h, w) of {0, 1}."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValidationError("mask dims must be positive")
        if not np.isin(self.data, (0, 1)).all():
            raise ValidationError("mask values must be exactly 0 or 1")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]


@dataclass
class PatchMask:
    """Patch-resolution boolean flags, true where a patch overlaps a defect."""

    flags: np.ndarray

    def __post_init__(self) -> None:
        self.flags = np.ascontiguousarray(self.flags, dtype=bool)
        if self.flags.ndim != 2:
            raise ValidationError(f"patch mask must be 2-D, got shape {self.flags.shape}")

    @property
    def h0(self) -> int:
        return self.flags.shape[0]

    @property
    def w0(self) -> int:
        return self.flags.shape[1]


@dataclass
class ManifestEntry:
    feature_path: Path
    object_id: str
    label: Label
    mask_path: Path | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    role: Role

    def validate(self) -> None:
        if self.role not in ("train", "test"):
            raise ValidationError(f"unknown manifest role {self.role!r}")
        for entry in self.entries:
            if not entry.object_id:
                raise ValidationError(f"empty object_id for {entry.feature_path}")
            if entry.label not in ("normal", "anomalous"):
                raise ValidationError(f"unknown label {entry.label!r}")
            if not Path(entry.feature_path).is_file():
                raise ValidationError(f"feature file not readable: {entry.feature_path}")
            if self.role == "train" and entry.label == "anomalous" and entry.mask_path is None:
                raise ValidationError(
                    f"anomalous train entry missing mask_path: {entry.feature_path}"
                )
            if entry.mask_path is not None and not Path(entry.mask_path).is_file():
                raise ValidationError(f"mask file not readable: {entry.mask_path}")

    def select(self, label: Label | None = None, object_id: str | None = None) -> list[ManifestEntry]:
        out = self.entries
        if label is not None:
            out = [e for e in out if e.label == label]
        if object_id is not None:
            out = [e for e in out if e.object_id == object_id]
        return out

    @property
    def object_ids(self) -> list[str]:
        return sorted({e.object_id for e in self.entries})


# -- low-level binary helpers ------------------------------------------------


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def _read_u16(f: BinaryIO, what: str) -> int:
    return int.from_bytes(_read_exact(f, 2, what), "little")


def _read_u32(f: BinaryIO, what: str) -> int:
    return int.from_bytes(_read_exact(f, 4, what), "little")


def _read_u64(f: BinaryIO, what: str) -> int:
    return int.from_bytes(_read_exact(f, 8, what), "little")


def _u16(v: int) -> bytes:
    return int(v).to_bytes(2, "little")


def _u32(v: int) -> bytes:
    return int(v).to_bytes(4, "little")


def _u64(v: int) -> bytes:
    return int(v).to_bytes(8, "little")


def _encode_str(s: str, what: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"{what} too long to serialize ({len(raw)} bytes)")
    return _u16(len(raw)) + raw


def _read_str(f: BinaryIO, what: str) -> str:
    n = _read_u16(f, f"{what} length")
    raw = _read_exact(f, n, what)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"invalid UTF-8 in {what}") from exc


def _remaining_bytes(f: BinaryIO) -> int:
    pos = f.tell()
    f.seek(0, os.SEEK_END)
    end = f.tell()
    f.seek(pos)
    return end - pos


# -- feature files -----------------------------------------------------------


def write_feature_file(grid: FeatureGrid, path: str | Path) -> None:
    """Serialize a grid to the ``.dmft`` binary layout (round-trip exact)."""
    header = (
        FEATURE_MAGIC
        + _u16(FORMAT_VERSION)
        + _u16(0)
        + _u32(grid.h0)
        + _u32(grid.w0)
        + _u32(grid.c)
        + _u32(grid.source_h)
        + _u32(grid.source_w)
        + _encode_str(grid.object_id, "object_id")
        + _encode_str(grid.image_id, "image_id")
    )
    payload = grid.data.astype("<f4", copy=False).tobytes()
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as exc:
        raise StorageError(f"cannot write feature file {path}: {exc}") from exc


def read_feature_file(path: str | Path) -> FeatureGrid:
    """Load and validate a ``.dmft`` file; rejects wrong magic and truncation."""
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise StorageError(f"cannot open feature file {path}: {exc}") from exc
    with f:
        magic = _read_exact(f, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}, expected {FEATURE_MAGIC!r}")
        version = _read_u16(f, "version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        _read_u16(f, "reserved")
        h0 = _read_u32(f, "h0")
        w0 = _read_u32(f, "w0")
        c = _read_u32(f, "c")
        source_h = _read_u32(f, "source_h")
        source_w = _read_u32(f, "source_w")
        if min(h0, w0, c) < 1:
            raise FormatError(f"non-positive dims {h0}x{w0}x{c} in {path}")
        object_id = _read_str(f, "object_id")
        image_id = _read_str(f, "image_id")
        expected = h0 * w0 * c * 4
        remaining = _remaining_bytes(f)
        if remaining != expected:
            raise FormatError(
                f"payload size mismatch in {path}: header declares {expected} bytes, "
                f"file holds {remaining}"
            )
        data = np.frombuffer(_read_exact(f, expected, "payload"), dtype="<f4")
    data = data.reshape(h0, w0, c)
    if not np.isfinite(data).all():
        raise FormatError(f"non-finite values in feature payload of {path}")
    try:
        return FeatureGrid(
            object_id=object_id,
            image_id=image_id,
            data=data,
            source_h=source_h,
            source_w=source_w,
        )
    except ValidationError as exc:
        raise FormatError(f"invalid feature file {path}: {exc}") from exc


# -- mask files ---------------------------------------------------------------


def write_mask_file(mask: AnnotationMask, path: str | Path) -> None:
    header = MASK_MAGIC + _u16(FORMAT_VERSION) + _u32(mask.h) + _u32(mask.w)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header)
            f.write(mask.data.tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write mask file {path}: {exc}") from exc


def read_mask_file(path: str | Path) -> AnnotationMask:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise StorageError(f"cannot open mask file {path}: {exc}") from exc
    with f:
        magic = _read_exact(f, 4, "magic")
        if magic != MASK_MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}, expected {MASK_MAGIC!r}")
        version = _read_u16(f, "version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported mask file version {version}")
        h = _read_u32(f, "h")
        w = _read_u32(f, "w")
        if h < 1 or w < 1:
            raise FormatError(f"non-positive mask dims {h}x{w} in {path}")
        remaining = _remaining_bytes(f)
        if remaining != h * w:
            raise FormatError(
                f"mask payload mismatch in {path}: expected {h * w} bytes, file holds {remaining}"
            )
        data = np.frombuffer(_read_exact(f, h * w, "mask payload"), dtype=np.uint8)
    data = data.reshape(h, w)
    if not np.isin(data, (0, 1)).all():
        raise FormatError(f"mask payload of {path} contains values outside {{0, 1}}")
    return AnnotationMask(data=data)


# -- manifests ----------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write manifest entries as a JSON array with paths relative to *path*."""
    base = Path(path).resolve().parent
    records = []
    for e in manifest.entries:
        rec: dict[str, str] = {
            "feature_path": os.path.relpath(Path(e.feature_path).resolve(), base),
            "object_id": e.object_id,
            "label": e.label,
        }
        if e.mask_path is not None:
            rec["mask_path"] = os.path.relpath(Path(e.mask_path).resolve(), base)
        records.append(rec)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(records, f, indent=2)
            f.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(path: str | Path, role: Role) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            records = json.load(f)
    except OSError as exc:
        raise StorageError(f"cannot open manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise FormatError(f"manifest {path} must be a JSON array")
    base = Path(path).resolve().parent
    entries = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "feature_path" not in rec or "object_id" not in rec or "label" not in rec:
            raise FormatError(f"manifest {path} entry {i} missing required keys")
        mask = rec.get("mask_path")
        entries.append(
            ManifestEntry(
                feature_path=(base / rec["feature_path"]).resolve(),
                object_id=str(rec["object_id"]),
                label=rec["label"],
                mask_path=(base / mask).resolve() if mask is not None else None,
            )
        )
    manifest = DatasetManifest(entries=entries, role=role)
    manifest.validate()
    return manifest


# -- mask downscaling and patch filtering --------------------------------------


def downscale_mask(mask: AnnotationMask, h0: int, w0: int) -> PatchMask:
    """Bilinearly shrink an annotation to the patch grid and threshold at > 0.

    Any patch whose bilinear footprint overlaps annotated pixels is flagged,
    which maximizes recall of abnormal supervision from small defects.
    """
    if h0 <= 0 or w0 <= 0:
        raise ValidationError(f"target dims must be positive, got {h0}x{w0}")
    if h0 > mask.h or w0 > mask.w:
        raise ValidationError(
            f"target {h0}x{w0} exceeds mask resolution {mask.h}x{mask.w}"
        )
    interpolated = bilinear_resize(mask.data.astype(np.float64), h0, w0)
    return PatchMask(flags=interpolated > 0.0)


def filter_anomalous(grid: FeatureGrid, pmask: PatchMask) -> np.ndarray:
    """Select the patch vectors at flagged positions, row-major order.

    Returns an (n_flagged, c) float32 matrix; empty when nothing is flagged.
    """
    if (grid.h0, grid.w0) != (pmask.h0, pmask.w0):
        raise ValidationError(
            f"grid {grid.h0}x{grid.w0} and patch mask {pmask.h0}x{pmask.w0} disagree"
        )
    return grid.patches[pmask.flags.ravel()].copy()
