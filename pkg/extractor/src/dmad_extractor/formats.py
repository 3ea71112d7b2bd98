"""Writers for the anomaly engine's on-disk formats.

The extractor talks to the engine only through its external interfaces, so
the binary layouts are implemented here against the published contract:

* ``.dmft``: magic ``DMFT``, version u16=1, reserved u16=0, h0/w0/c/source_h/
  source_w u32, object_id and image_id as u16-length-prefixed UTF-8, then
  ``h0*w0*c`` little-endian float32 values row-major (channel fastest).
* ``.dmmk``: magic ``DMMK``, version u16=1, h/w u32, then ``h*w`` bytes {0,1}.
* Manifest: JSON array of ``{feature_path, object_id, label[, mask_path]}``
  with paths relative to the manifest file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_feature_file(
    path: Path,
    features: np.ndarray,
    object_id: str,
    image_id: str,
    source_h: int,
    source_w: int,
) -> None:
    """Serialize an (h0, w0, c) float32 array to the engine's feature layout."""
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 3:
        raise ValueError(f"features must be (h0, w0, c), got {features.shape}")
    if not np.isfinite(features).all():
        raise ValueError("features contain non-finite values")
    h0, w0, c = features.shape
    obj = object_id.encode("utf-8")
    img = image_id.encode("utf-8")
    header = b"DMFT" + struct.pack("<HHIIIII", 1, 0, h0, w0, c, source_h, source_w)
    header += struct.pack("<H", len(obj)) + obj + struct.pack("<H", len(img)) + img
    _atomic_write(Path(path), header + features.tobytes())


def write_mask_file(path: Path, mask: np.ndarray) -> None:
    """Serialize an (h, w) binary mask to the engine's mask layout."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    h, w = mask.shape
    header = b"DMMK" + struct.pack("<HII", 1, h, w)
    _atomic_write(Path(path), header + mask.tobytes())


def write_manifest(path: Path, entries: list[dict]) -> None:
    """Write manifest entries with paths relative to the manifest location."""
    base = Path(path).resolve().parent
    records = []
    for entry in entries:
        rec = {
            "feature_path": os.path.relpath(Path(entry["feature_path"]).resolve(), base),
            "object_id": entry["object_id"],
            "label": entry["label"],
        }
        if entry.get("mask_path") is not None:
            rec["mask_path"] = os.path.relpath(Path(entry["mask_path"]).resolve(), base)
        records.append(rec)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(records, indent=2) + "\n"
    _atomic_write(Path(path), payload.encode("utf-8"))
