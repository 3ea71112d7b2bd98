"""Per-object evaluation: scoring test images and aggregating metrics."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from dmad import features as fs
from dmad import metrics
from dmad.banks import MemoryBank
from dmad.enhance import enhance_pipeline
from dmad.errors import ValidationError
from dmad.learner import ModelParams
from dmad.mlp import mlp_forward

log = logging.getLogger("dmad.evaluate")

METRIC_KEYS = (
    "image_auroc",
    "image_ap",
    "image_f1max",
    "pixel_auroc",
    "pixel_ap",
    "pixel_f1max",
    "pro",
)


@dataclass
class EvalConfig:
    blur_sigma: float = 4.0
    pro_fpr_limit: float = 0.3
    pro_connectivity: int = 8
    threads: int = 1


@dataclass
class ScoreMap:
    """Patch-level anomaly scores plus the derived image score and pixel map."""

    h0: int
    w0: int
    patch_scores: np.ndarray
    image_score: float
    pixel_map: np.ndarray | None = None


@dataclass
class EvalReport:
    per_object: dict[str, dict[str, float | None]]
    aggregate: dict[str, float | None]
    mode: str = ""

    def to_json_dict(self) -> dict:
        return {"mode": self.mode, "objects": self.per_object, "aggregate": self.aggregate}


def score_grid(
    grid: fs.FeatureGrid,
    model: ModelParams,
    normal_bank: MemoryBank,
    abnormal_bank: MemoryBank | None,
    blur_sigma: float = 4.0,
    with_pixel_map: bool = True,
) -> ScoreMap:
    """Anomaly scores for one feature grid (inference path, sign-flipped head).

    The training objective pushes normal scores above the margin, so the
    anomaly score is the negated MLP output.
    """
    rep = enhance_pipeline(
        grid,
        normal_bank,
        abnormal_bank,
        model.proj,
        model.attn if model.knowledge.use_attention else None,
        model.knowledge,
    )
    psi, _, _ = mlp_forward(rep.data, model.mlp, "eval")
    patch_scores = -psi
    img = metrics.image_score(patch_scores)
    pm = None
    if with_pixel_map:
        pm = metrics.pixel_map(
            patch_scores.reshape(grid.h0, grid.w0), grid.source_h, grid.source_w, blur_sigma
        )
    return ScoreMap(
        h0=grid.h0, w0=grid.w0, patch_scores=patch_scores, image_score=img, pixel_map=pm
    )


def _evaluate_object(
    object_id: str,
    entries: list[fs.ManifestEntry],
    model: ModelParams,
    normal_bank: MemoryBank,
    abnormal_bank: MemoryBank | None,
    cfg: EvalConfig,
) -> tuple[dict[str, float | None], list[float], list[int]]:
    image_scores = []
    image_labels = []
    maps = []
    masks = []
    have_all_masks = True
    for entry in sorted(entries, key=lambda e: str(e.feature_path)):
        grid = fs.read_feature_file(entry.feature_path)
        sm = score_grid(grid, model, normal_bank, abnormal_bank, cfg.blur_sigma)
        image_scores.append(sm.image_score)
        image_labels.append(1 if entry.label == "anomalous" else 0)
        if entry.label == "anomalous":
            if entry.mask_path is None:
                have_all_masks = False
                continue
            mask = fs.read_mask_file(entry.mask_path)
            if (mask.h, mask.w) != (grid.source_h, grid.source_w):
                raise ValidationError(
                    f"mask {mask.h}x{mask.w} does not match source dims "
                    f"{grid.source_h}x{grid.source_w} for {entry.feature_path}"
                )
            masks.append(mask.data)
        else:
            masks.append(np.zeros((grid.source_h, grid.source_w), dtype=np.uint8))
        maps.append(sm.pixel_map)

    out: dict[str, float | None] = {key: None for key in METRIC_KEYS}
    scores = np.asarray(image_scores)
    labels = np.asarray(image_labels)
    if 0 < labels.sum() < labels.size:
        out["image_auroc"] = metrics.auroc(scores, labels)
        out["image_ap"] = metrics.average_precision(scores, labels)
        out["image_f1max"] = metrics.f1max(scores, labels)
    else:
        log.info("object %s has a single image class; image metrics absent", object_id)

    if maps and have_all_masks:
        pixel_scores = np.concatenate([m.ravel() for m in maps])
        pixel_labels = np.concatenate([m.ravel() for m in masks])
        if 0 < pixel_labels.sum() < pixel_labels.size:
            out["pixel_auroc"] = metrics.auroc(pixel_scores, pixel_labels)
            out["pixel_ap"] = metrics.average_precision(pixel_scores, pixel_labels)
            out["pixel_f1max"] = metrics.f1max(pixel_scores, pixel_labels)
            out["pro"] = metrics.pro(
                maps, masks, fpr_limit=cfg.pro_fpr_limit, connectivity=cfg.pro_connectivity
            )
    for key, value in out.items():
        if value is not None and not (0.0 <= value <= 1.0):
            raise ValidationError(f"metric {key} out of range for {object_id}: {value}")
    return out, image_scores, image_labels


def evaluate(
    manifest: fs.DatasetManifest,
    model: ModelParams,
    normal_bank: MemoryBank,
    abnormal_bank: MemoryBank | None,
    cfg: EvalConfig | None = None,
    mode: str = "",
    score_sink: dict[str, tuple[list[float], list[int]]] | None = None,
) -> EvalReport:
    """Score every test image and compute per-object plus macro-average metrics.

    Objects where a metric is undefined (single class, missing masks) carry
    ``None`` for it and are excluded from that metric's macro average.
    """
    cfg = cfg or EvalConfig()
    object_ids = manifest.object_ids
    if not object_ids:
        raise ValidationError("test manifest is empty")

    def run(obj: str) -> tuple[str, tuple[dict[str, float | None], list[float], list[int]]]:
        return obj, _evaluate_object(
            obj, manifest.select(object_id=obj), model, normal_bank, abnormal_bank, cfg
        )

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = dict(pool.map(run, object_ids))
    else:
        results = dict(run(obj) for obj in object_ids)

    per_object = {obj: results[obj][0] for obj in object_ids}
    if score_sink is not None:
        for obj in object_ids:
            score_sink[obj] = (results[obj][1], results[obj][2])
    aggregate: dict[str, float | None] = {}
    for key in METRIC_KEYS:
        values = [per_object[obj][key] for obj in object_ids if per_object[obj][key] is not None]
        aggregate[key] = float(np.mean(values)) if values else None
    return EvalReport(per_object=per_object, aggregate=aggregate, mode=mode)
