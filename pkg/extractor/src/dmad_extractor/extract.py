"""Backbone feature extraction into the anomaly engine's dataset layout.

Images are resized, center-cropped and normalized; features are tapped from
two intermediate stages of a wide residual network, locally averaged over a
3x3 neighborhood, the deeper map is bilinearly resized to the shallower map's
resolution, and the channel concatenation (1536 channels for the default
layer pair) is written row-major per image. Masks follow the same geometric
transform (nearest-neighbor) and are binarized.

Dataset trees follow the common industrial-inspection layout::

    root/<object>/train/good/*.png
    root/<object>/test/good/*.png
    root/<object>/test/<defect>/*.png
    root/<object>/ground_truth/<defect>/<stem>_mask.png
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models
from torchvision.transforms import functional as TF

from dmad_extractor import formats

log = logging.getLogger("dmad_extractor")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
_IMAGENET_MEAN = [0.485, 0.456, 0.406]
_IMAGENET_STD = [0.229, 0.224, 0.225]

_BACKBONES = {
    "wide_resnet50_2": (models.wide_resnet50_2, "Wide_ResNet50_2_Weights"),
    "resnet50": (models.resnet50, "ResNet50_Weights"),
    "resnet18": (models.resnet18, "ResNet18_Weights"),
}


@dataclass
class ExtractorConfig:
    backbone: str = "wide_resnet50_2"
    layers: tuple[str, ...] = ("layer2", "layer3")
    neighborhood: int = 3
    input_size: int = 256
    crop_size: int = 224
    weights: str = "pretrained"  # or "random" (seeded, offline)
    seed: int = 0
    device: str = "cpu"
    batch_size: int = 1
    seen_anomalies: int = 0

    def __post_init__(self) -> None:
        if self.backbone not in _BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; options: {sorted(_BACKBONES)}")
        if self.weights not in ("pretrained", "random"):
            raise ValueError("weights must be 'pretrained' or 'random'")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ValueError("neighborhood must be a positive odd integer")
        if self.crop_size > self.input_size:
            raise ValueError("crop_size cannot exceed input_size")
        if self.batch_size < 1 or self.seen_anomalies < 0:
            raise ValueError("batch_size must be positive and seen_anomalies non-negative")


@dataclass
class ExtractResult:
    train_manifest: Path | None
    test_manifest: Path | None
    outlier_dir: Path | None
    written: int
    channels: int
    failures: list[tuple[Path, str]] = field(default_factory=list)


class FeatureExtractor:
    """Frozen backbone with forward hooks on the configured tap layers."""

    def __init__(self, config: ExtractorConfig):
        self.config = config
        ctor, weights_enum_name = _BACKBONES[config.backbone]
        if config.weights == "pretrained":
            try:
                weights = getattr(models, weights_enum_name).IMAGENET1K_V1
                model = ctor(weights=weights)
            except Exception as exc:
                raise RuntimeError(
                    f"could not load pretrained weights for {config.backbone} "
                    f"({exc}); pass --weights random for an offline run"
                ) from exc
        else:
            torch.manual_seed(config.seed)
            model = ctor(weights=None)
        self.model = model.to(config.device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._taps: dict[str, torch.Tensor] = {}
        for name in config.layers:
            module = getattr(self.model, name, None)
            if module is None:
                raise ValueError(f"backbone {config.backbone} has no layer {name!r}")
            module.register_forward_hook(self._hook(name))
        self._pool = torch.nn.AvgPool2d(
            config.neighborhood, stride=1, padding=config.neighborhood // 2,
            count_include_pad=False,
        )

    def _hook(self, name: str):
        def fn(_module, _inputs, output):
            self._taps[name] = output

        return fn

    def load_image(self, path: Path) -> torch.Tensor:
        with Image.open(path) as img:
            img = img.convert("RGB")
            tensor = TF.to_tensor(img)
        tensor = TF.resize(tensor, [self.config.input_size], antialias=True)
        tensor = TF.center_crop(tensor, [self.config.crop_size])
        return TF.normalize(tensor, _IMAGENET_MEAN, _IMAGENET_STD)

    def load_mask(self, path: Path) -> np.ndarray:
        with Image.open(path) as img:
            img = img.convert("L")
            tensor = TF.to_tensor(img)
        tensor = TF.resize(
            tensor, [self.config.input_size], interpolation=TF.InterpolationMode.NEAREST
        )
        tensor = TF.center_crop(tensor, [self.config.crop_size])
        return (tensor[0].numpy() > 0.5).astype(np.uint8)

    @torch.no_grad()
    def extract_batch(self, batch: torch.Tensor) -> np.ndarray:
        """(B, 3, H, W) images to (B, h0, w0, C) aggregated patch features."""
        self._taps.clear()
        self.model(batch.to(self.config.device))
        pooled = [self._pool(self._taps[name]) for name in self.config.layers]
        target = pooled[0].shape[-2:]
        aligned = [
            p if p.shape[-2:] == target
            else torch.nn.functional.interpolate(
                p, size=target, mode="bilinear", align_corners=False
            )
            for p in pooled
        ]
        stacked = torch.cat(aligned, dim=1)
        return stacked.permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)

    def extract_image(self, path: Path) -> np.ndarray:
        return self.extract_batch(self.load_image(path)[None])[0]


def _find_mask(object_dir: Path, defect: str, stem: str) -> Path | None:
    gt = object_dir / "ground_truth" / defect
    for candidate in (gt / f"{stem}_mask.png", gt / f"{stem}.png"):
        if candidate.is_file():
            return candidate
    return None


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def extract_dataset(
    image_root: Path,
    out_dir: Path,
    config: ExtractorConfig,
    outlier_images: Path | None = None,
) -> ExtractResult:
    """Walk an inspection dataset tree and emit features, masks and manifests.

    Per-file failures (unreadable image, missing mask for an anomalous train
    image) are logged and collected; the run continues. With
    ``config.seen_anomalies`` > 0 the first N anomalous test images per object
    move into the train manifest (with masks) and are excluded from test.
    """
    image_root = Path(image_root)
    out_dir = Path(out_dir)
    extractor = FeatureExtractor(config)
    failures: list[tuple[Path, str]] = []
    train_entries: list[dict] = []
    test_entries: list[dict] = []
    written = 0
    channels = 0

    def emit(image_path: Path, object_id: str, label: str, mask_path: Path | None, split: str):
        nonlocal written, channels
        try:
            features = extractor.extract_image(image_path)
            channels = features.shape[2]
            image_id = f"{object_id}_{split}_{image_path.stem}"
            fpath = out_dir / "features" / object_id / f"{image_id}.dmft"
            formats.write_feature_file(
                fpath, features, object_id, image_id,
                source_h=config.crop_size, source_w=config.crop_size,
            )
            mpath = None
            if mask_path is not None:
                mask = extractor.load_mask(mask_path)
                mpath = out_dir / "masks" / object_id / f"{image_id}.dmmk"
                formats.write_mask_file(mpath, mask)
            return {
                "feature_path": fpath,
                "object_id": object_id,
                "label": label,
                "mask_path": mpath,
            }
        except Exception as exc:  # per-file failure; the run continues
            log.error("failed on %s: %s", image_path, exc)
            failures.append((image_path, str(exc)))
            return None

    objects = sorted(p for p in image_root.iterdir() if p.is_dir())
    if not objects:
        raise ValueError(f"no object directories under {image_root}")
    for object_dir in objects:
        object_id = object_dir.name
        for image_path in _list_images(object_dir / "train" / "good"):
            entry = emit(image_path, object_id, "normal", None, "train")
            if entry:
                written += 1
                train_entries.append(entry)
        moved = 0
        test_dir = object_dir / "test"
        defects = sorted(p.name for p in test_dir.iterdir() if p.is_dir()) if test_dir.is_dir() else []
        for defect in defects:
            for image_path in _list_images(test_dir / defect):
                if defect == "good":
                    entry = emit(image_path, object_id, "normal", None, "test")
                    if entry:
                        written += 1
                        test_entries.append(entry)
                    continue
                mask_path = _find_mask(object_dir, defect, image_path.stem)
                if mask_path is None:
                    log.error("no ground-truth mask for %s", image_path)
                    failures.append((image_path, "missing ground-truth mask"))
                    continue
                split = "train" if moved < config.seen_anomalies else "test"
                entry = emit(image_path, object_id, "anomalous", mask_path, split)
                if entry:
                    written += 1
                    if split == "train":
                        moved += 1
                        train_entries.append(entry)
                    else:
                        test_entries.append(entry)

    outlier_dir = None
    if outlier_images is not None:
        outlier_dir = out_dir / "outliers"
        for image_path in _list_images(Path(outlier_images)):
            try:
                features = extractor.extract_image(image_path)
                formats.write_feature_file(
                    outlier_dir / f"{image_path.stem}.dmft",
                    features,
                    "outlier",
                    image_path.stem,
                    source_h=config.crop_size,
                    source_w=config.crop_size,
                )
                written += 1
            except Exception as exc:
                log.error("failed on outlier %s: %s", image_path, exc)
                failures.append((image_path, str(exc)))

    train_manifest = test_manifest = None
    if train_entries:
        train_manifest = out_dir / "train_manifest.json"
        formats.write_manifest(train_manifest, train_entries)
    if test_entries:
        test_manifest = out_dir / "test_manifest.json"
        formats.write_manifest(test_manifest, test_entries)
    if failures:
        log.warning("%d files failed: %s", len(failures), [str(p) for p, _ in failures[:5]])
    return ExtractResult(
        train_manifest=train_manifest,
        test_manifest=test_manifest,
        outlier_dir=outlier_dir,
        written=written,
        channels=channels,
        failures=failures,
    )
