"""Console entry point for the feature exporter."""

from __future__ import annotations

import argparse
import logging
import sys

from dmad_extractor.extract import ExtractorConfig, extract_dataset


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmad-extract", description=__doc__)
    parser.add_argument("--images", required=True, help="dataset root (object/train|test layout)")
    parser.add_argument("--out", required=True, help="output directory for features/masks/manifests")
    parser.add_argument("--outlier-images", default=None,
                        help="flat directory of texture images exported as outlier grids")
    parser.add_argument("--backbone", default="wide_resnet50_2")
    parser.add_argument("--layers", nargs="+", default=["layer2", "layer3"])
    parser.add_argument("--neighborhood", type=int, default=3)
    parser.add_argument("--input-size", type=int, default=256)
    parser.add_argument("--crop", type=int, default=224)
    parser.add_argument("--weights", choices=("pretrained", "random"), default="pretrained")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--batch-size", type=int, default=1)
    parser.add_argument("--seen-anomalies", type=int, default=0,
                        help="move N anomalous test images per object into the train manifest")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        config = ExtractorConfig(
            backbone=args.backbone,
            layers=tuple(args.layers),
            neighborhood=args.neighborhood,
            input_size=args.input_size,
            crop_size=args.crop,
            weights=args.weights,
            seed=args.seed,
            device=args.device,
            batch_size=args.batch_size,
            seen_anomalies=args.seen_anomalies,
        )
        result = extract_dataset(args.images, args.out, config, outlier_images=args.outlier_images)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {result.written} feature files ({result.channels} channels)")
    if result.train_manifest:
        print(f"train manifest: {result.train_manifest}")
    if result.test_manifest:
        print(f"test manifest: {result.test_manifest}")
    if result.outlier_dir:
        print(f"outlier grids: {result.outlier_dir}")
    if result.failures:
        print(f"{len(result.failures)} files failed; see log", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
