"""Patch-feature exporter feeding the dmad anomaly-detection engine."""

__version__ = "0.1.0"

from dmad_extractor.extract import ExtractorConfig, ExtractResult, FeatureExtractor, extract_dataset

__all__ = ["ExtractorConfig", "ExtractResult", "FeatureExtractor", "extract_dataset", "__version__"]
