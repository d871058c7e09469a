"""Brain-MRI tumor classification with reconstructed, fine-tuned CNN backbones.

Lightweight modules (ingest, preprocessing, augmentation, metrics, reporting)
import without TensorFlow; ``tumorbench.model`` and ``tumorbench.train`` pull in
Keras on first import.
"""
from .augment import AugmentationConfig, AugmentationRng, apply_augmentations
from .data_ingest import (
    CLASS_NAMES,
    DatasetManifest,
    DatasetSplit,
    SplitSpec,
    TumorClass,
    TumorRecord,
    load_dataset,
    parse_record,
    split_dataset,
)
from .metrics import ConfusionMatrix, MetricReport, confusion_matrix, full_report
from .preprocess import PreprocessConfig, SharpenKernel, preprocess_pipeline

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "AugmentationRng", "apply_augmentations",
    "CLASS_NAMES", "DatasetManifest", "DatasetSplit", "SplitSpec", "TumorClass", "TumorRecord",
    "load_dataset", "parse_record", "split_dataset",
    "ConfusionMatrix", "MetricReport", "confusion_matrix", "full_report",
    "PreprocessConfig", "SharpenKernel", "preprocess_pipeline",
]
