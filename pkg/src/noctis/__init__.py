"""Night-time panoptic segmentation at desk scale.

Metrics, Panoptic-DeepLab style fusion, a tiny trainable segmenter, day to
night translation, synthetic street scenes and the experiment harness that
ties them together.
"""

__version__ = "0.1.0"

from .core import (CITYSCAPES, DESK, ClassCatalog, ConsistencyError, DatasetEntry, DatasetIndex, FormatError,
                   ImageBuffer, LabelMap, NoctisError, NumericError, SegmentMeta, ValidationError, decode_panoptic,
                   encode_panoptic, load_catalog, load_manifest, save_manifest, validate)
from .fusion import FusionParams, HeadOutputs, find_centers, fuse, fuse_from_heads, group_instances
from .metrics import (MetricReport, aggregate, delta_report, instance_ap, match_segments, panoptic_quality,
                      semantic_metrics)

__all__ = [
    "CITYSCAPES", "DESK", "ClassCatalog", "ConsistencyError", "DatasetEntry", "DatasetIndex", "FormatError",
    "FusionParams", "HeadOutputs", "ImageBuffer", "LabelMap", "MetricReport", "NoctisError", "NumericError",
    "SegmentMeta", "ValidationError", "aggregate", "decode_panoptic", "delta_report", "encode_panoptic",
    "find_centers", "fuse", "fuse_from_heads", "group_instances", "instance_ap", "load_catalog", "load_manifest",
    "match_segments", "panoptic_quality", "save_manifest", "semantic_metrics", "validate",
]
