"""Skeleton-based activity segmentation and REBA risk regression."""
from .graph import SkeletonTopology, canonical_topology
from .model import AssessmentModel, ModelConfig, Variant

__version__ = "0.1.0"

__all__ = ["AssessmentModel", "ModelConfig", "SkeletonTopology", "Variant", "canonical_topology"]
