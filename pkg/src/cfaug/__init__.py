"""Counterfactual data augmentation for aspect-based sentiment analysis.

Stages: a small base classifier, integrated-gradients token attribution,
attribution-guided masking, prompted infilling, confidence-gated relabeling
and evaluation of the augmented training set.
"""

from .corpus import Dataset, Polarity, Sample, generate_synthetic, load_dataset
from .pipeline import Pipeline, PipelineConfig, run_ablation, run_augment

__all__ = [
    "Dataset",
    "Pipeline",
    "PipelineConfig",
    "Polarity",
    "Sample",
    "generate_synthetic",
    "load_dataset",
    "run_ablation",
    "run_augment",
]
__version__ = "0.1.0"
