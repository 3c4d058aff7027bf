"""Interpretable lesion classification with mask-based saliency explanations."""

from ._core import (
    Model,
    accuracy,
    adaptive_weight_search,
    balance_loss,
    binarize,
    confusion_metrics,
    discrete_extreme_rate,
    gen_data,
    generate_dataset,
    proportion,
    proportion_box,
    quality_tau,
    read_image,
    similarity_score,
    train,
    upsample,
    write_image,
)

__all__ = [
    "Model",
    "accuracy",
    "adaptive_weight_search",
    "balance_loss",
    "binarize",
    "confusion_metrics",
    "discrete_extreme_rate",
    "gen_data",
    "generate_dataset",
    "proportion",
    "proportion_box",
    "quality_tau",
    "read_image",
    "similarity_score",
    "train",
    "upsample",
    "write_image",
]
