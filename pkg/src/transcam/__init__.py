"""Desk-scale TransCAM: attention-refined class activation maps on a small numpy Conformer."""
from transcam.cam import ClassActivationMap, PseudoLabelMap, compute_cam, coupled_cam, pseudo_label
from transcam.conformer import ConformerConfig, MiniConformer
from transcam.estimator import TransCAMSegmenter
from transcam.train import RunConfig, train

__version__ = "0.1.0"

__all__ = ["ClassActivationMap", "ConformerConfig", "MiniConformer", "PseudoLabelMap", "RunConfig",
           "TransCAMSegmenter", "compute_cam", "coupled_cam", "pseudo_label", "train"]
