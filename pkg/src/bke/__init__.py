"""Two-phase training pipeline: self-supervised dual-network pretraining
followed by fine-tuning with batch knowledge ensembling, on a small
hand-rolled autodiff core."""

__version__ = "0.1.0"
