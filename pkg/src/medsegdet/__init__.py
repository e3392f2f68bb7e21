"""Desk-scale reasoning segmentation and detection pipeline.

Subpackages: autodiff substrate, toy multimodal LM, candidate-token fusion,
perception decoders, loss suite, evaluation metrics, synthetic data
pipeline, trainer, and a batch CLI.
"""

__version__ = "0.1.0"
