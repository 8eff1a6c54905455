"""From-scratch PitVQA-Net: grounded-text VQA classifier on a numpy autodiff engine."""

__version__ = "0.1.0"
