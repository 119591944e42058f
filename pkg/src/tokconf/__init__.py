"""Toolkit for detecting incorrectly recognized tokens in recognizer output.

Trains binary (correct/incorrect) sequence labelers on token embeddings plus
per-token decoding-score features, handles the heavy class imbalance of
accurate recognizers with a class-balanced loss, and evaluates detectors
with EER / AUC / NCE.
"""

from tokconf.autodiff import Tape, Tensor, finite_diff_check

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "finite_diff_check",
    "__version__",
]
