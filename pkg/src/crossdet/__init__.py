"""crossdet: a two-branch cross-transformer few-shot object detector.

The package trains and evaluates a metric-learning detector in which a query
image and a batch of support crops are encoded jointly: every transformer
layer exchanges key/value information between the two branches (pooling the
support batch toward the query, repeating the query toward the supports).
Everything runs on a small float64 autodiff core so gradients can be audited
against finite differences.
"""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
