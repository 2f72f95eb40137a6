"""Dynamic parameterized networks for CTR prediction.

High-level entry points are the sklearn-style estimators; the submodules
expose the underlying tensor engine, layers, and training machinery.
"""

from .estimator import DpnClassifier, HashingEncoder  # noqa: F401

__version__ = "0.1.0"

__all__ = ["DpnClassifier", "HashingEncoder", "__version__"]
