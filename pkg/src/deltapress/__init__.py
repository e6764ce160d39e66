"""Delta compression for fine-tuned weight checkpoints."""

__version__ = "0.1.0"

from deltapress.estimators import DareSparsifier, ImpartQuantizer, ImpartSparsifier, LowRankCompressor  # noqa: E402

__all__ = ["DareSparsifier", "ImpartQuantizer", "ImpartSparsifier", "LowRankCompressor", "__version__"]
