"""sumlab: a small, fully deterministic laboratory for contrastive
summarization training.  Pure numpy, CPU only, float64 throughout."""

__version__ = "0.1.0"

from .estimator import ContrastiveSummarizer

__all__ = ["ContrastiveSummarizer", "__version__"]
