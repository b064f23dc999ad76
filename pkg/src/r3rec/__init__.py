"""Review-regularized collaborative filtering: scorer, text regularizer, pipeline, benchmarks."""

__version__ = "0.1.0"
