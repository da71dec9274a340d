"""Build retrieval benchmarks from document corpora and evaluate retrievers on them."""

__version__ = "0.1.0"
