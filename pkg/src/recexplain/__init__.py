"""Retrieval-augmented recommendation explanation toolkit.

Submodules map onto the pipeline's parts: ``corpus`` (reviews, splits, the
interaction graph), ``gcn`` (collaborative embeddings plus the trained
projection), ``profiler`` (hierarchical review aggregation and opinions),
``retrieval`` (vector index, pseudo-document queries, contrastive adapter),
``evalkit`` (scoring), and ``pipeline`` (orchestration, prompt assembly,
manifests). ``mocks`` hosts the deterministic port implementations used by
mock-mode runs and the test suite.
"""

__version__ = "0.1.0"
