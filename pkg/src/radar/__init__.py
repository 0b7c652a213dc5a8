"""Video tagging over a heterogeneous video-tag graph.

Subpackages cover the full pipeline: corpus ingestion, tag-ontology
induction from co-occurrence statistics, graph construction with
social-follow inheritance, a from-scratch autodiff engine, the gated
graph-transformer model with adversarial aggregation, training,
ranking metrics, and synthetic corpus generation.
"""

__version__ = "0.1.0"


class ValidationError(ValueError):
    """Invalid input data or configuration (CLI maps this to exit code 1)."""
