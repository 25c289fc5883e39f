"""Graph-evidence retrieval and prompt curation for explainable recommendation.

The pipeline, end to end: ingest a bipartite user-item interaction graph
with profile texts, train a link-prediction GNN, learn per-pair edge masks
and extract explanation paths, retrieve similar users/items by profile
embedding, prune the training set to the pairs that need graph evidence,
assemble prompts, and export a retrieval-augmented fine-tuning dataset.
"""

__version__ = "0.1.0"

from .graphstore import (
    EdgeType,
    EgoGraph,
    ExplanationStore,
    GraphError,
    InteractionGraph,
    NodeKind,
    NodeRef,
    ego_graph,
    ingest_dataset,
    item,
    m_core_prune,
    user,
)

__all__ = [
    "__version__",
    "EdgeType",
    "EgoGraph",
    "ExplanationStore",
    "GraphError",
    "InteractionGraph",
    "NodeKind",
    "NodeRef",
    "ego_graph",
    "ingest_dataset",
    "item",
    "m_core_prune",
    "user",
]
