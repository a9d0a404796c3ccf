"""Knowledge-aware recommendation with multi-view graph distillation and
multi-level contrastive learning."""
from .diffcore import ParameterStore
from .errors import MGACLError
from .graphstore import FusedGraph, InteractionGraph, KnowledgeGraph, build_fused_graph
from .ingest import DatasetSplit, Prepared, prepare, prepare_files
from .trainer import Recommender, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "ParameterStore",
    "MGACLError",
    "FusedGraph",
    "InteractionGraph",
    "KnowledgeGraph",
    "build_fused_graph",
    "DatasetSplit",
    "Prepared",
    "prepare",
    "prepare_files",
    "Recommender",
    "TrainConfig",
    "fit",
]
