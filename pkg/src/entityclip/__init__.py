"""Entity-centric image-text retrieval with explanation-bridged attentive experts."""

from .config import RunConfig, load_config
from .data import DatasetRecord, load_dataset, make_synthetic_dataset
from .estimator import EntityCLIPRetriever
from .explanation import ExplanationCache, HttpClient, StubClient, build_prompt, generate_explanation
from .model import EntityCLIP
from .retrieval import RetrievalReport, retrieval_report, zero_shot_classify
from .training import Checkpoint, evaluate, train

__all__ = [
    "Checkpoint",
    "DatasetRecord",
    "EntityCLIP",
    "EntityCLIPRetriever",
    "ExplanationCache",
    "HttpClient",
    "RetrievalReport",
    "RunConfig",
    "StubClient",
    "build_prompt",
    "evaluate",
    "generate_explanation",
    "load_config",
    "load_dataset",
    "make_synthetic_dataset",
    "retrieval_report",
    "train",
    "zero_shot_classify",
]

__version__ = "0.1.0"
