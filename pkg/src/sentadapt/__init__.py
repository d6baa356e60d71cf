"""Toy-scale sentence embeddings with adapter-based domain adaptation."""

from .adapters import (
    AdapterKind,
    AdapterParameters,
    AdapterStack,
    BottleneckConfig,
    KAdapterConfig,
    build_adapter,
    count_parameters,
    inject,
)
from .data import Document, SentencePair, Triplet, TripletDataset, build_citation_triplets, build_pair_triplets
from .encoder import BaseParameters, EncoderConfig, SentenceEncoder, encode, tokenize
from .evaluation import EvalReport, RetrievalTask, average_precision, compare, evaluate, triplets_to_tasks
from .objectives import LossConfig, TripletBatch, contrastive_loss, triplet_margin_loss
from .tensor import Tensor, finite_difference_check
from .trainer import DomainRegistry, TrainConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "AdapterKind", "AdapterParameters", "AdapterStack", "BottleneckConfig", "KAdapterConfig",
    "build_adapter", "count_parameters", "inject",
    "Document", "SentencePair", "Triplet", "TripletDataset", "build_citation_triplets", "build_pair_triplets",
    "BaseParameters", "EncoderConfig", "SentenceEncoder", "encode", "tokenize",
    "EvalReport", "RetrievalTask", "average_precision", "compare", "evaluate", "triplets_to_tasks",
    "LossConfig", "TripletBatch", "contrastive_loss", "triplet_margin_loss",
    "Tensor", "finite_difference_check",
    "DomainRegistry", "TrainConfig", "TrainReport", "train",
]
