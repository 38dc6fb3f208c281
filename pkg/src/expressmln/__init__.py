"""Mean-field inference for Markov logic networks with GNN and tunable entity embeddings."""

from .gnn import PosteriorModel, VARIANTS
from .graph import build_augmented_graph, build_graph, color_refine
from .kb import DatasetSplit, KnowledgeBase, Semantics, load_dataset, load_kb
from .logic import GroundAtom, PredicateSchema, parse_rules
from .meanfield import ObjectiveWeights, TrainConfig, elbo_batch, infer_marginals, train
from .sampler import SamplerConfig, sample_batch

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit", "GroundAtom", "KnowledgeBase", "ObjectiveWeights", "PosteriorModel",
    "PredicateSchema", "SamplerConfig", "Semantics", "TrainConfig", "VARIANTS",
    "build_augmented_graph", "build_graph", "color_refine", "elbo_batch", "infer_marginals",
    "load_dataset", "load_kb", "parse_rules", "sample_batch", "train",
]
