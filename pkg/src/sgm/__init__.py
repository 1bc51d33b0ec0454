"""Scene graph matching for relationship-aware image-text retrieval."""

from .autodiff import Adam, AdamState, Tensor, backward, no_grad
from .graphs import (Corpus, ObjectNode, RelationshipNode, TextualSceneGraph, VisualSceneGraph,
                     load_corpus, save_corpus, validate)
from .matching import SimilarityBreakdown, score_pair, triplet_loss_all, triplet_loss_hardest
from .model import Mode, ModelConfig, SgmModel
from .retrieval import RetrievalReport, evaluate, evaluate_scores, rank_of_ground_truth
from .synth import SynthSpec, generate_synthetic
from .trainer import Checkpoint, TrainConfig, Trainer, make_batches, train

__version__ = "0.1.0"
