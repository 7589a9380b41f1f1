"""Set-level item embeddings learned from style sets with a skip-gram style objective."""
__version__ = "0.1.0"

from .corpus import Corpus, Item, StyleSet, SyntheticSpec, gen_synthetic, load_corpus_dir, pairwise_transform
from .encoder import EncoderConfig, encode, init_params
from .estimators import MLPStyleClassifier, SetVecEmbedder, StyleSpaceProjector
from .evaluation import (
    AnalogySuite,
    LabeledSetDataset,
    compare_set_vs_pairwise,
    generate_analogy_suite,
    run_analogy_suite,
    train_classifier,
)
from .objective import negsample_loss, sample_negatives, softmax_set_loss
from .query import EmbeddingMatrix, analogy, extract_all, nearest, project_2d
from .tensor import GradientTape, Tensor, backward, grad_check
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "AnalogySuite", "Checkpoint", "Corpus", "EmbeddingMatrix", "EncoderConfig", "GradientTape", "Item",
    "LabeledSetDataset", "MLPStyleClassifier", "SetVecEmbedder", "StyleSet", "StyleSpaceProjector",
    "SyntheticSpec", "Tensor", "TrainConfig", "analogy", "backward", "compare_set_vs_pairwise", "encode",
    "extract_all", "gen_synthetic", "generate_analogy_suite", "grad_check", "init_params", "load_checkpoint",
    "load_corpus_dir", "nearest", "negsample_loss", "pairwise_transform", "project_2d", "run_analogy_suite",
    "sample_negatives", "save_checkpoint", "softmax_set_loss", "train", "train_classifier",
]
