"""Label quality control for medical segmentation: predict a mask's DSC without its ground truth."""

from .conditioning import ClassEmbedder, EmbeddingTable, cosine_similarity_matrix, embed_classes, render_prompt
from .core import (
    ClassVocabulary,
    EmptyMaskError,
    EmptySliceError,
    Mask,
    SlicePair,
    SubjectMeta,
    Volume,
    load_volume,
    preprocess_pair,
    sample_slices,
    save_volume,
)
from .evaluation import EvalReport, correlation_metrics, eval_suite, map_at_k
from .loss import LossConfig, compositional_loss, grad_check, mse_loss, rank_loss_pair
from .oracle import CorpusManifest, DegradationSpec, GeneratorConfig, build_corpus, degrade, dsc, nsd, resample_corpus
from .pairing import PairingResult, brute_force_matching, build_cost_matrix, optimal_pairs
from .qc import (
    SelectorScore,
    bias_test,
    dataset_report,
    entropy_score,
    mc_dropout_score,
    select_for_annotation,
    select_pseudo_labels,
)
from .regressor import QualityRecord, QualityRegressor, estimate_volume, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
