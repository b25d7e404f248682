"""CELESTIAL: self-supervised scene classification.

Pretrain an image featurizer with an augmentation-invariance contrastive
objective on unlabeled imagery, evaluate the embedding space by
nearest-neighbor retrieval, fine-tune a small head on sparse labels,
benchmark label efficiency against a supervised baseline, and serve an
interactive image-similarity search loop with relevance feedback.
"""

__version__ = "0.1.0"

from .augment import AugmentationPolicy, augment, make_view_pair
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    DatasetManifest,
    ImageSample,
    decode_sample,
    load_manifest,
    make_synthetic_dataset,
    save_dataset,
    write_manifest,
)
from .index import (
    EmbeddingIndex,
    build_index,
    knn_query,
    kth_neighbor_accuracy,
    label_efficiency_benchmark,
)
from .model import (
    ClassifierModel,
    FeaturizerConfig,
    FeaturizerModel,
    attach_head,
    build_featurizer,
    count_parameters,
    embed,
    project,
    strip_projection,
)
from .train import (
    ContrastiveBatch,
    HeadConfig,
    LabelFractionSplit,
    TrainConfig,
    contrastive_loss,
    cosine_similarity,
    finetune,
    label_fraction_split,
    pretrain,
    train_supervised_baseline,
)
