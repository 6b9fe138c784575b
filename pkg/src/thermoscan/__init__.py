"""Contrastive embedding and k-NN anomaly triage for thermal PV imagery."""

from .augment import BatchTransform, augment_batch, sample_transform
from .encoder import (
    Embedding,
    EncoderConfig,
    EncoderParameters,
    desk_config,
    embed,
    forward,
    init_parameters,
    l2_normalize,
)
from .errors import (
    DegenerateBatch,
    DegenerateEmbedding,
    ManifestError,
    MissingPlantStats,
    StoreFormatError,
    ThermoscanError,
    UndefinedMetric,
)
from .evaluation import (
    ConfusionMatrix,
    EvaluationReport,
    SavingsReport,
    ScoredSample,
    auroc,
    average_precision,
    confusion,
    g_mean,
    per_fault_errors,
    savings_report,
    select_model,
)
from .index import (
    AnomalyIndex,
    ModuleVerdict,
    NeighborSet,
    Prediction,
    aggregate_module,
    build_index,
    classify,
    compress_index,
    predict_batch,
    query,
)
from .manifest import FAULT_CLASSES, IRImage, load_images
from .objective import BatchLabels, contrastive_loss, cross_entropy_loss, normal_mean
from .preprocess import (
    PlantStats,
    PreprocessedPatch,
    compute_plant_stats,
    normalize_minmax,
    preprocess,
    raw_to_celsius,
)
from .splits import DatasetSplit, split_dataset
from .synth import SynthConfig, synth_generate
from .trainer import TrainConfig, cosine_lr, make_batches, sgd_step, train

__version__ = "0.1.0"
