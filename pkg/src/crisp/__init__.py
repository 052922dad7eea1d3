"""Contrastive image/mask embedding with retrieval-based uncertainty maps.

The package trains a small joint embedding on synthetic shape data and
turns it into per-pixel uncertainty estimates by comparing a prediction
against decoded nearest-neighbor ground truths, alongside morphological
and entropy baselines and the metric suite to score them all.
"""

from .data import (
    CorruptionConfig,
    Dataset,
    Sample,
    classes_to_mask,
    corrupt_mask,
    generate_dataset,
    load_dataset,
    mask_to_classes,
    save_dataset,
)
from .errors import (
    ConfigError,
    CrispError,
    DegenerateError,
    DimensionError,
    FormatError,
    InputError,
)
from .metrics import (
    EvalConfig,
    EvalReport,
    SampleRecord,
    correlation_metric,
    dice_score,
    ece,
    evaluate,
    sample_uncertainty,
    save_records_csv,
    save_report_json,
    uncertainty_error_mi,
)
from .model import (
    CrispModel,
    ModelConfig,
    decode,
    encode_image,
    encode_mask,
    init_model,
    load_model,
    project,
    save_model,
    segment,
    similarity_matrix,
)
from .training import (
    TrainConfig,
    TrainHistory,
    adam_step,
    contrastive_loss,
    diag_accuracy,
    dice_ce_loss,
    split_indices,
    total_loss,
    train,
)
from .uncertainty import (
    LatentBank,
    VmfKernel,
    build_bank,
    crisp_uncertainty,
    default_m,
    edge_uncertainty,
    entropy_uncertainty,
    fit_vmf,
    load_pgm,
    load_uncertainty,
    retrieve,
    save_pgm,
    save_uncertainty,
    vmf_weight,
    write_pgm,
)

__version__ = "0.1.0"
