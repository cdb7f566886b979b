"""Cross-modal retrieval under noisy labels, desk scale and framework free.

A numpy library that trains per-modality encoders on synthetic multimodal
data with symmetric label noise, refining labels from histories of the
model's own predictions (per-modality temporal consistency intersected
across modalities) and aligning embeddings at three levels: against learnable
class centers, against a per-class FIFO feature memory, and between the
modality views of each object. Retrieval quality is scored as bidirectional
mean average precision.
"""

__version__ = "0.1.0"

from .autodiff import NumericError, ShapeError, Tensor, l2_normalize
from .correction import (CorrectionResult, HistoryBank, NotWarmedUpError, Status,
                         correction_accuracy, inter_only_correct, intra_consistency,
                         intra_only_correct, joint_correct)
from .data import (ConfigError, DataFormatError, DatasetSpec, MultimodalDataset, Split,
                   generate, inject_symmetric_noise, load_dataset, save_dataset)
from .encoders import EncoderConfig, embed, init_params, load_checkpoint, predict, save_checkpoint
from .losses import (GroupMemory, LossBreakdown, center_loss, classifier_loss, group_loss,
                     init_centers, instance_loss, renormalize_centers, total_loss)
from .optim import Adam, GradCheckReport, NonFiniteGradientError, check_gradient
from .retrieval import (DirectionResult, RetrievalReport, average_precision, bidirectional_map,
                        cross_modal_map)
from .training import (DEFAULT_ABLATION_CELLS, EpochReport, TrainConfig, TrainResult,
                       TrainingDivergedError, benchmark_train_config, compare_with_baseline,
                       derive_noise_seed, embed_dataset, evaluate_retrieval,
                       gradient_check_suite, report_csv_lines, run_ablation_suite, run_training)

__all__ = [
    "__version__",
    # numerics
    "Tensor", "ShapeError", "NumericError", "l2_normalize",
    "Adam", "NonFiniteGradientError", "GradCheckReport", "check_gradient",
    # data
    "ConfigError", "DataFormatError", "DatasetSpec", "MultimodalDataset", "Split",
    "generate", "inject_symmetric_noise", "save_dataset", "load_dataset",
    # encoders
    "EncoderConfig", "init_params", "embed", "predict", "save_checkpoint", "load_checkpoint",
    # correction
    "HistoryBank", "Status", "CorrectionResult", "NotWarmedUpError",
    "intra_consistency", "joint_correct", "intra_only_correct", "inter_only_correct",
    "correction_accuracy",
    # losses
    "GroupMemory", "LossBreakdown", "init_centers", "renormalize_centers",
    "center_loss", "group_loss", "instance_loss", "classifier_loss", "total_loss",
    # retrieval
    "DirectionResult", "RetrievalReport", "average_precision", "cross_modal_map",
    "bidirectional_map",
    # training
    "TrainConfig", "EpochReport", "TrainResult", "TrainingDivergedError",
    "run_training", "run_ablation_suite", "compare_with_baseline",
    "DEFAULT_ABLATION_CELLS", "benchmark_train_config", "derive_noise_seed",
    "gradient_check_suite", "report_csv_lines", "embed_dataset", "evaluate_retrieval",
]
