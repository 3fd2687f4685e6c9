"""Multi-modal metastasis classifier and its synthetic evaluation bench.

The library splits into seven parts: a synthetic cohort generator
(cohort), 3-D volume encoders (encoder), two-tissue masked relational
attention (mmrl), heterogeneous graph fusion (hga), the
guidance-conditioned label diffusion head (cfd), the two-phase trainer
around the assembled model (model, trainer), and an evaluation kit with
metrics, trajectory export, and the ablation harness (evalkit). The
mmfusion command line wraps the common generate / train / evaluate /
ablate / trajectory flows.
"""

from .cfd import (NoisePredictor, diffusion_loss, forward_sample,
                  invert_to_y0, make_noise_schedule, reverse_step,
                  sample_prediction)
from .cohort import (FoldSplit, PatientRecord, SyntheticConfig,
                     generate_cohort, load_cohort, planted_factors,
                     save_cohort, split_folds)
from .encoder import encode_volume, init_encoder
from .errors import (CheckpointError, CohortFormatError, ConfigurationError,
                     TrainingDiverged)
from .evalkit import (aggregate_metrics, classification_metrics,
                      davies_bouldin, export_trajectory, load_trajectory,
                      paired_t_test, run_ablation)
from .hga import (FusionHead, ModalityGraphLayer, build_modality_graph,
                  hga_forward)
from .mmrl import (MaskedRelationalFusion, alignment_loss, mmrl_forward,
                   sample_relation_mask)
from .model import MMFusionModel, collate, predict_records
from .trainer import (TrainConfig, load_checkpoint, save_checkpoint,
                      train_model)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "CohortFormatError", "ConfigurationError",
    "FoldSplit", "FusionHead", "MMFusionModel", "MaskedRelationalFusion",
    "ModalityGraphLayer", "NoisePredictor", "PatientRecord",
    "SyntheticConfig", "TrainConfig", "TrainingDiverged",
    "aggregate_metrics", "alignment_loss", "build_modality_graph",
    "classification_metrics", "collate", "davies_bouldin",
    "diffusion_loss", "encode_volume", "export_trajectory",
    "forward_sample", "generate_cohort", "hga_forward", "init_encoder",
    "invert_to_y0", "load_checkpoint", "load_cohort", "load_trajectory",
    "make_noise_schedule", "mmrl_forward", "paired_t_test",
    "planted_factors", "predict_records", "reverse_step", "run_ablation",
    "sample_prediction", "sample_relation_mask", "save_checkpoint",
    "save_cohort", "split_folds", "train_model",
]
