"""SISC: stacked interpretable sequencing cell classifier with critical response maps."""

from .crm import (CriticalResponseMap, VARIANTS, crm_all_classes,
                  generate_crm, localization_score, read_map_raw, render_map,
                  write_map_pgm, write_map_raw)
from .data import (AnnotationRecord, NoduleSample, SplitPlan, assign_label,
                   augment, augment_plan, batch_from_samples, crop_nodule,
                   load_manifest, merge_annotations, minmax_normalize,
                   read_shard, split, synth_generate, write_manifest,
                   write_shard)
from .errors import (CheckpointChecksumError, CheckpointError,
                     CheckpointStructureError, CheckpointVersionError,
                     ConfigurationError, DataError, InternalConsistencyError,
                     ManifestError, NumericError, SiscError)
from .estimator import SiscClassifier
from .metrics import (RocCurve, confusion, cv_aggregate, metrics, roc_auc,
                      write_metrics_report, write_roc_csv)
from .sequencer import (CellConfig, FinalCellConfig, SequencerConfig,
                        SequencerModel, TrainSchedule, build_sequencer,
                        forward, backward, load_checkpoint, predict,
                        save_checkpoint, train)
from .tensor import (BatchNormParams, ConvParams, PoolSwitches, Tensor,
                     RUN_DTYPE, TEST_DTYPE)

__version__ = "0.1.0"

__all__ = [
    "AnnotationRecord", "BatchNormParams", "CellConfig",
    "CheckpointChecksumError", "CheckpointError", "CheckpointStructureError",
    "CheckpointVersionError", "ConfigurationError", "ConvParams",
    "CriticalResponseMap", "DataError", "FinalCellConfig",
    "InternalConsistencyError", "ManifestError", "NoduleSample",
    "NumericError", "PoolSwitches", "RocCurve", "RUN_DTYPE", "SequencerConfig",
    "SequencerModel", "SiscClassifier", "SiscError", "SplitPlan", "Tensor",
    "TEST_DTYPE", "TrainSchedule", "VARIANTS", "assign_label", "augment",
    "augment_plan", "backward", "batch_from_samples", "build_sequencer",
    "confusion", "crm_all_classes", "crop_nodule", "cv_aggregate", "forward",
    "generate_crm", "load_checkpoint", "load_manifest", "localization_score",
    "merge_annotations", "metrics", "minmax_normalize", "predict",
    "read_map_raw", "read_shard", "render_map", "roc_auc", "save_checkpoint",
    "split", "synth_generate", "train", "write_manifest", "write_map_pgm",
    "write_map_raw", "write_metrics_report", "write_roc_csv", "write_shard",
    "__version__",
]
