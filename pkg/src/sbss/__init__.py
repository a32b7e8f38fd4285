"""Stacking-based multi-scale fusion of semantic segmentation maps."""
from .backend import (FileBackend, OracleBackend, OracleConfig, PatchKey, SceneProfile,
                      SceneSet, generate_scenes, oracle_error_rate)
from .ecm import EcnWeights, FusionMode, act_fuse, act_threshold, ad_map, correct, ecn_forward
from .grid import (IGNORE, PatchGrid, Rect, argmax_labels, confidence_map, crop,
                   make_patch_grid, paste, resize_image, resize_labels, resize_probmap)
from .metrics import ScalePreferenceTable, accumulate, confusion_matrix, miou, profile_scales
from .pipeline import RunConfig, RunResult, refine, run_ms, run_sbss, run_ss
from .scheduler import (BudgetLedger, ScaleSchedule, baseline_ms, baseline_ss, ecs_ms, ecs_ss,
                        ms_vote, schedule_ratio, select_patches)
from .trainer import (TrainConfig, TrainSample, build_training_set, loss_and_grads, sgd_step,
                      train, train_schedule)

__version__ = "0.1.0"
