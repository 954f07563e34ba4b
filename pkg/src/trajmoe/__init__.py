"""Cohort-level disease-progression trajectories from sparse longitudinal
snapshots: a stage-gated mixture of mechanistic and neural graph dynamics,
fitted jointly with per-subject pseudo-time placement."""

__version__ = "0.1.0"

from .alignment import Placement, Subject, align_cohort, align_subject
from .cohort import (GenConfig, GmmCutoff, fit_gmm_cutoff, generate_synthetic,
                     normalize, read_cohort_jsonl, write_cohort_jsonl)
from .errors import EngineError
from .graph import Connectome, GraphOperators, build_operators, load_connectome
from .ignd import IgndConfig
from .local_expert import LocalExpertConfig
from .mechanistic import MechanisticParams, eval_f_M
from .metrics import mean_pearson, regional_error_map, sse
from .moe import (ModelConfig, MoeModel, Trajectory, eval_gate, eval_rhs,
                  init_model, integrate, predict_at)
from .training import FitReport, TrainConfig, fit, loss_norm, loss_ortho, loss_traj

__all__ = [
    "Connectome", "EngineError", "FitReport", "GenConfig", "GmmCutoff",
    "GraphOperators", "IgndConfig", "LocalExpertConfig", "MechanisticParams",
    "ModelConfig", "MoeModel", "Placement", "Subject", "Trajectory",
    "TrainConfig", "align_cohort", "align_subject", "build_operators",
    "eval_f_M", "eval_gate", "eval_rhs", "fit", "fit_gmm_cutoff",
    "generate_synthetic", "init_model", "integrate", "load_connectome",
    "loss_norm", "loss_ortho", "loss_traj", "mean_pearson", "normalize",
    "predict_at", "read_cohort_jsonl", "regional_error_map", "sse",
    "write_cohort_jsonl", "__version__",
]
