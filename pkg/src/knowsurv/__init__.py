"""Knowledge-guided multimodal survival prediction.

Pathology patch bags, gene expression sets and clinical text knowledge
are fused through text-guided cross-modal attention into a discrete-time
hazard predictor, with full training, cross-validation and ablation
tooling plus a synthetic-cohort oracle.
"""

from ._kernels import BACKEND as kernel_backend
from .config import RunConfig
from .survival import (
    BinScheme,
    HazardCurve,
    SurvivalLabel,
    bin_times,
    concordance_index,
    kaplan_meier,
    log_rank_test,
    nll_surv_loss,
    risk_score,
    survival_from_hazard,
)

__version__ = "0.1.0"

__all__ = [
    "BinScheme",
    "HazardCurve",
    "RunConfig",
    "SurvivalLabel",
    "bin_times",
    "concordance_index",
    "kaplan_meier",
    "kernel_backend",
    "log_rank_test",
    "nll_surv_loss",
    "risk_score",
    "survival_from_hazard",
]
