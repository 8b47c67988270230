"""Lottery tickets in Erdős–Rényi random networks.

Sampling layerwise ER masks, constructing weak and strong tickets inside
them, subset-sum probes, and small numpy trainers for masked networks.
"""

__version__ = "0.1.0"

from .errors import (
    BudgetError,
    DomainError,
    ErTicketsError,
    InfeasibleError,
    NumericError,
    RepairInfeasibleError,
    StructuralError,
)
from .masks import FlowReport, flow_stats, repair_random_addition, repair_rejection, sample_mask
from .netcore import FC, Architecture, Conv2D, Mask, MaskedNetwork, forward, random_target
from .plans import SparsityPlan, make_plan
from .subsetsum import SubsetSumInstance, probe_lemma1, solve, solve_exact
from .tickets import (
    TrialReport,
    WidthPlan,
    compute_eps_schedule,
    compute_q,
    construct_slt,
    construct_wlt_conv,
    construct_wlt_fc,
    probe_lower_bound,
)
