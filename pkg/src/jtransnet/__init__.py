"""Learned joint auctions: a transformer mechanism for (brand, store) bundles,
its training and auditing tools, a VCG baseline and a lottery-feasibility checker."""

from .auction import AuctionConfig, BidProfile, InstanceError, Outcome, enumerate_bundles
from .baselines import VcgMechanism, vcg, vcg_allocate, vcg_payments
from .evaluator import EvalReport, check_anonymity, check_deterministic, check_ir, evaluate, paired_t_test
from .feasibility import enumerate_full_assignments, infeasibility_survey, lottery_decompose, necessary_condition
from .model import Architecture, JTransNetMechanism, ModelParams, forward, forward_batch
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AuctionConfig", "BidProfile", "InstanceError", "Outcome", "enumerate_bundles",
    "VcgMechanism", "vcg", "vcg_allocate", "vcg_payments",
    "EvalReport", "check_anonymity", "check_deterministic", "check_ir", "evaluate", "paired_t_test",
    "enumerate_full_assignments", "infeasibility_survey", "lottery_decompose", "necessary_condition",
    "Architecture", "JTransNetMechanism", "ModelParams", "forward", "forward_batch",
    "TrainConfig", "Trainer", "train",
]
