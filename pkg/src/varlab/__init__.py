"""Exact, enumerable testbed for reward-weighted SFT alignment objectives."""

from .losses import (
    LossEval,
    WeightedBatch,
    dpo_loss,
    grad_check,
    inbatch_partition,
    rlol_loss,
    var_loss,
    var_weights,
    wsft_loss,
)
from .oracle import exact_partition, kl, optimal_policy, rlhf_objective, simplex_minimizer_weighted_sft
from .policy import TabularPolicy, init_from_reference, init_zeros
from .reward import RewardTable, bt_fit, bt_loss, synth_rewards
from .space import Batch, PreferenceTriple, TaskSpace, load_dataset, make_space, sample_batch
from .trainer import RunReport, TrainConfig, evaluate, train

__version__ = "0.1.0"
