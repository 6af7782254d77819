"""Preference mining, pair strategies, reward model, preference fine-tuning, merging."""
from .dpo import (DPOConfig, DPOError, DPOResult, batch_seq_logprobs, dpo_loss, implicit_reward_accuracy,
                  seq_logprob, train_stage3_dpo)
from .merge import MergeError, MergeWeights, interpolate, interpolate_unnormalized
from .mining import REGIMES, GeneratedSample, LyricItem, PromptEntry, build_prompt_bank, mine_samples
from .pairs import (DESK_GAP, FULL_SCALE_GAP, PairError, PreferencePair, build_pairs_strategy1, build_pairs_strategy2,
                    build_pairs_strategy3, strategy1_accepts, strategy2_accepts, strategy3_accepts, write_pairs)
from .reward import (LabeledPair, RewardConfig, RewardModel, ThresholdResult, UnreachableTargetError,
                     reward_features, simulate_labels, train_reward_model, tune_threshold)

__all__ = [
    "DESK_GAP", "DPOConfig", "DPOError", "DPOResult", "GeneratedSample", "LabeledPair", "LyricItem",
    "MergeError", "MergeWeights", "FULL_SCALE_GAP", "PairError", "PreferencePair", "PromptEntry", "REGIMES",
    "RewardConfig", "RewardModel", "ThresholdResult", "UnreachableTargetError", "batch_seq_logprobs",
    "build_pairs_strategy1", "build_pairs_strategy2", "build_pairs_strategy3", "build_prompt_bank", "dpo_loss",
    "implicit_reward_accuracy", "interpolate", "interpolate_unnormalized", "mine_samples", "reward_features",
    "seq_logprob", "simulate_labels", "strategy1_accepts", "strategy2_accepts", "strategy3_accepts",
    "train_reward_model", "train_stage3_dpo", "tune_threshold", "write_pairs",
]
