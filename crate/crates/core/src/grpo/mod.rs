//! Group-relative policy optimization with rule, ranking and dense rewards.

mod loss;
mod reward;
mod train;

pub use loss::{grpo_loss, token_log_probs, LossConfig, LossStats, RolloutGroup};
pub use reward::{
    collaborative_reward, combined_reward, cosine, normalize_advantages, ranking_reward, ranking_reward_in_base,
    rule_only_reward, rule_reward, semantic_reward, RewardContext, RewardRecipe, RewardVector,
};
pub use train::{
    build_rl_prompts, metrics_csv, rl_train, rollout, sample_group, write_metrics_csv, RlConfig, RlOutcome, RlPrompt,
    RlStepMetrics, Sampler,
};
