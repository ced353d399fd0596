//! Rollouts, delayed rewards, advantages, training losses, the optimizer and
//! the training loop.

mod adam;
mod eval;
mod losses;
mod train;
mod trajectory;

pub use adam::{optimizer_step, Adam, AdamConfig};
pub use eval::{evaluate, gold_trace, perplexity, EvalSummary, GoldTrace, Rewarder, SelectorStats};
pub use losses::{
    critic_loss, lm_loss, mle_loss, nonstg_rl_loss, replay, replay_base, rl_objective,
    selector_entropy, stg_loss, stg_mle_loss, Heads, ObjectiveWeights, ReplayStep,
};
pub use train::{
    init_state, next_token_accuracy, par_map, pretrain, run_until, train, AdapterSource,
    CurveRecord, Method, PretrainConfig, TrainConfig, TrainData, TrainState,
};
pub use trajectory::{
    advantages, advantages_from, assign_reward, assign_reward_with, lambda_advantages, rollout,
    AdvantageEstimate, TrajStep, Trajectory, MAX_CONTEXT,
};
