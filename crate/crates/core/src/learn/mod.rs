//! Losses, the policy-gradient estimator, the optimizer and the two-stage
//! training schedule.

mod gradcheck;
mod losses;
mod optim;
mod reinforce;
mod schedule;

pub use gradcheck::{grad_check, grad_check_coords, max_relative_error, numeric_gradient};
pub use losses::{
    bce_logits, edge_label, edge_labels, edge_loss, LabeledPair, LossBreakdown, LossWeights, LABEL_COSINE,
    PROB_CLAMP,
};
pub use optim::{AdamConfig, AdamW, MomentState};
pub use reinforce::{
    edge_log_prob, phi_dlogits, phi_episode_gradient, phi_gradient_variance, phi_surrogate, update_baseline,
    GradientVariance,
};
pub use schedule::{
    batch_gradients, stage1_episodes, stage1_pairs, train, DecayMode, MetricsRow, PairPool, TrainConfig, TrainState,
    METRICS_HEADER, UNIFORM_LAMBDA,
};
