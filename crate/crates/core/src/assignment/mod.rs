//! One-to-one label assignment and the training loss.

pub mod hungarian;
pub mod loss;

pub use hungarian::{hungarian_match, MatchResult};
pub use loss::{
    focal_loss, focal_term, layer_loss, match_cost, regression_losses, total_loss, FocalParams, LossBreakdown,
    LossWeights, Target,
};
