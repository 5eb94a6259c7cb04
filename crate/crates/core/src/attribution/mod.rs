//! Attribution: batch-norm canonization, the relevance-propagation engine
//! with its rule registry, the combined map, and gradient baselines.

mod canonize;
mod gradients;
mod lrp;
mod rules;

pub use canonize::canonize;
pub use gradients::{
    anchor_gradients, attention_diagonal_gradients, integrated_gradients,
    integrated_gradients_attention, saliency,
};
pub use lrp::{combined_map, lrp_backward, relevance_for_sample, Anchor, RelevanceBundle, RuleConfig};
pub use rules::{
    avgpool_redistribute, conv_redistribute, fc_redistribute, maxpool_redistribute,
    redistribute_contributions, split_multiplicative, LinRule, RuleParams, SplitVariant,
};
