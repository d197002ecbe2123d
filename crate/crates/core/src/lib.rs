// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collapse_rank;
pub mod error;
pub mod export;
pub mod gaussian_field;
pub mod mask_learner;
pub mod order_eval;
pub mod seed;

pub use collapse_rank::{
    build_graph, greedy_oracle_order, pagerank_direct, pagerank_neumann, pagerank_power,
    CollapseRanking, DependencyGraph, RankMethod, TeleportMode,
};
pub use error::{CollapseError, Result};
pub use gaussian_field::{GaussianModel, PatchField, StructureKind, StructureSpec};
pub use mask_learner::{train, SelectionMaskSet, TrainConfig, TrainReport};
pub use order_eval::{
    compare_orders, cumulative_entropy, find_knee, masked_classifier_eval, ClassifierConfig,
    MaskRateCurve, OrderingReport,
};
