//! Conditional velocity networks and autoregressive samplers.

mod fields;
mod net;
mod rollout;

pub use fields::{
    bidir_context, causal_context, score_from_velocity, BidirField, CountedSeq, FlowMapField, JointOracle,
    OracleField, SequenceField,
};
pub use net::{predict_velocity, CondBatch, Counted, NetConfig, NetMode, VelocityField, VelocityNet};
pub use rollout::{
    assemble_units, continue_rollout, encode_context, few_step_sample_unit, gt_context, rollout_graph,
    normal_vec, sample_units, self_rollout, self_rollout_with, teacher_forced_sample, ContextCache, GradDepth, GraphRollout,
    RolloutConfig,
};
